#include "mdn/cli.hpp"

int main(int argc, char** argv) { return mdn::cli::run(argc, argv); }
