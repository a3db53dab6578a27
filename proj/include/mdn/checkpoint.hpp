#pragma once

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "mdn/error.hpp"
#include "mdn/feature_io.hpp"
#include "mdn/graphnet.hpp"

namespace mdn {

// "MDN1", u32 F, u32 hidden, f64 scale, u32 tensor count, then per tensor
// u32 rows, u32 cols and rows*cols f64 values (row-major), little-endian.

inline void write_checkpoint(std::ostream& out, const MDNModel& model) {
  validate(model.config);
  out.write("MDN1", 4);
  detail::put_u32(out, static_cast<std::uint32_t>(model.config.feature_channels));
  detail::put_u32(out, static_cast<std::uint32_t>(model.config.hidden));
  detail::put_f64(out, model.config.scale);
  std::uint32_t count = 0;
  for_each_tensor(model.scoring, [&](const Mat&) { ++count; });
  detail::put_u32(out, count);
  for_each_tensor(model.scoring, [&](const Mat& t) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index i = 0; i < t.size(); ++i) detail::put_f64(out, t.data()[i]);
  });
}

inline MDNModel read_checkpoint(std::istream& in, const std::string& name = "<stream>") {
  detail::expect_magic(in, "MDN1", name);
  MDNConfig config;
  config.feature_channels = static_cast<int>(detail::get_u32(in, name));
  config.hidden = static_cast<int>(detail::get_u32(in, name));
  config.scale = detail::get_f64(in, name);
  MDN_CHECK(config.feature_channels > 0 && config.feature_channels < (1 << 20) && config.hidden > 0 &&
                config.hidden < (1 << 16) && config.scale > 0.0 && std::isfinite(config.scale),
            ErrorCode::kInvalidFile, name + ": invalid model configuration block");
  // Shapes come from a freshly initialized model of the same configuration.
  MDNModel model = init_model(config, 0);
  std::uint32_t expected = 0;
  for_each_tensor(model.scoring, [&](const Mat&) { ++expected; });
  const std::uint32_t count = detail::get_u32(in, name);
  MDN_CHECK(count == expected, ErrorCode::kInvalidFile,
            name + ": expected " + std::to_string(expected) + " tensors, found " + std::to_string(count));
  std::size_t index = 0;
  for_each_tensor(model.scoring, [&](Mat& t) {
    const std::string where = name + " tensor " + std::to_string(index++);
    const std::uint32_t rows = detail::get_u32(in, where);
    const std::uint32_t cols = detail::get_u32(in, where);
    MDN_CHECK(rows == t.rows() && cols == t.cols(), ErrorCode::kInvalidFile,
              where + ": shape " + std::to_string(rows) + "x" + std::to_string(cols) + " does not match " +
                  std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = detail::get_f64(in, where);
    MDN_CHECK(t.allFinite(), ErrorCode::kInvalidFile, where + ": non-finite weights");
  });
  return model;
}

inline void save_checkpoint(const MDNModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  MDN_CHECK(out.good(), ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  write_checkpoint(out, model);
  MDN_CHECK(out.good(), ErrorCode::kIo, "failed writing " + path.string());
}

inline MDNModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  MDN_CHECK(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  return read_checkpoint(in, path.string());
}

}  // namespace mdn
