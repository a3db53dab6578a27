#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "mdn/error.hpp"
#include "mdn/features.hpp"

namespace mdn {

// MVFM: "MVFM", u32 version, u32 n_levels, then per level u32 H, W, C,
// f32 stride and H*W*C f32 values. Everything little-endian.

inline constexpr std::uint32_t kFeatureFormatVersion = 1;

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v & 0xffffffffu));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f32(std::ostream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
inline void put_f64(std::ostream& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  MDN_CHECK(in.gcount() == 4, ErrorCode::kInvalidFile, what + ": unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& in, const std::string& what) {
  const std::uint64_t lo = get_u32(in, what);
  const std::uint64_t hi = get_u32(in, what);
  return lo | (hi << 32);
}

inline float get_f32(std::istream& in, const std::string& what) {
  return std::bit_cast<float>(get_u32(in, what));
}
inline double get_f64(std::istream& in, const std::string& what) {
  return std::bit_cast<double>(get_u64(in, what));
}

inline void expect_magic(std::istream& in, const char* magic, const std::string& what) {
  char m[4];
  in.read(m, 4);
  MDN_CHECK(in.gcount() == 4 && std::memcmp(m, magic, 4) == 0, ErrorCode::kInvalidFile,
            what + ": bad magic, expected \"" + std::string(magic, 4) + "\"");
}

}  // namespace detail

inline void write_features(std::ostream& out, const std::vector<FeatureMap>& levels) {
  out.write("MVFM", 4);
  detail::put_u32(out, kFeatureFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(levels.size()));
  for (const auto& m : levels) {
    validate(m);
    detail::put_u32(out, static_cast<std::uint32_t>(m.height));
    detail::put_u32(out, static_cast<std::uint32_t>(m.width));
    detail::put_u32(out, static_cast<std::uint32_t>(m.channels));
    detail::put_f32(out, m.stride);
    for (float v : m.data) detail::put_f32(out, v);
  }
}

inline std::vector<FeatureMap> read_features(std::istream& in, const std::string& name = "<stream>") {
  detail::expect_magic(in, "MVFM", name);
  const std::uint32_t version = detail::get_u32(in, name);
  MDN_CHECK(version == kFeatureFormatVersion, ErrorCode::kUnsupportedFormat,
            name + ": unsupported feature format version " + std::to_string(version));
  const std::uint32_t n = detail::get_u32(in, name);
  MDN_CHECK(n >= 1 && n <= 64, ErrorCode::kInvalidFile, name + ": implausible level count " + std::to_string(n));
  std::vector<FeatureMap> levels;
  for (std::uint32_t l = 0; l < n; ++l) {
    const std::string where = name + " level " + std::to_string(l);
    const std::uint32_t h = detail::get_u32(in, where);
    const std::uint32_t w = detail::get_u32(in, where);
    const std::uint32_t c = detail::get_u32(in, where);
    const float stride = detail::get_f32(in, where);
    MDN_CHECK(h > 0 && w > 0 && c > 0 && static_cast<std::uint64_t>(h) * w * c <= (1ULL << 30),
              ErrorCode::kInvalidFile, where + ": invalid dimensions");
    MDN_CHECK(stride > 0.0f && std::isfinite(stride), ErrorCode::kInvalidFile, where + ": invalid stride");
    FeatureMap m(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c), stride);
    for (auto& v : m.data) v = detail::get_f32(in, where);
    levels.push_back(std::move(m));
  }
  return levels;
}

inline void save_features(const std::vector<FeatureMap>& levels, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  MDN_CHECK(out.good(), ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  write_features(out, levels);
  MDN_CHECK(out.good(), ErrorCode::kIo, "failed writing " + path.string());
}

inline std::vector<FeatureMap> load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  MDN_CHECK(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  return read_features(in, path.string());
}

}  // namespace mdn
