#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "mdn/geometry.hpp"

namespace mdn {

namespace detail {

// Parses the vertex part of an OBJ face token ("7", "7/2", "7//3", "-1").
inline int parse_obj_index(const std::string& token, int vertex_count, const std::string& where) {
  const std::string head = token.substr(0, token.find('/'));
  int value = 0;
  const auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), value);
  MDN_CHECK(ec == std::errc() && ptr == head.data() + head.size(), ErrorCode::kInvalidFile,
            where + ": malformed face index '" + token + "'");
  MDN_CHECK(value != 0, ErrorCode::kInvalidFile, where + ": face index 0 (OBJ is 1-based)");
  const int idx = value > 0 ? value - 1 : vertex_count + value;
  MDN_CHECK(idx >= 0 && idx < vertex_count, ErrorCode::kInvalidFile,
            where + ": face index " + std::to_string(value) + " out of range");
  return idx;
}

}  // namespace detail

inline TriangleMesh parse_obj(std::istream& in, const std::string& name = "<stream>") {
  TriangleMesh mesh;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = name + ":" + std::to_string(line_no);
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 p;
      MDN_CHECK(static_cast<bool>(ls >> p.x() >> p.y() >> p.z()), ErrorCode::kInvalidFile,
                where + ": malformed vertex record");
      mesh.vertices.push_back(p);
    } else if (tag == "f") {
      std::vector<std::string> tokens;
      for (std::string t; ls >> t;) tokens.push_back(t);
      MDN_CHECK(tokens.size() >= 3, ErrorCode::kInvalidFile, where + ": face with fewer than 3 vertices");
      MDN_CHECK(tokens.size() == 3, ErrorCode::kUnsupportedFormat,
                where + ": only triangular faces are supported (got " +
                    std::to_string(tokens.size()) + " vertices)");
      const int n = static_cast<int>(mesh.vertices.size());
      Face f{};
      for (int k = 0; k < 3; ++k) f[k] = detail::parse_obj_index(tokens[k], n, where);
      MDN_CHECK(f[0] != f[1] && f[1] != f[2] && f[0] != f[2], ErrorCode::kInvalidFile,
                where + ": face references the same vertex twice");
      mesh.faces.push_back(f);
    }
    // vt, vn, g, o, s, usemtl, mtllib and unknown records are ignored.
  }
  return mesh;
}

inline TriangleMesh load_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  MDN_CHECK(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  return parse_obj(in, path.string());
}

inline void write_obj(std::ostream& out, const TriangleMesh& mesh) {
  char buf[128];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", v.x(), v.y(), v.z());
    out << buf;
  }
  for (const auto& f : mesh.faces) {
    out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  }
}

inline void save_obj(const TriangleMesh& mesh, const std::filesystem::path& path) {
  validate_mesh(mesh);
  std::ofstream out(path, std::ios::binary);
  MDN_CHECK(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  write_obj(out, mesh);
  MDN_CHECK(out.good(), ErrorCode::kIo, "write failed for " + path.string());
}

}  // namespace mdn
