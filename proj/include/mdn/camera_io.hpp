#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mdn/camera.hpp"
#include "mdn/error.hpp"

namespace mdn {

using Json = nlohmann::json;

namespace detail {

inline const Json& require_field(const Json& j, const char* field, const std::string& where) {
  MDN_CHECK(j.is_object(), ErrorCode::kInvalidFile, where + ": expected a JSON object");
  auto it = j.find(field);
  MDN_CHECK(it != j.end(), ErrorCode::kInvalidFile, where + ": missing field \"" + field + "\"");
  return *it;
}

inline double json_number(const Json& j, const char* field, const std::string& where) {
  const Json& v = require_field(j, field, where);
  MDN_CHECK(v.is_number(), ErrorCode::kInvalidFile, where + ": field \"" + field + "\" must be a number");
  const double d = v.get<double>();
  MDN_CHECK(std::isfinite(d), ErrorCode::kInvalidFile, where + ": field \"" + field + "\" is not finite");
  return d;
}

inline std::vector<double> json_array(const Json& j, const char* field, std::size_t n, const std::string& where) {
  const Json& v = require_field(j, field, where);
  MDN_CHECK(v.is_array() && v.size() == n, ErrorCode::kInvalidFile,
            where + ": field \"" + field + "\" must be an array of " + std::to_string(n) + " numbers");
  std::vector<double> out;
  for (const auto& x : v) {
    MDN_CHECK(x.is_number() && std::isfinite(x.get<double>()), ErrorCode::kInvalidFile,
              where + ": field \"" + field + "\" must contain finite numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  MDN_CHECK(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorCode::kInvalidFile, path.string() + ": malformed JSON (" + e.what() + ")");
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  MDN_CHECK(out.good(), ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out << text;
  MDN_CHECK(out.good(), ErrorCode::kIo, "failed writing " + path.string());
}

}  // namespace detail

/// Pose from either {"R": 9 row-major, "t": 3} or {"rot6": 6, "tz": x}.
inline Pose parse_pose(const Json& j, const std::string& where) {
  MDN_CHECK(j.is_object(), ErrorCode::kInvalidFile, where + ": expected a JSON object");
  if (j.contains("rot6")) {
    Pose7D p;
    const auto r = detail::json_array(j, "rot6", 6, where);
    std::copy(r.begin(), r.end(), p.rot6.begin());
    p.tz = detail::json_number(j, "tz", where);
    try {
      return pose_from_7d(p);
    } catch (const Error& e) {
      throw Error(e.code(), where + ": field \"rot6\": " + e.what());
    }
  }
  const auto r = detail::json_array(j, "R", 9, where);
  const auto t = detail::json_array(j, "t", 3, where);
  Pose pose;
  for (int i = 0; i < 9; ++i) pose.R(i / 3, i % 3) = r[i];
  pose.t = Vec3(t[0], t[1], t[2]);
  try {
    validate(pose, 1e-6);
  } catch (const Error& e) {
    throw Error(ErrorCode::kInvalidFile, where + ": field \"R\": " + e.what());
  }
  return pose;
}

inline Intrinsics parse_intrinsics(const Json& j, const std::string& where) {
  Intrinsics k;
  k.fx = detail::json_number(j, "fx", where);
  k.fy = detail::json_number(j, "fy", where);
  k.cx = detail::json_number(j, "cx", where);
  k.cy = detail::json_number(j, "cy", where);
  const double w = detail::json_number(j, "width", where);
  const double h = detail::json_number(j, "height", where);
  MDN_CHECK(w == std::floor(w) && h == std::floor(h), ErrorCode::kInvalidFile,
            where + ": fields \"width\"/\"height\" must be integers");
  k.width = static_cast<int>(w);
  k.height = static_cast<int>(h);
  try {
    validate(k);
  } catch (const Error& e) {
    throw Error(ErrorCode::kInvalidFile, where + ": " + e.what());
  }
  return k;
}

inline CameraView parse_camera(const Json& j, const std::string& where) {
  return {parse_intrinsics(j, where), parse_pose(j, where)};
}

inline Json pose_to_json(const Pose& pose) {
  Json j;
  j["R"] = Json::array();
  for (int i = 0; i < 9; ++i) j["R"].push_back(pose.R(i / 3, i % 3));
  j["t"] = {pose.t.x(), pose.t.y(), pose.t.z()};
  return j;
}

inline Json camera_to_json(const CameraView& view) {
  Json j = pose_to_json(view.pose);
  const auto& k = view.intrinsics;
  j["fx"] = k.fx;
  j["fy"] = k.fy;
  j["cx"] = k.cx;
  j["cy"] = k.cy;
  j["width"] = k.width;
  j["height"] = k.height;
  return j;
}

inline CameraView load_camera(const std::filesystem::path& path) {
  return parse_camera(detail::read_json_file(path), path.string());
}

inline void save_camera(const CameraView& view, const std::filesystem::path& path) {
  detail::write_text_file(path, camera_to_json(view).dump(2) + "\n");
}

}  // namespace mdn
