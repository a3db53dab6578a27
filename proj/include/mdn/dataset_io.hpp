#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mdn/camera_io.hpp"
#include "mdn/error.hpp"
#include "mdn/feature_io.hpp"
#include "mdn/obj_io.hpp"
#include "mdn/pipeline.hpp"

namespace mdn {

// <root>/manifest.json plus one directory per sample holding gt.obj,
// coarse.obj, view_<k>.mvfm and view_<k>.cam.json.

inline constexpr int kDatasetFormatVersion = 1;

inline std::string view_feature_name(std::size_t k) { return "view_" + std::to_string(k) + ".mvfm"; }
inline std::string view_camera_name(std::size_t k) { return "view_" + std::to_string(k) + ".cam.json"; }

/// Camera file paired with a feature file: view_0.mvfm -> view_0.cam.json.
inline std::filesystem::path camera_path_for(const std::filesystem::path& features) {
  std::filesystem::path p = features;
  p.replace_extension(".cam.json");
  return p;
}

inline FeatureStack load_view(const std::filesystem::path& features) {
  FeatureStack s;
  s.levels = load_features(features);
  s.camera = load_camera(camera_path_for(features));
  return s;
}

inline void save_view(const FeatureStack& view, const std::filesystem::path& features) {
  save_features(view.levels, features);
  save_camera(view.camera, camera_path_for(features));
}

inline Json dataset_options_json(const DatasetOptions& o) {
  Json j;
  j["views"] = o.views;
  j["subdivisions"] = o.subdivisions;
  j["image_size"] = o.image_size;
  j["focal"] = o.focal;
  j["camera_distance"] = o.camera_distance;
  j["strides"] = o.render.strides;
  j["position_gain"] = o.render.position_gain;
  j["channels"] = {"depth", "normal_x", "normal_y", "normal_z", "silhouette", "position_x", "position_y",
                   "position_z"};
  j["gt_points"] = o.gt_points;
  j["coarse_noise_max"] = o.coarse_noise;
  j["coarse_shift_max"] = o.coarse_shift;
  j["coarse_smooth_steps"] = o.coarse_smooth_steps;
  return j;
}

inline void save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& root,
                         const DatasetOptions& options, std::uint64_t seed) {
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  MDN_CHECK(!ec, ErrorCode::kIo, "cannot create " + root.string() + ": " + ec.message());
  Json manifest;
  manifest["format"] = "mdn-dataset";
  manifest["version"] = kDatasetFormatVersion;
  manifest["seed"] = seed;
  manifest["generation"] = dataset_options_json(options);
  manifest["samples"] = Json::array();
  for (const auto& s : samples) {
    const auto dir = root / s.id;
    std::filesystem::create_directories(dir, ec);
    MDN_CHECK(!ec, ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
    save_obj(s.gt_mesh, dir / "gt.obj");
    save_obj(s.coarse_mesh, dir / "coarse.obj");
    Json entry;
    entry["id"] = s.id;
    entry["seed"] = s.seed;
    entry["gt_points"] = s.gt_points.size();
    entry["gt_points_seed"] = s.gt_points_seed;
    entry["views"] = Json::array();
    for (std::size_t k = 0; k < s.views.size(); ++k) {
      save_view(s.views[k], dir / view_feature_name(k));
      entry["views"].push_back(view_feature_name(k));
    }
    manifest["samples"].push_back(entry);
  }
  detail::write_text_file(root / "manifest.json", manifest.dump(2) + "\n");
}

/// Loads every sample listed in the manifest. Ground-truth points are
/// re-drawn from gt.obj with the recorded count and seed.
inline std::vector<Sample> load_dataset(const std::filesystem::path& root) {
  const auto manifest_path = root / "manifest.json";
  const Json manifest = detail::read_json_file(manifest_path);
  const std::string where = manifest_path.string();
  const Json& list = detail::require_field(manifest, "samples", where);
  MDN_CHECK(list.is_array() && !list.empty(), ErrorCode::kInvalidFile, where + ": \"samples\" must be a non-empty array");
  std::vector<Sample> out;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const Json& e = list[i];
    const std::string ew = where + " samples[" + std::to_string(i) + "]";
    const Json& id = detail::require_field(e, "id", ew);
    MDN_CHECK(id.is_string(), ErrorCode::kInvalidFile, ew + ": field \"id\" must be a string");
    Sample s;
    s.id = id.get<std::string>();
    const auto dir = root / s.id;
    s.gt_mesh = load_obj(dir / "gt.obj");
    s.coarse_mesh = load_obj(dir / "coarse.obj");
    MDN_CHECK(s.coarse_mesh.faces == s.gt_mesh.faces, ErrorCode::kInvalidFile,
              (dir / "coarse.obj").string() + ": topology differs from gt.obj");
    const Json& views = detail::require_field(e, "views", ew);
    MDN_CHECK(views.is_array() && !views.empty(), ErrorCode::kInvalidFile, ew + ": \"views\" must be a non-empty array");
    for (const auto& v : views) {
      MDN_CHECK(v.is_string(), ErrorCode::kInvalidFile, ew + ": view entries must be file names");
      s.views.push_back(load_view(dir / v.get<std::string>()));
    }
    const std::size_t n = static_cast<std::size_t>(detail::json_number(e, "gt_points", ew));
    s.seed = e.value("seed", std::uint64_t{0});
    s.gt_points_seed = e.value("gt_points_seed", std::uint64_t{0});
    s.gt_points = sample_surface(s.gt_mesh, n, s.gt_points_seed);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mdn
