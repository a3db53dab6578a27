#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mdn/camera.hpp"
#include "mdn/error.hpp"
#include "mdn/features.hpp"
#include "mdn/geometry.hpp"

namespace mdn {

// Channel layout of every rendered level.
enum RenderChannel : int {
  kDepthChannel = 0,      // camera-space z of the nearest hit
  kNormalChannel = 1,     // world-space face normal, 3 channels
  kSilhouetteChannel = 4, // 1 on the object, 0 elsewhere
  kPositionChannel = 5,   // world-space hit position times position_gain, 3 channels
  kRenderChannels = 8,
};

struct RenderOptions {
  std::vector<int> strides{1, 2, 4};
  double position_gain = 10.0;
};

/// Camera at `eye` looking at `target`; image y points along -up.
inline CameraView look_at(const Intrinsics& k, const Vec3& eye, const Vec3& target = Vec3::Zero(),
                          Vec3 up = Vec3::UnitZ()) {
  validate(k);
  const Vec3 z = (target - eye).normalized();
  MDN_CHECK(z.allFinite(), ErrorCode::kInvalidArgument, "camera eye coincides with its target");
  if (std::abs(z.dot(up.normalized())) > 0.99) up = Vec3::UnitY();
  const Vec3 y = -(up - up.dot(z) * z).normalized();
  const Vec3 x = y.cross(z);
  CameraView view;
  view.intrinsics = k;
  view.pose.R.row(0) = x.transpose();
  view.pose.R.row(1) = y.transpose();
  view.pose.R.row(2) = z.transpose();
  view.pose.t = -view.pose.R * eye;
  return view;
}

namespace detail {

// Ray from the camera origin along d (camera frame); returns t or +inf.
inline double ray_hit_camera(const Vec3& d, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 p = d.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-15) return std::numeric_limits<double>::infinity();
  const double inv = 1.0 / det;
  const Vec3 s = -a;
  const double u = s.dot(p) * inv;
  if (u < 0.0 || u > 1.0) return std::numeric_limits<double>::infinity();
  const Vec3 q = s.cross(e1);
  const double v = d.dot(q) * inv;
  if (v < 0.0 || u + v > 1.0) return std::numeric_limits<double>::infinity();
  const double t = e2.dot(q) * inv;
  return t > kMinDepth ? t : std::numeric_limits<double>::infinity();
}

}  // namespace detail

/// Renders one feature level: each cell (x, y) casts the ray through image
/// pixel (stride * x, stride * y) and records the nearest surface hit.
inline FeatureMap render_level(const TriangleMesh& mesh, const CameraView& view, int stride,
                               const RenderOptions& opt = {}) {
  validate(view.intrinsics);
  MDN_CHECK(stride >= 1, ErrorCode::kInvalidArgument, "render stride must be >= 1");
  const auto& k = view.intrinsics;
  const int W = (k.width - 1) / stride + 1;
  const int H = (k.height - 1) / stride + 1;
  FeatureMap map(H, W, kRenderChannels, static_cast<float>(stride));

  std::vector<double> depth(static_cast<std::size_t>(H) * W, std::numeric_limits<double>::infinity());
  std::vector<int> hit_face(depth.size(), -1);

  std::vector<Vec3> cam(mesh.vertices.size());
  for (std::size_t i = 0; i < cam.size(); ++i) cam[i] = world_to_camera(view.pose, mesh.vertices[i]);

  auto ray = [&](int x, int y) {
    return Vec3((stride * x - k.cx) / k.fx, (stride * y - k.cy) / k.fy, 1.0);
  };

  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const Face& face = mesh.faces[f];
    const Vec3& a = cam[face[0]];
    const Vec3& b = cam[face[1]];
    const Vec3& c = cam[face[2]];
    if (a.z() <= kMinDepth || b.z() <= kMinDepth || c.z() <= kMinDepth) continue;
    double umin = std::numeric_limits<double>::infinity(), umax = -umin;
    double vmin = umin, vmax = -umin;
    for (const Vec3* p : {&a, &b, &c}) {
      const Vec2 uv = project(k, *p);
      umin = std::min(umin, uv.x());
      umax = std::max(umax, uv.x());
      vmin = std::min(vmin, uv.y());
      vmax = std::max(vmax, uv.y());
    }
    const int x0 = std::max(0, static_cast<int>(std::floor(umin / stride)));
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(umax / stride)));
    const int y0 = std::max(0, static_cast<int>(std::floor(vmin / stride)));
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(vmax / stride)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double t = detail::ray_hit_camera(ray(x, y), a, b, c);
        const std::size_t cell = static_cast<std::size_t>(y) * W + x;
        if (t < depth[cell]) {
          depth[cell] = t;
          hit_face[cell] = static_cast<int>(f);
        }
      }
    }
  }

  const Mat3 Rt = view.pose.R.transpose();
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t cell = static_cast<std::size_t>(y) * W + x;
      if (hit_face[cell] < 0) continue;
      const Vec3 p_cam = depth[cell] * ray(x, y);
      const Vec3 p_world = Rt * (p_cam - view.pose.t);
      const Vec3 n = face_normal(mesh, mesh.faces[hit_face[cell]]);
      map.at(y, x, kDepthChannel) = static_cast<float>(p_cam.z());
      for (int i = 0; i < 3; ++i) {
        map.at(y, x, kNormalChannel + i) = static_cast<float>(n[i]);
        map.at(y, x, kPositionChannel + i) = static_cast<float>(opt.position_gain * p_world[i]);
      }
      map.at(y, x, kSilhouetteChannel) = 1.0f;
    }
  }
  return map;
}

/// One FeatureStack per camera: a level per configured stride.
inline FeatureStack render_view(const TriangleMesh& mesh, const CameraView& view,
                                const RenderOptions& opt = {}) {
  validate_mesh(mesh);
  FeatureStack stack;
  stack.camera = view;
  for (int s : opt.strides) stack.levels.push_back(render_level(mesh, view, s, opt));
  return stack;
}

}  // namespace mdn
