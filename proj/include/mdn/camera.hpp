#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <Eigen/Eigenvalues>
#include <optional>
#include <span>
#include <string>

#include "mdn/error.hpp"
#include "mdn/geometry.hpp"
#include "mdn/types.hpp"

namespace mdn {

// Right-handed camera frame: x right, y down, looking down +z.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
};

inline void validate(const Intrinsics& k) {
  MDN_CHECK(k.fx > 0.0 && k.fy > 0.0 && std::isfinite(k.fx) && std::isfinite(k.fy),
            ErrorCode::kInvalidArgument, "focal lengths must be positive");
  MDN_CHECK(std::isfinite(k.cx) && std::isfinite(k.cy), ErrorCode::kInvalidArgument,
            "principal point must be finite");
  MDN_CHECK(k.width > 0 && k.height > 0, ErrorCode::kInvalidArgument,
            "image size must be positive");
}

/// Rigid world-to-camera transform x_cam = R x + t.
struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
};

inline void validate(const Pose& pose, double tol = 1e-9) {
  const double ortho = (pose.R.transpose() * pose.R - Mat3::Identity()).cwiseAbs().maxCoeff();
  MDN_CHECK(ortho <= tol, ErrorCode::kInvalidArgument, "rotation is not orthonormal");
  MDN_CHECK(std::abs(pose.R.determinant() - 1.0) <= tol, ErrorCode::kInvalidArgument,
            "rotation determinant is not +1");
  MDN_CHECK(pose.t.allFinite(), ErrorCode::kInvalidArgument, "translation must be finite");
}

// Two 3-vectors (orthogonalized into the first two columns of R) and an
// offset of the object along the optical axis.
struct Pose7D {
  std::array<double, 6> rot6{1, 0, 0, 0, 1, 0};
  double tz = 0.0;
};

struct CameraView {
  Intrinsics intrinsics;
  Pose pose;
};

inline constexpr double kAcc2dThresholdPx = 2.0;
inline constexpr double kAdd3dFraction = 0.05;
inline constexpr int kReferenceImageSize = 137;

// ---------------------------------------------------------------------------
// 6D rotation

inline Mat3 rotation_from_6d(std::span<const double, 6> rot6) {
  const Vec3 a1(rot6[0], rot6[1], rot6[2]);
  const Vec3 a2(rot6[3], rot6[4], rot6[5]);
  MDN_CHECK(a1.allFinite() && a2.allFinite(), ErrorCode::kDegenerateRotation,
            "non-finite 6D rotation");
  MDN_CHECK(a1.norm() > 1e-12 && a2.norm() > 1e-12, ErrorCode::kDegenerateRotation,
            "zero vector in 6D rotation");
  MDN_CHECK(a1.cross(a2).norm() > 1e-12, ErrorCode::kDegenerateRotation,
            "parallel vectors in 6D rotation");
  const Vec3 c1 = a1.normalized();
  const Vec3 w = a2 - c1.dot(a2) * c1;
  const Vec3 c2 = w.normalized();
  Mat3 R;
  R.col(0) = c1;
  R.col(1) = c2;
  R.col(2) = c1.cross(c2);
  return R;
}

inline Mat3 rotation_from_6d(const std::array<double, 6>& rot6) {
  return rotation_from_6d(std::span<const double, 6>(rot6));
}

// Pulls dL/dR back through the Gram-Schmidt construction to dL/d(rot6).
inline std::array<double, 6> rotation_from_6d_backward(const std::array<double, 6>& rot6,
                                                       const Mat3& dR) {
  const Vec3 a1(rot6[0], rot6[1], rot6[2]);
  const Vec3 a2(rot6[3], rot6[4], rot6[5]);
  const double n1 = a1.norm();
  const Vec3 c1 = a1 / n1;
  const Vec3 w = a2 - c1.dot(a2) * c1;
  const double n2 = w.norm();
  const Vec3 c2 = w / n2;

  const Vec3 g3 = dR.col(2);
  Vec3 gc1 = dR.col(0) + c2.cross(g3);
  const Vec3 gc2 = dR.col(1) + g3.cross(c1);

  const Vec3 gw = (gc2 - c2 * c2.dot(gc2)) / n2;
  const Vec3 ga2 = gw - c1 * c1.dot(gw);
  gc1 += -a2 * c1.dot(gw) - c1.dot(a2) * gw;
  const Vec3 ga1 = (gc1 - c1 * c1.dot(gc1)) / n1;
  return {ga1.x(), ga1.y(), ga1.z(), ga2.x(), ga2.y(), ga2.z()};
}

inline Pose pose_from_7d(const Pose7D& p) {
  Pose pose;
  pose.R = rotation_from_6d(p.rot6);
  pose.t = Vec3(0.0, 0.0, p.tz);
  return pose;
}

// Encodes a pose whose translation lies on the optical axis.
inline Pose7D pose_to_7d(const Pose& pose) {
  Pose7D p;
  p.rot6 = {pose.R(0, 0), pose.R(1, 0), pose.R(2, 0), pose.R(0, 1), pose.R(1, 1), pose.R(2, 1)};
  p.tz = pose.t.z();
  return p;
}

// ---------------------------------------------------------------------------
// Projection

inline Vec3 world_to_camera(const Pose& pose, const Vec3& p) { return pose.R * p + pose.t; }

inline constexpr double kMinDepth = 1e-9;

inline Vec2 project(const Intrinsics& k, const Vec3& p_cam) {
  MDN_CHECK(p_cam.z() > kMinDepth, ErrorCode::kBehindCamera, "point is behind the camera");
  return {k.fx * p_cam.x() / p_cam.z() + k.cx, k.fy * p_cam.y() / p_cam.z() + k.cy};
}

// Pixel coordinates and d(u,v)/d(world point), or nullopt behind the camera.
struct Projection {
  Vec2 uv;
  Eigen::Matrix<double, 2, 3> jacobian;
};

inline std::optional<Projection> project_with_jacobian(const CameraView& cam, const Vec3& world) {
  const Vec3 pc = world_to_camera(cam.pose, world);
  if (!(pc.z() > kMinDepth)) return std::nullopt;
  const auto& k = cam.intrinsics;
  const double iz = 1.0 / pc.z();
  Projection out;
  out.uv = {k.fx * pc.x() * iz + k.cx, k.fy * pc.y() * iz + k.cy};
  Eigen::Matrix<double, 2, 3> d_cam;
  d_cam << k.fx * iz, 0.0, -k.fx * pc.x() * iz * iz,
           0.0, k.fy * iz, -k.fy * pc.y() * iz * iz;
  out.jacobian = d_cam * cam.pose.R;
  return out;
}

// ---------------------------------------------------------------------------
// Pose loss

/// Mean squared distance between the two transforms applied to each point.
inline double pose_loss(const Pose& pred, const Pose& gt, const PointCloud& points) {
  MDN_CHECK(!points.empty(), ErrorCode::kInvalidArgument, "pose loss needs a non-empty cloud");
  double sum = 0.0;
  for (const auto& p : points.points) {
    sum += (world_to_camera(pred, p) - world_to_camera(gt, p)).squaredNorm();
  }
  return sum / static_cast<double>(points.size());
}

struct PoseLossGrad {
  double loss = 0.0;
  std::array<double, 7> grad{};  // rot6 components, then tz
};

// Loss of a 7D pose against observed camera-frame points, with its gradient.
inline PoseLossGrad pose_loss_and_grad(const Pose7D& params, const PointCloud& canonical,
                                       const PointCloud& observed) {
  MDN_CHECK(!canonical.empty() && canonical.size() == observed.size(),
            ErrorCode::kInvalidArgument, "pose fitting needs equally sized non-empty clouds");
  const Pose pose = pose_from_7d(params);
  const double inv_n = 1.0 / static_cast<double>(canonical.size());
  PoseLossGrad out;
  Mat3 dR = Mat3::Zero();
  double dtz = 0.0;
  for (std::size_t i = 0; i < canonical.size(); ++i) {
    const Vec3& p = canonical.points[i];
    const Vec3 r = world_to_camera(pose, p) - observed.points[i];
    out.loss += r.squaredNorm();
    dR += 2.0 * r * p.transpose();
    dtz += 2.0 * r.z();
  }
  out.loss *= inv_n;
  dR *= inv_n;
  dtz *= inv_n;
  const auto g6 = rotation_from_6d_backward(params.rot6, dR);
  for (int k = 0; k < 6; ++k) out.grad[k] = g6[k];
  out.grad[6] = dtz;
  return out;
}

inline PointCloud transform_cloud(const Pose& pose, const PointCloud& cloud) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(world_to_camera(pose, p));
  if (cloud.has_normals()) {
    for (const auto& n : cloud.normals) out.normals.push_back(pose.R * n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pose fitting

struct PoseFitResult {
  Pose7D params;
  double loss = 0.0;
  double initial_loss = 0.0;
  bool ill_conditioned = false;
};

// True when the cloud spans less than a plane's worth of directions.
inline bool is_collinear(const PointCloud& cloud, double rel_tol = 1e-9) {
  if (cloud.size() < 3) return true;
  Vec3 mean = Vec3::Zero();
  for (const auto& p : cloud.points) mean += p;
  mean /= static_cast<double>(cloud.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : cloud.points) cov += (p - mean) * (p - mean).transpose();
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  const auto ev = eig.eigenvalues();  // ascending
  return ev(1) <= rel_tol * std::max(ev(2), 1e-300);
}

/// Fixed-step gradient descent on the 7D pose; returns the best iterate seen.
/// Both clouds are divided by the RMS radius of the canonical cloud first, so
/// the step size does not depend on the object's scale.
inline PoseFitResult fit_pose(const PointCloud& canonical, const PointCloud& observed,
                              const Pose7D& init, int steps = 500, double lr = 0.5) {
  MDN_CHECK(canonical.size() >= 3 && canonical.size() == observed.size(),
            ErrorCode::kInvalidArgument, "pose fitting needs >= 3 matched points");
  MDN_CHECK(steps >= 0 && lr >= 0.0, ErrorCode::kInvalidArgument, "invalid fit schedule");
  PoseFitResult result;
  result.ill_conditioned = is_collinear(canonical);
  if (result.ill_conditioned) {
    std::fprintf(stderr, "warning: fit_pose: canonical points are collinear; "
                         "rotation about their axis is unobservable\n");
  }

  double rms = 0.0;
  for (const auto& p : canonical.points) rms += p.squaredNorm();
  rms = std::sqrt(rms / static_cast<double>(canonical.size()));
  const double s = rms > 0.0 ? rms : 1.0;
  PointCloud c, o;
  for (const auto& p : canonical.points) c.points.push_back(p / s);
  for (const auto& p : observed.points) o.points.push_back(p / s);

  Pose7D current = init;
  current.tz /= s;
  auto eval = pose_loss_and_grad(current, c, o);
  Pose7D best = current;
  double best_loss = eval.loss;
  for (int step = 0; step < steps && eval.loss > 0.0; ++step) {
    Pose7D next = current;
    for (int k = 0; k < 6; ++k) next.rot6[k] -= lr * eval.grad[k];
    next.tz -= lr * eval.grad[6];
    PoseLossGrad next_eval;
    try {
      next_eval = pose_loss_and_grad(next, c, o);
    } catch (const Error&) {
      break;  // step landed on a degenerate 6D vector
    }
    if (!std::isfinite(next_eval.loss)) break;
    current = next;
    eval = next_eval;
    if (eval.loss < best_loss) {
      best_loss = eval.loss;
      best = current;
    }
  }
  best.tz *= s;
  result.params = best;
  result.initial_loss = pose_loss_and_grad(init, canonical, observed).loss;
  result.loss = std::min(pose_loss_and_grad(best, canonical, observed).loss, result.initial_loss);
  if (result.loss == result.initial_loss) result.params = init;
  return result;
}

// ---------------------------------------------------------------------------
// Pose metrics

struct PoseMetrics {
  double d2d = 0.0;
  bool d2d_available = true;
  double d3d = 0.0;
  bool acc2d_hit = false;
  bool add3d_hit = false;
  double diameter = 0.0;
};

// Diameter of the sphere centered on the bounding-box center that encloses
// every point.
inline double bounding_sphere_diameter(const PointCloud& cloud) {
  const auto [lo, hi] = bounding_box(cloud.points);
  const Vec3 c = 0.5 * (lo + hi);
  double r = 0.0;
  for (const auto& p : cloud.points) r = std::max(r, (p - c).norm());
  return 2.0 * r;
}

inline PoseMetrics pose_metrics(const Pose& pred, const Pose& gt, const Intrinsics& k,
                                const PointCloud& points) {
  MDN_CHECK(!points.empty(), ErrorCode::kInvalidArgument, "pose metrics need a non-empty cloud");
  validate(k);
  PoseMetrics m;
  m.diameter = bounding_sphere_diameter(points);
  double sum3 = 0.0, sum2 = 0.0;
  for (const auto& p : points.points) {
    const Vec3 a = world_to_camera(pred, p);
    const Vec3 b = world_to_camera(gt, p);
    sum3 += (a - b).norm();
    if (m.d2d_available) {
      if (a.z() > kMinDepth && b.z() > kMinDepth) {
        sum2 += (project(k, a) - project(k, b)).norm();
      } else {
        m.d2d_available = false;
      }
    }
  }
  const double n = static_cast<double>(points.size());
  m.d3d = sum3 / n;
  m.add3d_hit = m.d3d < kAdd3dFraction * m.diameter;
  if (m.d2d_available) {
    m.d2d = sum2 / n;
    m.acc2d_hit = m.d2d < kAcc2dThresholdPx;
  } else {
    m.d2d = std::nan("");
  }
  return m;
}

}  // namespace mdn
