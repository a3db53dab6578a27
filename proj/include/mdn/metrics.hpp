#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mdn/error.hpp"
#include "mdn/geometry.hpp"
#include "mdn/losses.hpp"
#include "mdn/parallel.hpp"

namespace mdn {

inline constexpr std::size_t kChamferMetricSamples = 2048;
inline constexpr double kFScoreTau = 1e-4;
inline constexpr std::size_t kIoUSamples = 100000;

/// CD between `n` surface samples of each mesh, drawn with the same seed.
inline double chamfer_metric(const TriangleMesh& pred, const PointCloud& gt,
                             std::size_t n = kChamferMetricSamples, std::uint64_t seed = 0) {
  return chamfer(sample_surface(pred, n, seed), gt);
}

inline double chamfer_metric(const TriangleMesh& pred, const TriangleMesh& gt,
                             std::size_t n = kChamferMetricSamples, std::uint64_t seed = 0) {
  return chamfer(sample_surface(pred, n, seed), sample_surface(gt, n, seed));
}

struct FScore {
  double precision = 0.0;  // percent
  double recall = 0.0;     // percent
  double fscore = 0.0;     // percent
};

/// Precision/recall over squared nearest-neighbor distances below tau.
inline FScore fscore_detail(const PointCloud& pred, const PointCloud& gt, double tau) {
  MDN_CHECK(!pred.empty() && !gt.empty(), ErrorCode::kInvalidArgument, "F-score needs non-empty clouds");
  MDN_CHECK(tau > 0.0, ErrorCode::kInvalidArgument, "F-score threshold must be positive");
  const Mat P = cloud_matrix(pred.points);
  const Mat G = cloud_matrix(gt.points);
  const auto pg = nearest_neighbors(P, G);
  const auto gp = nearest_neighbors(G, P);
  std::size_t hit_p = 0, hit_g = 0;
  for (double d : pg.sq_dist) hit_p += d < tau;
  for (double d : gp.sq_dist) hit_g += d < tau;
  FScore f;
  f.precision = 100.0 * static_cast<double>(hit_p) / static_cast<double>(pred.size());
  f.recall = 100.0 * static_cast<double>(hit_g) / static_cast<double>(gt.size());
  const double s = f.precision + f.recall;
  f.fscore = s > 0.0 ? 2.0 * f.precision * f.recall / s : 0.0;
  return f;
}

inline double fscore(const PointCloud& pred, const PointCloud& gt, double tau = kFScoreTau) {
  return fscore_detail(pred, gt, tau).fscore;
}

// ---------------------------------------------------------------------------
// Volumetric IoU

namespace detail {

enum class RayHit { kMiss, kHit, kAmbiguous };

// Moller-Trumbore restricted to t > 0. Hits too close to the origin or to a
// triangle edge are reported as ambiguous so the caller can resample.
inline RayHit ray_triangle(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 pvec = d.cross(e2);
  const double det = e1.dot(pvec);
  if (std::abs(det) < 1e-14) return RayHit::kMiss;  // parallel to the plane
  const double inv = 1.0 / det;
  const Vec3 tvec = o - a;
  const double u = tvec.dot(pvec) * inv;
  if (u < -1e-12 || u > 1.0 + 1e-12) return RayHit::kMiss;
  const Vec3 qvec = tvec.cross(e1);
  const double v = d.dot(qvec) * inv;
  if (v < -1e-12 || u + v > 1.0 + 1e-12) return RayHit::kMiss;
  const double t = e2.dot(qvec) * inv;
  if (std::abs(t) < 1e-9) return RayHit::kAmbiguous;
  if (t < 0.0) return RayHit::kMiss;
  if (u < 1e-12 || v < 1e-12 || u + v > 1.0 - 1e-12) return RayHit::kAmbiguous;
  return RayHit::kHit;
}

// Parity of crossings along direction d; nullopt when the test is ambiguous.
inline std::optional<bool> inside_by_parity(const TriangleMesh& mesh, const Vec3& p, const Vec3& d) {
  int crossings = 0;
  for (const auto& f : mesh.faces) {
    switch (ray_triangle(p, d, mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]])) {
      case RayHit::kHit: ++crossings; break;
      case RayHit::kAmbiguous: return std::nullopt;
      case RayHit::kMiss: break;
    }
  }
  return (crossings % 2) == 1;
}

inline void require_watertight(const TriangleMesh& mesh, const std::string& name) {
  const auto open = open_edges(mesh);
  if (open.empty()) return;
  std::string list;
  for (std::size_t i = 0; i < open.size() && i < 10; ++i) {
    list += (i ? ", " : "") + std::string("(") + std::to_string(open[i].first) + "," +
            std::to_string(open[i].second) + ")";
  }
  if (open.size() > 10) list += ", ...";
  throw Error(ErrorCode::kPrecondition, name + " mesh is not watertight: " + std::to_string(open.size()) +
                                            " open edge(s) " + list);
}

inline Vec3 random_direction(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec3 d;
  do {
    d = Vec3(g(rng), g(rng), g(rng));
  } while (d.norm() < 1e-6);
  return d.normalized();
}

}  // namespace detail

/// Ray-parity containment test along a direction drawn from `seed`.
inline bool point_inside(const TriangleMesh& mesh, const Vec3& p, std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  for (int attempt = 0; attempt < 16; ++attempt) {
    if (auto r = detail::inside_by_parity(mesh, p, detail::random_direction(rng))) return *r;
  }
  throw Error(ErrorCode::kDegenerateEstimate, "containment test stayed ambiguous");
}

/// Monte-Carlo IoU of the solids bounded by two watertight meshes.
inline double volumetric_iou(const TriangleMesh& pred, const TriangleMesh& gt,
                             std::size_t n = kIoUSamples, std::uint64_t seed = 0) {
  validate_mesh(pred);
  validate_mesh(gt);
  detail::require_watertight(pred, "predicted");
  detail::require_watertight(gt, "ground-truth");
  MDN_CHECK(n > 0, ErrorCode::kInvalidArgument, "IoU sample count must be positive");

  auto [lo_a, hi_a] = bounding_box(pred.vertices);
  auto [lo_b, hi_b] = bounding_box(gt.vertices);
  Vec3 lo = lo_a.cwiseMin(lo_b);
  Vec3 hi = hi_a.cwiseMax(hi_b);
  const Vec3 pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;

  std::mt19937_64 rng(seed);
  const Vec3 dir = detail::random_direction(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t both = 0, either = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (int attempt = 0;; ++attempt) {
      MDN_CHECK(attempt < 1000, ErrorCode::kDegenerateEstimate, "could not place an unambiguous sample");
      const Vec3 p(lo.x() + unit(rng) * (hi.x() - lo.x()), lo.y() + unit(rng) * (hi.y() - lo.y()),
                   lo.z() + unit(rng) * (hi.z() - lo.z()));
      const auto in_a = detail::inside_by_parity(pred, p, dir);
      if (!in_a) continue;
      const auto in_b = detail::inside_by_parity(gt, p, dir);
      if (!in_b) continue;
      both += (*in_a && *in_b);
      either += (*in_a || *in_b);
      break;
    }
  }
  MDN_CHECK(either > 0, ErrorCode::kDegenerateEstimate, "no sample fell inside either mesh");
  return static_cast<double>(both) / static_cast<double>(either);
}

// ---------------------------------------------------------------------------
// Report

struct EvalOptions {
  std::size_t samples = kChamferMetricSamples;
  double tau = kFScoreTau;
  bool iou = false;
  std::size_t iou_samples = kIoUSamples;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::string id;
  double cd = 0.0;
  double fscore_tau = 0.0;
  double fscore_2tau = 0.0;
  std::optional<double> iou;
  std::size_t samples = 0;
  std::size_t iou_samples = 0;
  std::uint64_t seed = 0;
};

inline EvalReport evaluate(const TriangleMesh& pred, const TriangleMesh& gt, const EvalOptions& opt,
                           std::string id = {}) {
  EvalReport r;
  r.id = std::move(id);
  r.samples = opt.samples;
  r.seed = opt.seed;
  const PointCloud p = sample_surface(pred, opt.samples, opt.seed);
  const PointCloud g = sample_surface(gt, opt.samples, opt.seed);
  r.cd = chamfer(p, g);
  r.fscore_tau = fscore(p, g, opt.tau);
  r.fscore_2tau = fscore(p, g, 2.0 * opt.tau);
  if (opt.iou) {
    r.iou = volumetric_iou(pred, gt, opt.iou_samples, opt.seed);
    r.iou_samples = opt.iou_samples;
  }
  return r;
}

}  // namespace mdn
