#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mdn/autodiff.hpp"
#include "mdn/camera.hpp"
#include "mdn/error.hpp"
#include "mdn/parallel.hpp"
#include "mdn/types.hpp"

namespace mdn {

/// One feature grid (H x W x C, row-major, channels fastest). A cell (x, y)
/// sits at image pixel (stride * x, stride * y).
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  float stride = 1.0f;
  std::vector<float> data;

  FeatureMap() = default;
  FeatureMap(int h, int w, int c, float s)
      : height(h), width(w), channels(c), stride(s),
        data(static_cast<std::size_t>(h) * w * c, 0.0f) {}

  float& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

inline void validate(const FeatureMap& m) {
  MDN_CHECK(m.height > 0 && m.width > 0 && m.channels > 0, ErrorCode::kInvalidArgument,
            "feature map dimensions must be positive");
  MDN_CHECK(m.stride > 0.0f && std::isfinite(m.stride), ErrorCode::kInvalidArgument,
            "feature map stride must be positive");
  MDN_CHECK(m.data.size() == static_cast<std::size_t>(m.height) * m.width * m.channels,
            ErrorCode::kInvalidArgument, "feature map data length != H*W*C");
}

struct FeatureStack {
  std::vector<FeatureMap> levels;
  CameraView camera;

  int total_channels() const {
    int f = 0;
    for (const auto& l : levels) f += l.channels;
    return f;
  }
};

struct PooledFeature {
  Vec values;  // mean | max | std | x y z
};

inline int pooled_dimension(int feature_channels) { return 3 * feature_channels + 3; }

// ---------------------------------------------------------------------------
// Bilinear sampling

namespace detail {

// Writes C values and, when du/dv are non-null, their derivatives with
// respect to the pixel coordinates. Returns false (outputs zeroed) outside
// the grid.
inline bool bilinear(const FeatureMap& m, double u, double v, double* out, double* du,
                     double* dv) {
  const int C = m.channels;
  std::fill(out, out + C, 0.0);
  if (du) std::fill(du, du + C, 0.0);
  if (dv) std::fill(dv, dv + C, 0.0);
  const double s = m.stride;
  const double x = u / s;
  const double y = v / s;
  if (!(x >= 0.0 && y >= 0.0 && x <= m.width - 1 && y <= m.height - 1)) return false;
  const int x0 = m.width >= 2 ? std::min(static_cast<int>(std::floor(x)), m.width - 2) : 0;
  const int y0 = m.height >= 2 ? std::min(static_cast<int>(std::floor(y)), m.height - 2) : 0;
  const int x1 = m.width >= 2 ? x0 + 1 : x0;
  const int y1 = m.height >= 2 ? y0 + 1 : y0;
  const double ax = x - x0;
  const double ay = y - y0;
  const float* c00 = &m.data[(static_cast<std::size_t>(y0) * m.width + x0) * C];
  const float* c10 = &m.data[(static_cast<std::size_t>(y0) * m.width + x1) * C];
  const float* c01 = &m.data[(static_cast<std::size_t>(y1) * m.width + x0) * C];
  const float* c11 = &m.data[(static_cast<std::size_t>(y1) * m.width + x1) * C];
  for (int c = 0; c < C; ++c) {
    const double a = c00[c], b = c10[c], d = c01[c], e = c11[c];
    out[c] = (1 - ax) * (1 - ay) * a + ax * (1 - ay) * b + (1 - ax) * ay * d + ax * ay * e;
    if (du) du[c] = ((1 - ay) * (b - a) + ay * (e - d)) / s;
    if (dv) dv[c] = ((1 - ax) * (d - a) + ax * (e - b)) / s;
  }
  return true;
}

}  // namespace detail

/// Bilinear lookup at image pixel (u, v); the zero vector outside the grid.
inline Vec bilinear_sample(const FeatureMap& fmap, double u, double v) {
  Vec out(fmap.channels);
  detail::bilinear(fmap, u, v, out.data(), nullptr, nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Per-view pooling

namespace detail {

// f: F values; jac (optional): F x 3 row-major d f / d point.
inline void pool_view_into(const FeatureStack& stack, const Vec3& point, double* f, double* jac) {
  const int F = stack.total_channels();
  std::fill(f, f + F, 0.0);
  if (jac) std::fill(jac, jac + 3 * F, 0.0);
  const auto proj = project_with_jacobian(stack.camera, point);
  if (!proj) return;
  thread_local std::vector<double> du, dv;
  int offset = 0;
  for (const auto& level : stack.levels) {
    const int C = level.channels;
    if (jac) {
      du.resize(C);
      dv.resize(C);
      if (bilinear(level, proj->uv.x(), proj->uv.y(), f + offset, du.data(), dv.data())) {
        for (int c = 0; c < C; ++c) {
          for (int k = 0; k < 3; ++k) {
            jac[(offset + c) * 3 + k] = du[c] * proj->jacobian(0, k) + dv[c] * proj->jacobian(1, k);
          }
        }
      }
    } else {
      bilinear(level, proj->uv.x(), proj->uv.y(), f + offset, nullptr, nullptr);
    }
    offset += C;
  }
}

inline int common_channels(std::span<const FeatureStack> views) {
  MDN_CHECK(!views.empty(), ErrorCode::kInvalidArgument, "pooling needs at least one view");
  const int F = views[0].total_channels();
  for (std::size_t i = 1; i < views.size(); ++i) {
    MDN_CHECK(views[i].total_channels() == F, ErrorCode::kInvalidArgument,
              "views disagree on feature dimension: " + std::to_string(F) + " vs " +
                  std::to_string(views[i].total_channels()));
  }
  return F;
}

// Pools one point across views into `out` (3F+3 values). When `jac` is
// non-null it receives the (3F+3) x 3 Jacobian with respect to the point.
// Per-channel statistics are accumulated over sorted values, so the result is
// bitwise independent of view order.
inline void pool_point(std::span<const FeatureStack> views, int F, const Vec3& point, double* out,
                       double* jac) {
  const std::size_t n = views.size();
  thread_local std::vector<double> f, J;
  thread_local std::vector<std::pair<double, int>> column;
  f.assign(n * F, 0.0);
  if (jac) J.assign(n * F * 3, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    pool_view_into(views[i], point, &f[i * F], jac ? &J[i * F * 3] : nullptr);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  column.resize(n);
  for (int c = 0; c < F; ++c) {
    for (std::size_t i = 0; i < n; ++i) column[i] = {f[i * F + c], static_cast<int>(i)};
    std::sort(column.begin(), column.end());
    double total = 0.0;
    for (const auto& [val, idx] : column) total += val;
    const double mean = total * inv_n;
    const double max = column.back().first;
    double sq = 0.0;
    for (const auto& [val, idx] : column) sq += (val - mean) * (val - mean);
    const double sd = std::sqrt(sq * inv_n);
    out[c] = mean;
    out[F + c] = max;
    out[2 * F + c] = sd;
    if (!jac) continue;
    // Lowest view index among the maxima.
    int arg = n;
    for (const auto& [val, idx] : column) {
      if (val == max) arg = std::min(arg, idx);
    }
    for (int k = 0; k < 3; ++k) {
      double gm = 0.0, gs = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = J[(i * F + c) * 3 + k];
        gm += d;
        gs += (f[i * F + c] - mean) * d;
      }
      jac[c * 3 + k] = gm * inv_n;
      jac[(F + c) * 3 + k] = J[(arg * F + c) * 3 + k];
      jac[(2 * F + c) * 3 + k] = sd > 0.0 ? gs * inv_n / sd : 0.0;
    }
  }
  for (int k = 0; k < 3; ++k) out[3 * F + k] = point[k];
  if (jac) {
    for (int r = 0; r < 3; ++r) {
      for (int k = 0; k < 3; ++k) jac[(3 * F + r) * 3 + k] = r == k ? 1.0 : 0.0;
    }
  }
}

}  // namespace detail

/// Feature vector of one view at a world point: every level sampled at the
/// point's projection, concatenated in level order. Zero behind the camera.
inline Vec pool_view(const FeatureStack& stack, const Vec3& point) {
  Vec f(stack.total_channels());
  detail::pool_view_into(stack, point, f.data(), nullptr);
  return f;
}

/// [mean | max | std | xyz] over views, length 3F+3.
inline PooledFeature cross_view_pool(std::span<const FeatureStack> views, const Vec3& point) {
  const int F = detail::common_channels(views);
  PooledFeature out;
  out.values.resize(pooled_dimension(F));
  detail::pool_point(views, F, point, out.values.data(), nullptr);
  return out;
}

/// Pools every row of `points` (N x 3). Differentiable with respect to the
/// point positions.
inline ad::Var pool_features(std::span<const FeatureStack> views, const ad::Var& points) {
  MDN_CHECK(points.cols() == 3, ErrorCode::kInvalidArgument, "pool_features expects N x 3 points");
  const int F = detail::common_channels(views);
  const int D = pooled_dimension(F);
  const Eigen::Index N = points.rows();
  Mat out(N, D);
  const bool want_grad = points.requires_grad();
  auto jac = std::make_shared<std::vector<double>>(want_grad ? static_cast<std::size_t>(N) * D * 3 : 0);
  const Mat& P = points.value();
  parallel_for(0, static_cast<std::size_t>(N), [&](std::size_t r) {
    const Vec3 p = P.row(r).transpose();
    detail::pool_point(views, F, p, out.row(r).data(), want_grad ? &(*jac)[r * D * 3] : nullptr);
  });
  return points.tape()->record(std::move(out), {points}, [points, jac, D](ad::Tape& t, const Mat& g) {
    t.accumulate_with(points, [&](Mat& gp) {
      const Eigen::Index n = g.rows();
      for (Eigen::Index r = 0; r < n; ++r) {
        const double* J = &(*jac)[static_cast<std::size_t>(r) * D * 3];
        double acc[3] = {0, 0, 0};
        for (int c = 0; c < D; ++c) {
          const double gc = g(r, c);
          if (gc == 0.0) continue;
          acc[0] += gc * J[c * 3 + 0];
          acc[1] += gc * J[c * 3 + 1];
          acc[2] += gc * J[c * 3 + 2];
        }
        gp(r, 0) += acc[0];
        gp(r, 1) += acc[1];
        gp(r, 2) += acc[2];
      }
    });
  });
}

}  // namespace mdn
