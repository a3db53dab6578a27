#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mdn/autodiff.hpp"
#include "mdn/camera.hpp"
#include "mdn/features.hpp"
#include "mdn/geometry.hpp"
#include "mdn/graphnet.hpp"
#include "mdn/losses.hpp"
#include "mdn/pipeline.hpp"
#include "mdn/render.hpp"

namespace mdn {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-8;
  double tolerance = 1e-4;
  std::string corrupt_op;  // operation whose adjoint gets scaled, for negative controls
};

struct GradcheckRow {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  bool pass = false;
};

/// ||a - n||_inf / max(||a||_inf, ||n||_inf, 1e-12).
inline double relative_error(const Mat& analytic, const Mat& numeric) {
  const double scale = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-12});
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

namespace ad {

/// sum(y .* w) for a constant weight matrix w.
inline Var contract(const Var& y, const Mat& w) {
  MDN_CHECK(y.rows() == w.rows() && y.cols() == w.cols(), ErrorCode::kInvalidArgument,
            "contract: shape mismatch");
  Mat out(1, 1);
  out(0, 0) = y.value().cwiseProduct(w).sum();
  auto wp = std::make_shared<const Mat>(w);
  return y.tape()->record(std::move(out), {y}, [y, wp](Tape& t, const Mat& g) {
    t.accumulate(y, g(0, 0) * *wp);
  });
}

/// Identity in the forward pass; the adjoint is deliberately scaled.
inline Var corrupt_adjoint(const Var& x, double factor = 1.5) {
  return x.tape()->record(x.value(), {x}, [x, factor](Tape& t, const Mat& g) {
    t.accumulate(x, factor * g);
  });
}

}  // namespace ad

using ScalarFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

/// Compares tape gradients of fn against central differences for every
/// entry of every input. Returns max |a - n| / max(|a|, |n|) over all entries.
inline double gradcheck(const ScalarFn& fn, const std::vector<Mat>& inputs, double step, bool corrupt,
                        std::size_t* entries = nullptr) {
  std::vector<Mat> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& m : inputs) vars.push_back(tape.parameter(m));
    ad::Var loss = fn(tape, vars);
    if (corrupt) loss = ad::corrupt_adjoint(loss);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }
  auto eval = [&](const std::vector<Mat>& x) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& m : x) vars.push_back(tape.constant(m));
    return fn(tape, vars).value()(0, 0);
  };
  // Error is measured over all inputs jointly, so tensors whose gradient is
  // identically zero are compared against the overall gradient scale.
  double diff = 0.0, scale = 1e-12;
  std::vector<Mat> x = inputs;
  std::size_t count = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    Mat numeric(x[k].rows(), x[k].cols());
    for (Eigen::Index i = 0; i < x[k].size(); ++i) {
      const double orig = x[k].data()[i];
      x[k].data()[i] = orig + step;
      const double fp = eval(x);
      x[k].data()[i] = orig - step;
      const double fm = eval(x);
      x[k].data()[i] = orig;
      numeric.data()[i] = (fp - fm) / (2.0 * step);
    }
    count += static_cast<std::size_t>(x[k].size());
    diff = std::max(diff, (analytic[k] - numeric).cwiseAbs().maxCoeff());
    scale = std::max({scale, analytic[k].cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff()});
  }
  const double worst = diff / scale;
  if (entries) *entries = count;
  return worst;
}

namespace detail {

inline Mat random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// Smooth random multi-level feature stacks viewing the origin.
inline std::vector<FeatureStack> random_views(int n, std::mt19937_64& rng, const std::vector<int>& channels) {
  Intrinsics k;
  k.width = k.height = 24;
  k.fx = k.fy = 30.0;
  k.cx = k.cy = 11.5;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<FeatureStack> views;
  for (int v = 0; v < n; ++v) {
    FeatureStack s;
    s.camera = random_camera(k, 2.5, rng);
    int stride = 1;
    for (int c : channels) {
      const int H = (k.height - 1) / stride + 1;
      const int W = (k.width - 1) / stride + 1;
      FeatureMap m(H, W, c, static_cast<float>(stride));
      for (auto& x : m.data) x = static_cast<float>(u(rng));
      s.levels.push_back(std::move(m));
      stride *= 2;
    }
    views.push_back(std::move(s));
  }
  return views;
}

inline std::shared_ptr<const SparseAdjacency> random_graph(int n, std::mt19937_64& rng) {
  std::vector<Edge> edges;
  for (int i = 0; i < n; ++i) edges.emplace_back(i, (i + 1) % n);
  std::uniform_int_distribution<int> pick(0, n - 1);
  for (int i = 0; i < n; ++i) edges.emplace_back(pick(rng), pick(rng));
  return std::make_shared<const SparseAdjacency>(n, edges);
}

inline GraphConvLayer random_conv(int in, int out, std::mt19937_64& rng) {
  return {random_matrix(in, out, rng, 0.5), random_matrix(in, out, rng, 0.5), random_matrix(1, out, rng, 0.5)};
}

inline TriangleMesh toy_mesh(std::mt19937_64& rng, double radius = 0.3) {
  TriangleMesh m = triangulated_dodecahedron();
  std::normal_distribution<double> g(0.0, 0.02);
  for (auto& v : m.vertices) v = radius * v + Vec3(g(rng), g(rng), g(rng));
  return m;
}

inline PointCloud toy_cloud(std::size_t n, std::uint64_t seed) {
  TriangleMesh sphere = icosphere(2);
  for (auto& v : sphere.vertices) v *= 0.3;
  return sample_surface(sphere, n, seed);
}

}  // namespace detail

/// Gradient check of every differentiable operation on seeded 20-vertex
/// instances.
inline std::vector<GradcheckRow> run_gradchecks(const GradcheckOptions& opt) {
  std::vector<GradcheckRow> rows;
  std::mt19937_64 rng(opt.seed);
  const int n = 20;

  auto add = [&](const std::string& name, const ScalarFn& fn, const std::vector<Mat>& inputs) {
    GradcheckRow row;
    row.op = name;
    row.max_rel_error = gradcheck(fn, inputs, opt.step, opt.corrupt_op == name, &row.entries);
    row.pass = row.max_rel_error < opt.tolerance;
    rows.push_back(row);
  };

  {
    auto views = std::make_shared<std::vector<FeatureStack>>(detail::random_views(3, rng, {3, 2}));
    const Mat points = detail::random_matrix(n, 3, rng, 0.3);
    const Mat w = detail::random_matrix(n, pooled_dimension(5), rng);
    add("pooling", [views, w](ad::Tape&, const std::vector<ad::Var>& x) {
      return ad::contract(pool_features(*views, x[0]), w);
    }, {points});
  }
  {
    auto adj = detail::random_graph(n, rng);
    const GraphConvLayer layer = detail::random_conv(5, 4, rng);
    const Mat w = detail::random_matrix(n, 4, rng);
    add("graph_conv", [adj, w](ad::Tape&, const std::vector<ad::Var>& x) {
      return ad::contract(graph_conv(x[0], adj, {x[1], x[2], x[3]}), w);
    }, {detail::random_matrix(n, 5, rng), layer.w_self, layer.w_neigh, layer.bias});
  }
  {
    auto adj = detail::random_graph(n, rng);
    const GraphConvLayer c1 = detail::random_conv(4, 4, rng);
    const GraphConvLayer c2 = detail::random_conv(4, 4, rng);
    const Mat w = detail::random_matrix(n, 4, rng);
    add("residual_block", [adj, w](ad::Tape&, const std::vector<ad::Var>& x) {
      ResidualBlockT<ad::Var> b{{x[1], x[2], x[3]}, {x[4], x[5], x[6]}};
      return ad::contract(graph_residual_block(x[0], adj, b), w);
    }, {detail::random_matrix(n, 4, rng), c1.w_self, c1.w_neigh, c1.bias, c2.w_self, c2.w_neigh, c2.bias});
  }
  {
    const Mat w = detail::random_matrix(n, 3, rng);
    add("soft_argmax", [w](ad::Tape&, const std::vector<ad::Var>& x) {
      return ad::contract(soft_argmax_groups(x[0], x[1], kHypothesisNodes), w);
    }, {detail::random_matrix(n * kHypothesisNodes, 1, rng), detail::random_matrix(n * kHypothesisNodes, 3, rng)});
  }

  const TriangleMesh mesh = detail::toy_mesh(rng);
  auto topo = std::make_shared<const MeshTopology>(mesh);
  auto gt = std::make_shared<const PointCloud>(detail::toy_cloud(64, opt.seed + 1));
  const Mat gt_m = cloud_matrix(gt->points);
  const Mat verts = vertex_matrix(mesh);

  add("chamfer", [gt_m](ad::Tape& t, const std::vector<ad::Var>& x) {
    return chamfer(x[0], t.constant(gt_m));
  }, {verts});
  add("resampled_chamfer", [topo, gt_m, seed = opt.seed](ad::Tape& t, const std::vector<ad::Var>& x) {
    return resampled_chamfer(x[0], *topo, t.constant(gt_m), 50, seed);
  }, {verts});
  add("normal_loss", [topo, gt](ad::Tape&, const std::vector<ad::Var>& x) {
    return normal_loss(x[0], *topo, *gt);
  }, {verts});
  add("edge_loss", [topo](ad::Tape&, const std::vector<ad::Var>& x) { return edge_loss(x[0], *topo); }, {verts});
  {
    const Mat before = verts + detail::random_matrix(verts.rows(), 3, rng, 0.01);
    add("laplacian_loss", [topo](ad::Tape&, const std::vector<ad::Var>& x) {
      return laplacian_loss(x[0], x[1], *topo);
    }, {before, verts});
  }

  {
    // Pose loss over the 7 pose parameters; the analytic gradient is hand-derived.
    GradcheckRow row;
    row.op = "pose_loss";
    const PointCloud canonical = detail::toy_cloud(n, opt.seed + 2);
    Pose7D gt_pose;
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& r : gt_pose.rot6) r = g(rng);
    gt_pose.tz = 2.0 + g(rng);
    const PointCloud observed = transform_cloud(pose_from_7d(gt_pose), canonical);
    Pose7D p;
    for (auto& r : p.rot6) r = g(rng);
    p.tz = g(rng);
    const PoseLossGrad a = pose_loss_and_grad(p, canonical, observed);
    Mat analytic(1, 7), numeric(1, 7);
    for (int i = 0; i < 7; ++i) analytic(0, i) = a.grad[i];
    if (opt.corrupt_op == row.op) analytic *= 1.5;
    auto loss = [&](const Pose7D& q) { return pose_loss_and_grad(q, canonical, observed).loss; };
    for (int i = 0; i < 7; ++i) {
      Pose7D hi = p, lo = p;
      double& vh = i < 6 ? hi.rot6[i] : hi.tz;
      double& vl = i < 6 ? lo.rot6[i] : lo.tz;
      vh += opt.step;
      vl -= opt.step;
      numeric(0, i) = (loss(hi) - loss(lo)) / (2.0 * opt.step);
    }
    row.max_rel_error = relative_error(analytic, numeric);
    row.entries = 7;
    row.pass = row.max_rel_error < opt.tolerance;
    rows.push_back(row);
  }

  {
    // Two refinement passes plus the full objective, differentiated with
    // respect to every network parameter.
    const std::vector<int> channels{2, 2};
    auto views = std::make_shared<std::vector<FeatureStack>>(detail::random_views(3, rng, channels));
    MDNConfig cfg;
    cfg.feature_channels = 4;
    cfg.hidden = 6;
    cfg.scale = 0.05;
    MDNModel model = init_model(cfg, opt.seed + 3);
    // Jitter moves zero biases off ReLU kinks; larger head weights keep the
    // softmax away from uniform.
    std::vector<Mat> params;
    for_each_tensor(model.scoring, [&](const Mat& t) {
      params.push_back(t + detail::random_matrix(t.rows(), t.cols(), rng, 0.1));
    });
    params[params.size() - 2] *= 20.0;
    auto mesh_ptr = std::make_shared<const TriangleMesh>(mesh);
    add("mdn_end_to_end", [views, topo, gt, gt_m, mesh_ptr, cfg, seed = opt.seed](ad::Tape& t, const std::vector<ad::Var>& x) {
      ScoringNetworkT<ad::Var> net;
      std::size_t k = 0;
      for_each_tensor(net, [&](ad::Var& v) { v = x[k++]; });
      ad::Var v = t.constant(vertex_matrix(*mesh_ptr));
      const ad::Var g = t.constant(gt_m);
      LossOptions lo;
      lo.extra_samples = 30;
      ad::Var total;
      for (int it = 0; it < 2; ++it) {
        const ad::Var next = mdn_step(net, v, *views, cfg.scale);
        const ad::Var l = total_loss(next, v, *topo, *gt, g, lo, seed + it).total;
        total = it == 0 ? l : ad::add(total, l);
        v = next;
      }
      return total;
    }, params);
  }
  if (!opt.corrupt_op.empty()) {
    const bool known = std::any_of(rows.begin(), rows.end(), [&](const auto& r) { return r.op == opt.corrupt_op; });
    MDN_CHECK(known, ErrorCode::kInvalidArgument, "unknown operation for --corrupt-op: " + opt.corrupt_op);
  }
  return rows;
}

}  // namespace mdn
