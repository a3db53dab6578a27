#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>

#include "mdn/autodiff.hpp"
#include "mdn/error.hpp"
#include "mdn/geometry.hpp"
#include "mdn/types.hpp"

namespace mdn {

// Layer parameter bundles are templated on the tensor type so the same
// layout serves stored weights (Mat) and weights bound to a tape (ad::Var).

template <typename T>
struct GraphConvT {
  T w_self;   // F_in x F_out
  T w_neigh;  // F_in x F_out
  T bias;     // 1 x F_out
};

template <typename T>
struct DenseT {
  T weight;  // F_in x F_out
  T bias;    // 1 x F_out
};

template <typename T>
struct ResidualBlockT {
  GraphConvT<T> conv1;
  GraphConvT<T> conv2;
};

inline constexpr int kResidualBlocks = 6;

template <typename T>
struct ScoringNetworkT {
  GraphConvT<T> input;  // (3F+3) -> hidden, followed by ReLU
  std::array<ResidualBlockT<T>, kResidualBlocks> blocks;
  DenseT<T> head;  // hidden -> 1
};

using GraphConvLayer = GraphConvT<Mat>;
using ResidualBlock = ResidualBlockT<Mat>;
using ScoringNetwork = ScoringNetworkT<Mat>;

// Visits every tensor in a fixed order (the checkpoint and optimizer order).
template <typename Net, typename Fn>
void for_each_tensor(Net& net, Fn&& fn) {
  auto conv = [&](auto& c) {
    fn(c.w_self);
    fn(c.w_neigh);
    fn(c.bias);
  };
  conv(net.input);
  for (auto& b : net.blocks) {
    conv(b.conv1);
    conv(b.conv2);
  }
  fn(net.head.weight);
  fn(net.head.bias);
}

struct MDNConfig {
  int feature_channels = 0;  // F, per-view channels summed over levels
  int hidden = 192;
  double scale = 0.02;  // hypothesis radius

  int input_dim() const { return 3 * feature_channels + 3; }
};

struct MDNModel {
  MDNConfig config;
  ScoringNetwork scoring;
};

inline void validate(const MDNConfig& c) {
  MDN_CHECK(c.feature_channels > 0, ErrorCode::kInvalidArgument, "feature dimension must be positive");
  MDN_CHECK(c.hidden > 0, ErrorCode::kInvalidArgument, "hidden width must be positive");
  MDN_CHECK(c.scale > 0.0 && std::isfinite(c.scale), ErrorCode::kInvalidArgument,
            "hypothesis scale must be positive");
}

namespace detail {

inline Mat xavier_uniform(int fan_in, int fan_out, std::mt19937_64& rng, double gain = 1.0) {
  const double a = gain * std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Mat w(fan_in, fan_out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  return w;
}

// The unnormalized neighbor sum at the hub node adds 42 coherent terms, so the
// neighbor weights start scaled down by the largest degree.
inline GraphConvLayer init_conv(int in, int out, std::mt19937_64& rng) {
  GraphConvLayer c;
  c.w_self = xavier_uniform(in, out, rng);
  c.w_neigh = xavier_uniform(in, out, rng, 1.0 / (kHypothesisNodes - 1));
  c.bias = Mat::Zero(1, out);
  return c;
}

}  // namespace detail

/// Xavier-uniform weights and zero biases, reproducible from `seed`.
inline MDNModel init_model(const MDNConfig& config, std::uint64_t seed) {
  validate(config);
  std::mt19937_64 rng(seed);
  MDNModel m;
  m.config = config;
  const int h = config.hidden;
  m.scoring.input = detail::init_conv(config.input_dim(), h, rng);
  for (auto& b : m.scoring.blocks) {
    b.conv1 = detail::init_conv(h, h, rng);
    b.conv2 = detail::init_conv(h, h, rng);
  }
  m.scoring.head.weight = detail::xavier_uniform(h, 1, rng);
  m.scoring.head.bias = Mat::Zero(1, 1);
  return m;
}

inline std::size_t parameter_count(const MDNModel& model) {
  std::size_t n = 0;
  for_each_tensor(model.scoring, [&](const Mat& t) { n += t.size(); });
  return n;
}

// Registers every weight on the tape. Parameters collect gradients;
// constants make the forward pass cheaper when no gradient is wanted.
inline ScoringNetworkT<ad::Var> bind(ad::Tape& tape, const ScoringNetwork& net, bool trainable) {
  ScoringNetworkT<ad::Var> out;
  std::vector<const Mat*> flat;
  for_each_tensor(net, [&](const Mat& t) { flat.push_back(&t); });
  std::size_t k = 0;
  for_each_tensor(out, [&](ad::Var& v) {
    v = trainable ? tape.parameter(*flat[k]) : tape.constant(*flat[k]);
    ++k;
  });
  return out;
}

inline std::vector<Mat*> parameter_tensors(MDNModel& model) {
  std::vector<Mat*> out;
  for_each_tensor(model.scoring, [&](Mat& t) { out.push_back(&t); });
  return out;
}

// ---------------------------------------------------------------------------
// Graph convolution

/// Row i of the result is the sum of x's rows over i's neighbors.
inline Mat neighbor_sum(const SparseAdjacency& adj, const Mat& x) {
  const Eigen::Index C = x.cols();
  Mat out = Mat::Zero(x.rows(), C);
  for (std::size_t i = 0; i < adj.num_nodes(); ++i) {
    double* dst = out.data() + i * C;
    for (int j : adj.neighbors(i)) {
      const double* src = x.data() + j * C;
      for (Eigen::Index c = 0; c < C; ++c) dst[c] += src[c];
    }
  }
  return out;
}

/// y_i = x_i W_self + (sum_{j in N(i)} x_j) W_neigh + bias.
inline ad::Var graph_conv(const ad::Var& x, std::shared_ptr<const SparseAdjacency> adj,
                          const GraphConvT<ad::Var>& layer) {
  MDN_CHECK(adj && static_cast<Eigen::Index>(adj->num_nodes()) == x.rows(),
            ErrorCode::kInvalidArgument, "graph_conv: adjacency has " +
                std::to_string(adj ? adj->num_nodes() : 0) + " nodes, features have " +
                std::to_string(x.rows()));
  const Mat& ws = layer.w_self.value();
  const Mat& wn = layer.w_neigh.value();
  MDN_CHECK(ws.rows() == x.cols() && wn.rows() == x.cols() && ws.cols() == wn.cols() &&
                layer.bias.rows() == 1 && layer.bias.cols() == ws.cols(),
            ErrorCode::kInvalidArgument, "graph_conv: weight dimensions do not match input width " +
                std::to_string(x.cols()));
  auto ax = std::make_shared<const Mat>(neighbor_sum(*adj, x.value()));
  Mat y = x.value() * ws;
  y.noalias() += *ax * wn;
  y.rowwise() += layer.bias.value().row(0);
  const ad::Var ws_v = layer.w_self, wn_v = layer.w_neigh, b_v = layer.bias;
  return x.tape()->record(std::move(y), {x, ws_v, wn_v, b_v},
                          [x, ws_v, wn_v, b_v, adj, ax](ad::Tape& t, const Mat& g) {
    if (x.requires_grad()) {
      Mat gx = g * ws_v.value().transpose();
      gx += neighbor_sum(*adj, g * wn_v.value().transpose());
      t.accumulate(x, gx);
    }
    if (ws_v.requires_grad()) t.accumulate(ws_v, x.value().transpose() * g);
    if (wn_v.requires_grad()) t.accumulate(wn_v, ax->transpose() * g);
    if (b_v.requires_grad()) t.accumulate(b_v, g.colwise().sum());
  });
}

/// 0.5 * (x + conv2(relu(conv1(x)))).
inline ad::Var graph_residual_block(const ad::Var& x, std::shared_ptr<const SparseAdjacency> adj,
                                    const ResidualBlockT<ad::Var>& block) {
  MDN_CHECK(block.conv1.w_self.rows() == x.cols() && block.conv2.w_self.cols() == x.cols(),
            ErrorCode::kInvalidArgument, "residual block width does not match input width");
  const ad::Var inner = ad::relu(graph_conv(x, adj, block.conv1));
  return ad::scale(ad::add(x, graph_conv(inner, adj, block.conv2)), 0.5);
}

inline ad::Var dense(const ad::Var& x, const DenseT<ad::Var>& layer) {
  return ad::add_row(ad::matmul(x, layer.weight), layer.bias);
}

/// Raw score per node (N x 1) for pooled features (N x (3F+3)).
inline ad::Var score_nodes(const ScoringNetworkT<ad::Var>& net, const ad::Var& pooled,
                           std::shared_ptr<const SparseAdjacency> adj) {
  MDN_CHECK(pooled.cols() == net.input.w_self.rows(), ErrorCode::kInvalidArgument,
            "pooled feature width " + std::to_string(pooled.cols()) + " does not match model input " +
                std::to_string(net.input.w_self.rows()));
  ad::Var h = ad::relu(graph_conv(pooled, adj, net.input));
  for (const auto& block : net.blocks) h = graph_residual_block(h, adj, block);
  return dense(h, net.head);
}

/// One weight c_i per node of a single local graph (rows of `pooled`).
inline Vec score_hypotheses(const MDNModel& model, const Mat& pooled, const SparseAdjacency& adj) {
  MDN_CHECK(pooled.rows() == static_cast<Eigen::Index>(adj.num_nodes()),
            ErrorCode::kInvalidArgument, "pooled rows must match graph nodes");
  MDN_CHECK(pooled.allFinite(), ErrorCode::kInvalidArgument, "non-finite pooled features");
  ad::Tape tape;
  const auto net = bind(tape, model.scoring, false);
  const auto shared = std::make_shared<const SparseAdjacency>(adj);
  const ad::Var c = score_nodes(net, tape.constant(pooled), shared);
  return c.value().col(0);
}

inline Vec score_hypotheses(const MDNModel& model, const Mat& pooled, const HypothesisGraph& graph) {
  MDN_CHECK(pooled.rows() == kHypothesisNodes, ErrorCode::kInvalidArgument,
            "expected 43 pooled rows, got " + std::to_string(pooled.rows()));
  return score_hypotheses(model, pooled,
                          SparseAdjacency(graph.nodes.size(), std::span<const Edge>(graph.edges)));
}

// ---------------------------------------------------------------------------
// Soft-argmax

namespace detail {
inline void softmax_into(const double* c, int n, double* s) {
  double mx = c[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, c[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    s[i] = std::exp(c[i] - mx);
    z += s[i];
  }
  for (int i = 0; i < n; ++i) s[i] /= z;
}
}  // namespace detail

inline Vec softmax(const Vec& c) {
  MDN_CHECK(c.size() > 0 && c.allFinite(), ErrorCode::kInvalidArgument, "softmax needs finite weights");
  Vec s(c.size());
  detail::softmax_into(c.data(), static_cast<int>(c.size()), s.data());
  return s;
}

/// Convex combination of hypothesis positions weighted by softmax(c).
inline Vec3 soft_argmax(const Vec& c, std::span<const Vec3> h) {
  MDN_CHECK(static_cast<std::size_t>(c.size()) == h.size() && !h.empty(),
            ErrorCode::kInvalidArgument, "soft_argmax: weight/hypothesis count mismatch");
  const Vec s = softmax(c);
  Vec3 v = Vec3::Zero();
  for (std::size_t i = 0; i < h.size(); ++i) v += s[i] * h[i];
  return v;
}

/// Groups of `group` consecutive rows: scores (G*group x 1) and positions
/// (G*group x 3) reduce to G x 3 soft-argmax points.
inline ad::Var soft_argmax_groups(const ad::Var& scores, const ad::Var& positions, int group) {
  MDN_CHECK(scores.cols() == 1 && positions.cols() == 3 && scores.rows() == positions.rows() &&
                group > 0 && scores.rows() % group == 0,
            ErrorCode::kInvalidArgument, "soft_argmax_groups: shape mismatch");
  MDN_CHECK(scores.value().allFinite(), ErrorCode::kInvalidArgument,
            "soft_argmax: non-finite hypothesis weights");
  const Eigen::Index G = scores.rows() / group;
  auto weights = std::make_shared<Mat>(scores.rows(), 1);
  Mat out = Mat::Zero(G, 3);
  const Mat& c = scores.value();
  const Mat& h = positions.value();
  for (Eigen::Index gi = 0; gi < G; ++gi) {
    const Eigen::Index base = gi * group;
    detail::softmax_into(&c(base, 0), group, &(*weights)(base, 0));
    for (int i = 0; i < group; ++i) out.row(gi) += (*weights)(base + i, 0) * h.row(base + i);
  }
  Mat result = out;
  return scores.tape()->record(std::move(result), {scores, positions},
                               [scores, positions, weights, group, out](ad::Tape& t, const Mat& g) {
    const Mat& h = positions.value();
    const Eigen::Index G = g.rows();
    if (positions.requires_grad()) {
      t.accumulate_with(positions, [&](Mat& gp) {
        for (Eigen::Index gi = 0; gi < G; ++gi) {
          for (int i = 0; i < group; ++i) gp.row(gi * group + i) += (*weights)(gi * group + i, 0) * g.row(gi);
        }
      });
    }
    if (scores.requires_grad()) {
      t.accumulate_with(scores, [&](Mat& gc) {
        for (Eigen::Index gi = 0; gi < G; ++gi) {
          const double gv = g.row(gi).dot(out.row(gi));
          for (int i = 0; i < group; ++i) {
            const Eigen::Index r = gi * group + i;
            gc(r, 0) += (*weights)(r, 0) * (g.row(gi).dot(h.row(r)) - gv);
          }
        }
      });
    }
  });
}

/// Hypothesis positions for every vertex: rows [43k, 43k+43) hold vertex k
/// followed by vertex k + scale * offset_j.
inline ad::Var expand_hypotheses(const ad::Var& vertices, double scale) {
  MDN_CHECK(vertices.cols() == 3, ErrorCode::kInvalidArgument, "expand_hypotheses expects N x 3");
  MDN_CHECK(scale > 0.0, ErrorCode::kInvalidArgument, "hypothesis scale must be positive");
  const auto& offsets = hypothesis_offsets();
  const Eigen::Index n = vertices.rows();
  Mat out(n * kHypothesisNodes, 3);
  const Mat& v = vertices.value();
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index base = k * kHypothesisNodes;
    out.row(base) = v.row(k);
    for (int j = 0; j < kHypothesisNodes - 1; ++j) {
      out.row(base + 1 + j) = v.row(k) + scale * offsets[j].transpose();
    }
  }
  return vertices.tape()->record(std::move(out), {vertices}, [vertices](ad::Tape& t, const Mat& g) {
    t.accumulate_with(vertices, [&](Mat& gv) {
      const Eigen::Index n = gv.rows();
      for (Eigen::Index k = 0; k < n; ++k) {
        gv.row(k) += g.middleRows(k * kHypothesisNodes, kHypothesisNodes).colwise().sum();
      }
    });
  });
}

}  // namespace mdn
