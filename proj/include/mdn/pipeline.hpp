#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mdn/adam.hpp"
#include "mdn/autodiff.hpp"
#include "mdn/camera.hpp"
#include "mdn/error.hpp"
#include "mdn/features.hpp"
#include "mdn/geometry.hpp"
#include "mdn/graphnet.hpp"
#include "mdn/losses.hpp"
#include "mdn/metrics.hpp"
#include "mdn/render.hpp"
#include "mdn/seed.hpp"

namespace mdn {

struct Sample {
  std::string id;
  TriangleMesh gt_mesh;
  TriangleMesh coarse_mesh;
  std::vector<FeatureStack> views;
  PointCloud gt_points;  // with normals
  std::uint64_t seed = 0;
  std::uint64_t gt_points_seed = 0;
};

struct RefineConfig {
  int iterations = 3;
  double scale = 0.02;
  int views = 3;  // views drawn per training pass; 0 uses every view
};

struct TrainConfig {
  int epochs = 20;
  double lr = 1e-6;
  double weight_decay = 5e-6;
  int batch_size = 1;
  LossWeights weights;
  std::size_t extra_samples = 4000;
  std::uint64_t seed = 0;
};

inline void validate(const RefineConfig& c) {
  MDN_CHECK(c.iterations >= 1, ErrorCode::kInvalidArgument, "refinement needs at least one iteration");
  MDN_CHECK(c.scale > 0.0 && std::isfinite(c.scale), ErrorCode::kInvalidArgument,
            "hypothesis scale must be positive");
  MDN_CHECK(c.views >= 0, ErrorCode::kInvalidArgument, "view count must be non-negative");
}

inline void validate(const TrainConfig& c) {
  MDN_CHECK(c.epochs >= 0, ErrorCode::kInvalidArgument, "epochs must be non-negative");
  MDN_CHECK(c.lr >= 0.0 && std::isfinite(c.lr), ErrorCode::kInvalidArgument,
            "learning rate must be finite and non-negative");
  MDN_CHECK(c.weight_decay >= 0.0, ErrorCode::kInvalidArgument, "weight decay must be non-negative");
  MDN_CHECK(c.batch_size >= 1, ErrorCode::kInvalidArgument, "batch size must be >= 1");
  validate(c.weights);
}

// ---------------------------------------------------------------------------
// Forward pass

/// Block-diagonal adjacency of `n` hypothesis graphs, cached per size.
inline std::shared_ptr<const SparseAdjacency> batched_hypothesis_adjacency(std::size_t n) {
  static std::mutex mutex;
  static std::map<std::size_t, std::shared_ptr<const SparseAdjacency>> cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto& slot = cache[n];
  if (!slot) slot = std::make_shared<const SparseAdjacency>(hypothesis_adjacency().replicated(n));
  return slot;
}

inline void require_feature_match(const MDNConfig& config, std::span<const FeatureStack> views) {
  const int F = detail::common_channels(views);
  MDN_CHECK(F == config.feature_channels, ErrorCode::kInvalidArgument,
            "views carry " + std::to_string(F) + " feature channels but the model expects " +
                std::to_string(config.feature_channels));
}

/// One deformation step on the tape: hypotheses around every vertex, pooled
/// features, per-node scores, soft-argmax. Returns the new N x 3 vertices.
inline ad::Var mdn_step(const ScoringNetworkT<ad::Var>& net, const ad::Var& vertices,
                        std::span<const FeatureStack> views, double scale) {
  const auto adj = batched_hypothesis_adjacency(static_cast<std::size_t>(vertices.rows()));
  const ad::Var hyp = expand_hypotheses(vertices, scale);
  const ad::Var pooled = pool_features(views, hyp);
  const ad::Var scores = score_nodes(net, pooled, adj);
  return soft_argmax_groups(scores, hyp, kHypothesisNodes);
}

/// One refinement pass with the model's hypothesis scale.
inline TriangleMesh mdn_forward(const MDNModel& model, const TriangleMesh& mesh,
                                std::span<const FeatureStack> views, double scale = 0.0) {
  validate_refinable(mesh);
  require_feature_match(model.config, views);
  ad::Tape tape;
  const auto net = bind(tape, model.scoring, false);
  const ad::Var v = tape.constant(vertex_matrix(mesh));
  const ad::Var out = mdn_step(net, v, views, scale > 0.0 ? scale : model.config.scale);
  return with_vertices(mesh, out.value());
}

/// Applies mdn_forward `iterations` times; element k is the mesh after k+1 passes.
inline std::vector<TriangleMesh> refine(const MDNModel& model, const TriangleMesh& coarse,
                                        std::span<const FeatureStack> views, const RefineConfig& config) {
  validate(config);
  std::vector<TriangleMesh> out;
  out.reserve(config.iterations);
  const TriangleMesh* current = &coarse;
  for (int i = 0; i < config.iterations; ++i) {
    out.push_back(mdn_forward(model, *current, views, config.scale));
    current = &out.back();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainLogEntry {
  std::size_t step = 0;
  int epoch = 0;
  std::string sample_id;
  LossBreakdown loss;  // summed over refinement iterations
};

struct TrainResult {
  MDNModel model;
  std::vector<TrainLogEntry> log;
};

using TrainCallback = std::function<void(const TrainLogEntry&)>;

namespace detail {

inline std::vector<std::size_t> pick_views(std::size_t available, int wanted, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(available);
  std::iota(idx.begin(), idx.end(), 0);
  if (wanted <= 0 || static_cast<std::size_t>(wanted) >= available) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(wanted);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline bool all_finite(const std::vector<Mat>& tensors) {
  for (const auto& t : tensors) {
    if (!t.allFinite()) return false;
  }
  return true;
}

}  // namespace detail

/// Loss and parameter gradients for one sample: the loss is summed over the
/// refinement iterations, each measured against that iteration's input.
inline LossBreakdown sample_loss_and_grad(const MDNModel& model, const Sample& sample,
                                          std::span<const FeatureStack> views, const RefineConfig& rcfg,
                                          const LossOptions& lopt, std::uint64_t seed,
                                          std::vector<Mat>* grads) {
  ad::Tape tape;
  const auto net = bind(tape, model.scoring, grads != nullptr);
  const MeshTopology topo(sample.coarse_mesh);
  const ad::Var gt = tape.constant(cloud_matrix(sample.gt_points.points));
  ad::Var v = tape.constant(vertex_matrix(sample.coarse_mesh));
  ad::Var total;
  LossBreakdown sum;
  for (int it = 0; it < rcfg.iterations; ++it) {
    const ad::Var next = mdn_step(net, v, views, rcfg.scale);
    const TotalLoss l = total_loss(next, v, topo, sample.gt_points, gt, lopt,
                                   derive_seed(seed, {static_cast<std::uint64_t>(it)}));
    total = it == 0 ? l.total : ad::add(total, l.total);
    sum += l.breakdown;
    v = next;
  }
  sum.total = total.value()(0, 0);
  if (grads) {
    MDN_CHECK(std::isfinite(sum.total), ErrorCode::kNonFinite,
              "non-finite loss on sample '" + sample.id + "': chamfer=" + std::to_string(sum.chamfer) +
                  " normal=" + std::to_string(sum.normal) + " edge=" + std::to_string(sum.edge) +
                  " laplacian=" + std::to_string(sum.laplacian));
    tape.backward(total);
    grads->clear();
    for_each_tensor(net, [&](const ad::Var& p) { grads->push_back(p.grad()); });
    MDN_CHECK(detail::all_finite(*grads), ErrorCode::kNonFinite,
              "non-finite gradient on sample '" + sample.id + "'");
  }
  return sum;
}

/// Adam training with per-epoch seeded sample order and view selection.
inline TrainResult train(const MDNModel& init, const std::vector<Sample>& dataset, const TrainConfig& tcfg,
                         const RefineConfig& rcfg, const TrainCallback& on_step = {}) {
  validate(tcfg);
  validate(rcfg);
  validate(init.config);
  MDN_CHECK(!dataset.empty(), ErrorCode::kInvalidArgument, "training needs a non-empty dataset");
  for (const auto& s : dataset) {
    MDN_CHECK(!s.views.empty(), ErrorCode::kInvalidArgument, "sample '" + s.id + "' has no views");
    require_feature_match(init.config, s.views);
    MDN_CHECK(!s.gt_points.empty() && s.gt_points.has_normals(), ErrorCode::kInvalidArgument,
              "sample '" + s.id + "' needs ground-truth points with normals");
    validate_refinable(s.coarse_mesh);
  }

  TrainResult result{init, {}};
  AdamState state;
  AdamOptions aopt;
  aopt.lr = tcfg.lr;
  aopt.weight_decay = tcfg.weight_decay;
  LossOptions lopt;
  lopt.weights = tcfg.weights;
  lopt.extra_samples = tcfg.extra_samples;

  std::vector<Mat> grads, batch;
  int in_batch = 0;
  auto flush = [&] {
    if (in_batch == 0) return;
    for (auto& g : batch) g /= static_cast<double>(in_batch);
    adam_step(parameter_tensors(result.model), batch, state, aopt);
    batch.clear();
    in_batch = 0;
  };

  std::size_t step = 0;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(tcfg.seed, {0x7261696eULL, static_cast<std::uint64_t>(epoch)}));
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t idx : order) {
      const Sample& s = dataset[idx];
      std::vector<FeatureStack> views;
      for (std::size_t v : detail::pick_views(s.views.size(), rcfg.views, rng)) views.push_back(s.views[v]);
      const std::uint64_t seed = derive_seed(tcfg.seed, {static_cast<std::uint64_t>(epoch), idx});
      TrainLogEntry entry;
      entry.step = ++step;
      entry.epoch = epoch;
      entry.sample_id = s.id;
      entry.loss = sample_loss_and_grad(result.model, s, views, rcfg, lopt, seed, &grads);
      if (batch.empty()) {
        batch = grads;
      } else {
        for (std::size_t i = 0; i < batch.size(); ++i) batch[i] += grads[i];
      }
      if (++in_batch == tcfg.batch_size) flush();
      result.log.push_back(entry);
      if (on_step) on_step(entry);
    }
    flush();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Uniform-Laplacian smoothing, Gaussian noise, then a rigid shift.
inline TriangleMesh perturb_coarse(const TriangleMesh& gt, double sigma, const Vec3& shift, int smooth_steps,
                                   std::uint64_t seed, double smooth_lambda = 0.5) {
  validate_mesh(gt);
  MDN_CHECK(sigma >= 0.0 && std::isfinite(sigma), ErrorCode::kInvalidArgument, "noise sigma must be >= 0");
  MDN_CHECK(smooth_steps >= 0, ErrorCode::kInvalidArgument, "smoothing steps must be >= 0");
  TriangleMesh out = gt;
  if (smooth_steps > 0) {
    const SparseAdjacency adj = mesh_adjacency(gt);
    for (int s = 0; s < smooth_steps; ++s) {
      const std::vector<Vec3> prev = out.vertices;
      for (std::size_t i = 0; i < prev.size(); ++i) {
        const auto& nb = adj.neighbors(i);
        if (nb.empty()) continue;
        Vec3 mean = Vec3::Zero();
        for (int j : nb) mean += prev[j];
        mean /= static_cast<double>(nb.size());
        out.vertices[i] = prev[i] + smooth_lambda * (mean - prev[i]);
      }
    }
  }
  if (sigma > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (auto& v : out.vertices) {
      for (int k = 0; k < 3; ++k) v[k] += noise(rng);
    }
  }
  for (auto& v : out.vertices) v += shift;
  return out;
}

struct ShapeParams {
  bool bumpy_box = false;
  Vec3 radii = Vec3::Constant(0.25);
  double exponent = 2.0;
  Vec3 bump_dir = Vec3::UnitZ();
  double bump_height = 0.0;
  double bump_width = 0.3;
};

/// Icosphere pushed radially onto a superellipsoid, optionally with a bump.
inline TriangleMesh make_shape(const ShapeParams& p, int subdivisions = 2) {
  TriangleMesh m = icosphere(subdivisions);
  for (auto& v : m.vertices) {
    const Vec3 d = v.normalized();
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += std::pow(std::abs(d[k] / p.radii[k]), p.exponent);
    double r = 1.0 / std::pow(s, 1.0 / p.exponent);
    if (p.bump_height != 0.0) {
      const double dist2 = (d - p.bump_dir).squaredNorm();
      r *= 1.0 + p.bump_height * std::exp(-dist2 / (p.bump_width * p.bump_width));
    }
    v = r * d;
  }
  return m;
}

inline ShapeParams random_shape(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ShapeParams p;
  p.bumpy_box = u(rng) < 0.5;
  for (int k = 0; k < 3; ++k) p.radii[k] = 0.18 + 0.12 * u(rng);
  if (p.bumpy_box) {
    p.exponent = 5.0 + 3.0 * u(rng);
    std::normal_distribution<double> g(0.0, 1.0);
    p.bump_dir = Vec3(g(rng), g(rng), g(rng)).normalized();
    p.bump_height = 0.15 + 0.15 * u(rng);
    p.bump_width = 0.35 + 0.2 * u(rng);
  } else {
    p.exponent = 1.6 + 2.4 * u(rng);
  }
  return p;
}

struct DatasetOptions {
  int views = 3;
  int subdivisions = 2;
  int image_size = 64;
  double focal = 80.0;
  double camera_distance = 1.4;
  RenderOptions render;
  std::size_t gt_points = 2048;
  // Each coarse mesh draws sigma ~ U[0, coarse_noise] and a shift of length
  // U[0, coarse_shift] in a random direction.
  double coarse_noise = 0.02;
  double coarse_shift = 0.05;
  int coarse_smooth_steps = 2;
};

inline void validate(const DatasetOptions& o) {
  MDN_CHECK(o.views >= 1, ErrorCode::kInvalidArgument, "dataset needs at least one view per sample");
  MDN_CHECK(o.image_size >= 2 && o.focal > 0.0 && o.camera_distance > 0.0, ErrorCode::kInvalidArgument,
            "invalid camera settings");
  MDN_CHECK(!o.render.strides.empty(), ErrorCode::kInvalidArgument, "at least one feature level required");
  MDN_CHECK(o.gt_points > 0, ErrorCode::kInvalidArgument, "ground-truth point count must be positive");
}

inline int feature_channels(const DatasetOptions& o) {
  return kRenderChannels * static_cast<int>(o.render.strides.size());
}

inline Intrinsics dataset_intrinsics(const DatasetOptions& o) {
  Intrinsics k;
  k.fx = k.fy = o.focal;
  k.cx = k.cy = 0.5 * (o.image_size - 1);
  k.width = k.height = o.image_size;
  return k;
}

/// Random camera on the sphere of radius `distance` around the origin.
inline CameraView random_camera(const Intrinsics& k, double distance, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec3 d;
  do {
    d = Vec3(g(rng), g(rng), g(rng));
  } while (d.norm() < 1e-6);
  return look_at(k, distance * d.normalized());
}

inline Sample make_synthetic_sample(const std::string& id, const DatasetOptions& o, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Sample s;
  s.id = id;
  s.gt_mesh = make_shape(random_shape(rng), o.subdivisions);
  const Intrinsics k = dataset_intrinsics(o);
  for (int v = 0; v < o.views; ++v) {
    s.views.push_back(render_view(s.gt_mesh, random_camera(k, o.camera_distance, rng), o.render));
  }
  s.seed = seed;
  s.gt_points_seed = derive_seed(seed, {1});
  s.gt_points = sample_surface(s.gt_mesh, o.gt_points, s.gt_points_seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double sigma = o.coarse_noise * u(rng);
  const double shift_len = o.coarse_shift * u(rng);
  std::normal_distribution<double> g(0.0, 1.0);
  const Vec3 dir = Vec3(g(rng), g(rng), g(rng)).normalized();
  s.coarse_mesh =
      perturb_coarse(s.gt_mesh, sigma, shift_len * dir, o.coarse_smooth_steps, derive_seed(seed, {2}));
  return s;
}

inline std::string sample_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%04zu", i);
  return buf;
}

inline std::vector<Sample> make_synthetic_dataset(std::size_t n, const DatasetOptions& o, std::uint64_t seed) {
  MDN_CHECK(n >= 1, ErrorCode::kInvalidArgument, "dataset size must be >= 1");
  validate(o);
  std::vector<Sample> out(n);
  parallel_for(0, n, [&](std::size_t i) { out[i] = make_synthetic_sample(sample_id(i), o, derive_seed(seed, {i})); });
  return out;
}

inline std::vector<Sample> make_synthetic_dataset(std::size_t n, int views, std::uint64_t seed) {
  DatasetOptions o;
  o.views = views;
  return make_synthetic_dataset(n, o, seed);
}

// ---------------------------------------------------------------------------
// Synthetic pose instances

/// Reference camera for synthetic pose runs: a 137 x 137 image.
inline Intrinsics reference_intrinsics() {
  Intrinsics k;
  k.width = k.height = kReferenceImageSize;
  k.fx = k.fy = 250.0;
  k.cx = k.cy = 0.5 * (kReferenceImageSize - 1);
  return k;
}

/// A seeded random shape cloud, a random 7D pose, and its observed cloud.
struct PoseInstance {
  PointCloud canonical;
  Pose7D gt;
  PointCloud observed;
};

inline PoseInstance synthetic_pose_instance(std::uint64_t seed, std::size_t points = 200) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> depth(1.5, 3.0);
  PoseInstance inst;
  inst.canonical = sample_surface(make_shape(random_shape(rng)), points, rng());
  inst.canonical.normals.clear();
  for (auto& r : inst.gt.rot6) r = g(rng);
  inst.gt.tz = depth(rng);
  inst.observed = transform_cloud(pose_from_7d(inst.gt), inst.canonical);
  return inst;
}

/// Identity rotation at the observed cloud's mean depth.
inline Pose7D default_pose_init(const PointCloud& observed) {
  Pose7D init;
  double z = 0.0;
  for (const auto& p : observed.points) z += p.z();
  init.tz = z / static_cast<double>(observed.size());
  return init;
}

// ---------------------------------------------------------------------------
// Evaluation over samples

struct RefinementEval {
  std::string id;
  double coarse_cd = 0.0;
  std::vector<double> iteration_cd;  // one per refinement pass
  std::vector<TriangleMesh> meshes;
};

/// CD of the coarse mesh and of every refinement pass against the gt mesh.
inline RefinementEval evaluate_refinement(const MDNModel& model, const Sample& s, const RefineConfig& rcfg,
                                          std::uint64_t seed, const TriangleMesh* coarse_override = nullptr) {
  const TriangleMesh& coarse = coarse_override ? *coarse_override : s.coarse_mesh;
  RefinementEval e;
  e.id = s.id;
  e.coarse_cd = chamfer_metric(coarse, s.gt_mesh, kChamferMetricSamples, seed);
  e.meshes = refine(model, coarse, s.views, rcfg);
  for (const auto& m : e.meshes) e.iteration_cd.push_back(chamfer_metric(m, s.gt_mesh, kChamferMetricSamples, seed));
  return e;
}

}  // namespace mdn
