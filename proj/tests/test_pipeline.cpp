#include <algorithm>

#include "test_support.hpp"

namespace mdn {
namespace {

DatasetOptions tiny_options() {
  DatasetOptions o;
  o.image_size = 24;
  o.focal = 30.0;
  o.subdivisions = 1;
  o.gt_points = 300;
  return o;
}

const std::vector<Sample>& tiny_dataset() {
  static const std::vector<Sample> d = make_synthetic_dataset(2, tiny_options(), 17);
  return d;
}

MDNModel tiny_model(std::uint64_t seed = 3) {
  return init_model(MDNConfig{feature_channels(tiny_options()), 6, 0.02}, seed);
}

TrainConfig tiny_train(double lr = 1e-3) {
  TrainConfig t;
  t.epochs = 2;
  t.lr = lr;
  t.extra_samples = 20;
  t.seed = 9;
  return t;
}

RefineConfig tiny_refine() {
  RefineConfig r;
  r.iterations = 2;
  return r;
}

double max_displacement(const TriangleMesh& a, const TriangleMesh& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.vertices.size(); ++i) d = std::max(d, (a.vertices[i] - b.vertices[i]).norm());
  return d;
}

bool same_bits(const TriangleMesh& a, const TriangleMesh& b) {
  return a.faces == b.faces && a.vertices.size() == b.vertices.size() &&
         std::memcmp(a.vertices.data(), b.vertices.data(), sizeof(Vec3) * a.vertices.size()) == 0;
}

bool same_params(const MDNModel& a, const MDNModel& b) {
  auto pa = parameter_tensors(const_cast<MDNModel&>(a));
  auto pb = parameter_tensors(const_cast<MDNModel&>(b));
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (*pa[i] != *pb[i]) return false;
  }
  return true;
}

TEST(MdnForward, ZeroScoresLeaveMeshUnchanged) {
  MDNModel m = tiny_model();
  m.scoring.head.weight.setZero();
  m.scoring.head.bias.setZero();
  const Sample& s = tiny_dataset()[0];
  const TriangleMesh out = mdn_forward(m, s.coarse_mesh, s.views);
  EXPECT_EQ(out.faces, s.coarse_mesh.faces);
  EXPECT_LT(max_displacement(out, s.coarse_mesh), 1e-9);
}

TEST(MdnForward, DisplacementBoundedByScale) {
  const Sample& s = tiny_dataset()[1];
  for (std::uint64_t seed : {1, 2, 3}) {
    MDNModel m = tiny_model(seed);
    m.scoring.head.weight *= 50.0;  // sharpen the softmax toward single hypotheses
    for (double scale : {0.02, 0.05}) {
      const TriangleMesh out = mdn_forward(m, s.coarse_mesh, s.views, scale);
      EXPECT_EQ(out.faces, s.coarse_mesh.faces);
      EXPECT_LE(max_displacement(out, s.coarse_mesh), scale * (1.0 + 1e-12));
    }
  }
}

TEST(MdnForward, ViewOrderDoesNotMatter) {
  const MDNModel m = tiny_model();
  const Sample& s = tiny_dataset()[0];
  const TriangleMesh ref = mdn_forward(m, s.coarse_mesh, s.views);
  std::vector<int> perm{0, 1, 2};
  while (std::next_permutation(perm.begin(), perm.end())) {
    std::vector<FeatureStack> shuffled;
    for (int i : perm) shuffled.push_back(s.views[i]);
    EXPECT_TRUE(same_bits(mdn_forward(m, s.coarse_mesh, shuffled), ref));
  }
}

TEST(MdnForward, RunsWithAnyViewCount) {
  const MDNModel m = tiny_model();
  const DatasetOptions o = [] {
    DatasetOptions d = tiny_options();
    d.views = 5;
    return d;
  }();
  const Sample s = make_synthetic_sample("five", o, 4);
  for (std::size_t n = 1; n <= 5; ++n) {
    const std::span<const FeatureStack> views(s.views.data(), n);
    const TriangleMesh out = mdn_forward(m, s.coarse_mesh, views);
    EXPECT_LE(max_displacement(out, s.coarse_mesh), 0.02 * (1.0 + 1e-12));
  }
}

TEST(MdnForward, FeatureDimensionMismatchRejected) {
  const MDNModel m = init_model(MDNConfig{5, 4, 0.02}, 1);
  const Sample& s = tiny_dataset()[0];
  EXPECT_MDN_ERROR(mdn_forward(m, s.coarse_mesh, s.views), ErrorCode::kInvalidArgument);
}

TEST(MdnForward, SharedWeightsGiveCongruentDeformations) {
  const MDNModel m = tiny_model();
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  Mat pooled(kHypothesisNodes, m.config.input_dim());
  for (Eigen::Index i = 0; i < pooled.size(); ++i) pooled.data()[i] = n(rng);
  const Vec3 a(0.1, 0.2, 0.3), b(-1.0, 0.5, 2.0);
  const auto ga = build_hypothesis_graph(a, 0.02), gb = build_hypothesis_graph(b, 0.02);
  const Vec ca = score_hypotheses(m, pooled, ga), cb = score_hypotheses(m, pooled, gb);
  EXPECT_EQ(ca, cb);
  EXPECT_LT(((soft_argmax(ca, ga.nodes) - a) - (soft_argmax(cb, gb.nodes) - b)).norm(), 1e-15);
}

TEST(Refine, ReturnsOneMeshPerIteration) {
  const MDNModel m = tiny_model();
  const Sample& s = tiny_dataset()[0];
  RefineConfig r;
  r.iterations = 1;
  const auto one = refine(m, s.coarse_mesh, s.views, r);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_TRUE(same_bits(one[0], mdn_forward(m, s.coarse_mesh, s.views)));
  const auto three = refine(m, s.coarse_mesh, s.views, RefineConfig{});
  ASSERT_EQ(three.size(), 3u);
  EXPECT_TRUE(same_bits(three[1], mdn_forward(m, three[0], s.views)));
  for (const auto& mesh : three) EXPECT_EQ(mesh.faces, s.coarse_mesh.faces);
  r.iterations = 0;
  EXPECT_MDN_ERROR(refine(m, s.coarse_mesh, s.views, r), ErrorCode::kInvalidArgument);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  const MDNModel init = tiny_model();
  const TrainResult r = train(init, tiny_dataset(), tiny_train(0.0), tiny_refine());
  EXPECT_TRUE(same_params(r.model, init));
  EXPECT_EQ(r.log.size(), 4u);
}

TEST(Train, DeterministicUnderSeed) {
  const MDNModel init = tiny_model();
  const TrainResult a = train(init, tiny_dataset(), tiny_train(), tiny_refine());
  const TrainResult b = train(init, tiny_dataset(), tiny_train(), tiny_refine());
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].sample_id, b.log[i].sample_id);
    EXPECT_EQ(a.log[i].loss.total, b.log[i].loss.total);
    EXPECT_EQ(a.log[i].loss.chamfer, b.log[i].loss.chamfer);
  }
  EXPECT_TRUE(same_params(a.model, b.model));
  EXPECT_FALSE(same_params(a.model, init));
}

TEST(Train, LogTotalsAreWeightedSums) {
  std::size_t calls = 0;
  const TrainResult r = train(tiny_model(), tiny_dataset(), tiny_train(), tiny_refine(),
                              [&](const TrainLogEntry& e) { EXPECT_EQ(e.step, ++calls); });
  EXPECT_EQ(calls, r.log.size());
  for (const auto& e : r.log) {
    EXPECT_NEAR(e.loss.total, weighted_total(e.loss, LossWeights{}), 1e-12 * std::max(1.0, e.loss.total));
    EXPECT_GE(e.loss.chamfer, 0.0);
  }
}

TEST(Train, FirstStepGradientMatchesFiniteDifferences) {
  const MDNModel m = tiny_model();
  const Sample& s = tiny_dataset()[0];
  LossOptions lopt;
  lopt.extra_samples = 20;
  std::vector<Mat> grads;
  sample_loss_and_grad(m, s, s.views, tiny_refine(), lopt, 4, &grads);
  // Probe the head weights, which every vertex depends on.
  MDNModel probe = m;
  Mat& w = probe.scoring.head.weight;
  const Mat& g = grads[grads.size() - 2];
  double max_err = 0.0, max_g = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double keep = w.data()[i];
    w.data()[i] = keep + 1e-6;
    const double fp = sample_loss_and_grad(probe, s, s.views, tiny_refine(), lopt, 4, nullptr).total;
    w.data()[i] = keep - 1e-6;
    const double fm = sample_loss_and_grad(probe, s, s.views, tiny_refine(), lopt, 4, nullptr).total;
    w.data()[i] = keep;
    max_err = std::max(max_err, std::abs((fp - fm) / 2e-6 - g.data()[i]));
    max_g = std::max(max_g, std::abs(g.data()[i]));
  }
  EXPECT_LT(max_err / max_g, 1e-4);
}

TEST(Train, NonFiniteLossAbortsNamingSample) {
  std::vector<Sample> data{tiny_dataset()[0]};
  data[0].gt_points.points[0].x() = std::nan("");
  try {
    train(tiny_model(), data, tiny_train(), tiny_refine());
    ADD_FAILURE() << "expected non-finite failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFinite);
    EXPECT_NE(std::string(e.what()).find(data[0].id), std::string::npos) << e.what();
  }
}

TEST(Train, RejectsInvalidConfig) {
  TrainConfig t = tiny_train();
  t.batch_size = 0;
  EXPECT_MDN_ERROR(train(tiny_model(), tiny_dataset(), t, tiny_refine()), ErrorCode::kInvalidArgument);
  EXPECT_MDN_ERROR(train(tiny_model(), {}, tiny_train(), tiny_refine()), ErrorCode::kInvalidArgument);
}

TEST(Dataset, ShapeContract) {
  const auto d = make_synthetic_dataset(1, 3, 8);
  ASSERT_EQ(d.size(), 1u);
  const Sample& s = d[0];
  ASSERT_EQ(s.views.size(), 3u);
  for (const auto& v : s.views) {
    EXPECT_EQ(v.total_channels(), s.views[0].total_channels());
    EXPECT_EQ(v.levels.size(), 3u);
  }
  EXPECT_EQ(s.coarse_mesh.faces, s.gt_mesh.faces);
  EXPECT_TRUE(s.gt_points.has_normals());
  EXPECT_EQ(s.id, sample_id(0));
  EXPECT_MDN_ERROR(make_synthetic_dataset(0, 3, 8), ErrorCode::kInvalidArgument);
  EXPECT_MDN_ERROR(make_synthetic_dataset(1, 0, 8), ErrorCode::kInvalidArgument);
}

TEST(Dataset, BitwiseDeterministic) {
  const auto a = make_synthetic_dataset(2, tiny_options(), 21);
  const auto b = make_synthetic_dataset(2, tiny_options(), 21);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(same_bits(a[i].gt_mesh, b[i].gt_mesh));
    EXPECT_TRUE(same_bits(a[i].coarse_mesh, b[i].coarse_mesh));
    for (std::size_t v = 0; v < a[i].views.size(); ++v) {
      for (std::size_t l = 0; l < a[i].views[v].levels.size(); ++l) {
        EXPECT_EQ(a[i].views[v].levels[l].data, b[i].views[v].levels[l].data);
      }
    }
  }
  const auto c = make_synthetic_dataset(2, tiny_options(), 22);
  EXPECT_FALSE(same_bits(a[0].gt_mesh, c[0].gt_mesh));
}

// Nearest hit along the camera ray through p, by brute force over faces.
double first_hit(const TriangleMesh& m, const CameraView& cam, const Vec3& p_cam) {
  double best = std::numeric_limits<double>::infinity();
  const Vec3 d = p_cam.normalized();
  for (const auto& f : m.faces) {
    const Vec3 a = world_to_camera(cam.pose, m.vertices[f[0]]);
    const Vec3 b = world_to_camera(cam.pose, m.vertices[f[1]]);
    const Vec3 c = world_to_camera(cam.pose, m.vertices[f[2]]);
    best = std::min(best, detail::ray_hit_camera(d, a, b, c));
  }
  return best;
}

TEST(Renderer, DepthChannelMatchesVisibleSurfaceDepth) {
  const Sample s = make_synthetic_sample("r", DatasetOptions{}, 31);
  const FeatureStack& view = s.views[0];
  const FeatureMap& level = view.levels[0];
  const PointCloud pts = sample_surface(s.gt_mesh, 400, 5);
  int checked = 0, ok = 0;
  for (const auto& p : pts.points) {
    const Vec3 pc = world_to_camera(view.camera.pose, p);
    if (std::abs(first_hit(s.gt_mesh, view.camera, pc) - pc.norm()) > 1e-9) continue;  // occluded
    const Vec2 uv = project(view.camera.intrinsics, pc);
    const int x0 = static_cast<int>(std::floor(uv.x())), y0 = static_cast<int>(std::floor(uv.y()));
    if (x0 < 0 || y0 < 0 || x0 + 1 >= level.width || y0 + 1 >= level.height) continue;
    double lo = 1e300, hi = -1e300;
    bool covered = true;
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx) {
        covered = covered && level.at(y0 + dy, x0 + dx, kSilhouetteChannel) == 1.0f;
        lo = std::min(lo, static_cast<double>(level.at(y0 + dy, x0 + dx, kDepthChannel)));
        hi = std::max(hi, static_cast<double>(level.at(y0 + dy, x0 + dx, kDepthChannel)));
      }
    }
    if (!covered) continue;
    ++checked;
    const double depth = bilinear_sample(level, uv.x(), uv.y())(kDepthChannel);
    ok += std::abs(depth - pc.z()) <= (hi - lo) + 1e-5;
  }
  EXPECT_GT(checked, 100);
  EXPECT_GE(ok, checked * 95 / 100);
}

TEST(PerturbCoarse, IdentitySettings) {
  const Sample& s = tiny_dataset()[0];
  EXPECT_TRUE(same_bits(perturb_coarse(s.gt_mesh, 0.0, Vec3::Zero(), 0, 1), s.gt_mesh));
}

TEST(PerturbCoarse, ShiftOnlyEqualsTranslation) {
  const TriangleMesh& gt = tiny_dataset()[0].gt_mesh;
  const TriangleMesh shifted = perturb_coarse(gt, 0.0, Vec3(0.1, 0, 0), 0, 1);
  EXPECT_EQ(chamfer_metric(shifted, gt, 2048, 3),
            chamfer_metric(test::translated(gt, Vec3(0.1, 0, 0)), gt, 2048, 3));
}

TEST(PerturbCoarse, NoiseAndSmoothingKeepTopology) {
  const TriangleMesh& gt = tiny_dataset()[1].gt_mesh;
  const TriangleMesh a = perturb_coarse(gt, 0.02, Vec3(0, 0.01, 0), 3, 7);
  EXPECT_EQ(a.faces, gt.faces);
  EXPECT_TRUE(same_bits(a, perturb_coarse(gt, 0.02, Vec3(0, 0.01, 0), 3, 7)));
  EXPECT_FALSE(same_bits(a, perturb_coarse(gt, 0.02, Vec3(0, 0.01, 0), 3, 8)));
  // Smoothing alone shrinks detail: edge lengths do not grow on average.
  EXPECT_LE(edge_loss(perturb_coarse(gt, 0.0, Vec3::Zero(), 3, 0)), edge_loss(gt));
  EXPECT_MDN_ERROR(perturb_coarse(gt, -1.0, Vec3::Zero(), 0, 0), ErrorCode::kInvalidArgument);
}

TEST(PoseInstances, GroundTruthExplainsObservation) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PoseInstance inst = synthetic_pose_instance(seed);
    EXPECT_LT(pose_loss_and_grad(inst.gt, inst.canonical, inst.observed).loss, 1e-20);
    EXPECT_GT(pose_loss_and_grad(default_pose_init(inst.observed), inst.canonical, inst.observed).loss, 0.0);
  }
}

}  // namespace
}  // namespace mdn
