// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <CLI11.hpp>
#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mdn/mdn.hpp"

namespace fs = std::filesystem;
using namespace mdn;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
  MDN_CHECK(out.good(), ErrorCode::kIo, "cannot write " + p.string());
}

TriangleMesh unit_cube(const Vec3& offset) {
  TriangleMesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
  m.faces = {{0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
             {1, 2, 6}, {1, 6, 5}, {2, 3, 7}, {2, 7, 6}, {3, 0, 4}, {3, 4, 7}};
  for (auto& v : m.vertices) v += offset;
  return m;
}

double brute_nearest_sq(const Vec3& p, const std::vector<Vec3>& q) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& x : q) best = std::min(best, (p - x).squaredNorm());
  return best;
}

// ---------------------------------------------------------------------------
// 1. Geometry

Outcome criterion_geometry() {
  std::ostringstream why;
  bool ok = true;
  const TriangleMesh ico = unit_icosahedron(1);
  const std::size_t nv = ico.num_vertices(), ne = mesh_edges(ico).size(), nf = ico.num_faces();
  ok = ok && nv == 42 && ne == 120 && nf == 80;
  why << "icosphere " << nv << "/" << ne << "/" << nf;

  const HypothesisGraph g = build_hypothesis_graph(Vec3(0.1, -0.2, 0.3), 0.02);
  ok = ok && g.nodes.size() == 43 && g.edges.size() == 162;
  why << ", hypotheses " << g.nodes.size() << "/" << g.edges.size();

  const Vec3 a(0.3, -1.7, 2.2), b(-4.1, 0.5, 0.9), c(1.25, 3.5, -0.75);
  const bool corners = sample_triangle(a, b, c, 0.0, 0.37) == a && sample_triangle(a, b, c, 1.0, 0.0) == b &&
                       sample_triangle(a, b, c, 1.0, 1.0) == c;
  ok = ok && corners;
  why << ", corners " << (corners ? "exact" : "inexact");

  // Face frequencies against area on a mesh with unequal face areas.
  TriangleMesh m = icosphere(1);
  for (auto& v : m.vertices) v = Vec3(1.7 * v.x(), 0.6 * v.y(), v.z() + 0.3 * v.x() * v.x());
  const std::size_t n = 100000;
  const SurfaceSamplePlan plan = plan_surface_samples(m, n, 2024);
  std::vector<double> counts(nf, 0.0);
  for (int f : plan.face) counts[f] += 1.0;
  const double total = surface_area(m);
  double chi2 = 0.0;
  for (std::size_t f = 0; f < nf; ++f) {
    const double e = n * face_area(m, m.faces[f]) / total;
    chi2 += (counts[f] - e) * (counts[f] - e) / e;
  }
  const double p_face =
      boost::math::cdf(boost::math::complement(boost::math::chi_squared(static_cast<double>(nf - 1)), chi2));

  // Within one triangle: four congruent midpoint sub-triangles get equal mass.
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::array<double, 4> cells{};
  for (std::size_t i = 0; i < n; ++i) {
    const auto w = triangle_weights(u(rng), u(rng));
    const int cell = w[0] > 0.5 ? 0 : w[1] > 0.5 ? 1 : w[2] > 0.5 ? 2 : 3;
    cells[cell] += 1.0;
  }
  double chi2_in = 0.0;
  for (double k : cells) chi2_in += (k - n / 4.0) * (k - n / 4.0) / (n / 4.0);
  const double p_in = boost::math::cdf(boost::math::complement(boost::math::chi_squared(3.0), chi2_in));
  ok = ok && p_face > 0.001 && p_in > 0.001;
  why << ", chi-square p " << fmt("%.3g", p_face) << " (faces) " << fmt("%.3g", p_in) << " (in-triangle)";
  return {ok, why.str()};
}

// ---------------------------------------------------------------------------
// 2. Gradient checks

Outcome criterion_gradcheck() {
  GradcheckOptions opt;
  opt.seed = 0;
  const auto rows = run_gradchecks(opt);
  bool ok = !rows.empty();
  double worst = 0.0;
  std::string worst_op;
  for (const auto& r : rows) {
    ok = ok && r.pass && r.max_rel_error < 1e-4;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_op = r.op;
    }
  }
  return {ok, std::to_string(rows.size()) + " ops, worst " + worst_op + " " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------------------
// 3. Softmax and soft-argmax

Outcome criterion_soft_argmax() {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> scale_d(0.005, 0.5);
  double sum_err = 0.0, hull_viol = 0.0, uniform_err = 0.0, shift_err = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Vec3 center(gauss(rng), gauss(rng), gauss(rng));
    const HypothesisGraph g = build_hypothesis_graph(center, scale_d(rng));
    const double spread = trial % 3 == 0 ? 30.0 : 2.0;
    Vec c(kHypothesisNodes);
    for (int i = 0; i < kHypothesisNodes; ++i) c(i) = spread * gauss(rng);
    sum_err = std::max(sum_err, std::abs(softmax(c).sum() - 1.0));

    const Vec3 x = soft_argmax(c, g.nodes);
    for (int d = 0; d < 64; ++d) {
      const Vec3 dir = Vec3(gauss(rng), gauss(rng), gauss(rng)).normalized();
      double support = -std::numeric_limits<double>::infinity();
      for (const auto& h : g.nodes) support = std::max(support, dir.dot(h));
      hull_viol = std::max(hull_viol, dir.dot(x) - support);
    }

    const Vec flat = Vec::Constant(kHypothesisNodes, gauss(rng));
    uniform_err = std::max(uniform_err, (soft_argmax(flat, g.nodes) - center).norm());

    for (double k : {-40.0, 0.5, 25.0}) {
      const Vec shifted = (c.array() + k).matrix();
      shift_err = std::max(shift_err, (soft_argmax(shifted, g.nodes) - x).cwiseAbs().maxCoeff());
    }
  }
  const bool ok = sum_err <= 1e-12 && hull_viol <= 1e-12 && uniform_err <= 1e-9 && shift_err <= 1e-12;
  return {ok, "sum err " + fmt("%.1e", sum_err) + ", hull excess " + fmt("%.1e", hull_viol) + ", uniform err " +
                  fmt("%.1e", uniform_err) + ", shift err " + fmt("%.1e", shift_err) + " over 1000 draws"};
}

// ---------------------------------------------------------------------------
// 4. Cross-view pooling

std::vector<FeatureStack> random_views(int n, const std::vector<int>& channels, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> val(-2.0f, 2.0f);
  Intrinsics k{50.0, 50.0, 15.5, 15.5, 32, 32};
  std::vector<FeatureStack> views;
  for (int v = 0; v < n; ++v) {
    FeatureStack s;
    s.camera = random_camera(k, 2.0, rng);
    float stride = 1.0f;
    for (int c : channels) {
      const int side = static_cast<int>(31 / stride) + 1;
      FeatureMap m(side, side, c, stride);
      for (auto& x : m.data) x = val(rng);
      s.levels.push_back(std::move(m));
      stride *= 2.0f;
    }
    views.push_back(std::move(s));
  }
  return views;
}

Outcome criterion_pooling() {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> gauss(0.0, 0.3);
  bool invariant = true;
  std::size_t compared = 0;
  for (int n = 1; n <= 4; ++n) {
    const auto views = random_views(n, {8, 16}, rng);
    std::vector<int> order(n);
    for (int p = 0; p < 20; ++p) {
      const Vec3 x(gauss(rng), gauss(rng), gauss(rng));
      const Vec ref = cross_view_pool(views, x).values;
      std::iota(order.begin(), order.end(), 0);
      do {
        std::vector<FeatureStack> perm;
        for (int i : order) perm.push_back(views[i]);
        const Vec got = cross_view_pool(perm, x).values;
        invariant = invariant && got.size() == ref.size() &&
                    std::memcmp(got.data(), ref.data(), sizeof(double) * ref.size()) == 0;
        ++compared;
      } while (std::next_permutation(order.begin(), order.end()));
    }
  }

  bool dims = true;
  for (int n = 1; n <= 5; ++n) {
    const auto views = random_views(n, {4, 3, 5}, rng);
    dims = dims && cross_view_pool(views, Vec3(0.05, -0.1, 0.0)).values.size() == 3 * 12 + 3;
  }
  const auto wide = random_views(2, {16, 32, 64}, rng);
  const auto wide_dim = cross_view_pool(wide, Vec3::Zero()).values.size();
  dims = dims && wide_dim == 339 && pooled_dimension(112) == 339;
  return {invariant && dims, std::to_string(compared) + " permuted poolings bitwise equal: " +
                                 (invariant ? "yes" : "no") + ", F=112 -> " + std::to_string(wide_dim)};
}

// ---------------------------------------------------------------------------
// 5. Metrics

Outcome criterion_metrics() {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> size_d(1, 256);
  std::uniform_real_distribution<double> tau_d(1e-3, 0.5);
  std::normal_distribution<double> g(0.0, 1.0);
  auto cloud = [&](int n) {
    PointCloud c;
    for (int i = 0; i < n; ++i) c.points.emplace_back(g(rng), g(rng), g(rng));
    return c;
  };
  double cd_err = 0.0;
  int f_mismatch = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const PointCloud p = cloud(size_d(rng));
    const PointCloud q = cloud(size_d(rng));
    const double tau = tau_d(rng);
    double a = 0.0, b = 0.0;
    std::size_t hp = 0, hr = 0;
    for (const auto& x : p.points) {
      const double d = brute_nearest_sq(x, q.points);
      a += d;
      hp += d < tau;
    }
    for (const auto& x : q.points) {
      const double d = brute_nearest_sq(x, p.points);
      b += d;
      hr += d < tau;
    }
    const double cd = a / p.size() + b / q.size();
    const double prec = 100.0 * hp / p.size(), rec = 100.0 * hr / q.size();
    const double f = prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    cd_err = std::max(cd_err, std::abs(chamfer(p, q) - cd) / std::max(1.0, cd));
    f_mismatch += std::abs(fscore(p, q, tau) - f) > 1e-12;
  }
  const double iou = volumetric_iou(unit_cube(Vec3::Zero()), unit_cube(Vec3(0.5, 0.0, 0.0)), 100000, 6);
  const bool ok = cd_err <= 1e-12 && f_mismatch == 0 && std::abs(iou - 1.0 / 3.0) <= 0.01;
  return {ok, "CD rel err " + fmt("%.1e", cd_err) + ", F-score mismatches " + std::to_string(f_mismatch) +
                  "/100, half-cube IoU " + fmt("%.4f", iou)};
}

// ---------------------------------------------------------------------------
// 6. Pose fitting

Outcome criterion_pose() {
  const Intrinsics k = reference_intrinsics();
  double worst_d3d = 0.0;
  int acc2d = 0, add3d = 0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const PoseInstance inst = synthetic_pose_instance(derive_seed(6, {i}));
    const PoseFitResult fit = fit_pose(inst.canonical, inst.observed, default_pose_init(inst.observed));
    const PoseMetrics m = pose_metrics(pose_from_7d(fit.params), pose_from_7d(inst.gt), k, inst.canonical);
    worst_d3d = std::max(worst_d3d, m.d3d);
    acc2d += m.d2d_available && m.acc2d_hit;
    add3d += m.add3d_hit;
  }
  std::mt19937_64 rng(66);
  std::normal_distribution<double> g(0.0, 1.0);
  double orth = 0.0, det = 0.0;
  for (int i = 0; i < 1000; ++i) {
    std::array<double, 6> r;
    for (auto& x : r) x = g(rng);
    const Mat3 R = rotation_from_6d(r);
    orth = std::max(orth, (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff());
    det = std::max(det, std::abs(R.determinant() - 1.0));
  }
  const bool ok = worst_d3d < 1e-3 && acc2d == 50 && add3d == 50 && orth <= 1e-9 && det <= 1e-9;
  return {ok, "worst d3D " + fmt("%.2e", worst_d3d) + ", Acc2D " + std::to_string(acc2d) + "/50, ADD3D " +
                  std::to_string(add3d) + "/50, orthonormality " + fmt("%.1e", orth) + ", det " + fmt("%.1e", det)};
}

// ---------------------------------------------------------------------------
// 7-10. Toy training and refinement

struct ToyRun {
  double first_loss = 0.0;
  double running_min = 0.0;
  std::vector<double> epoch_means;
  double train_seconds = 0.0;
  std::vector<RefinementEval> evals;
  std::vector<RefinementEval> robust;
  bool meshes_valid = true;
  std::string mesh_problem;
};

constexpr std::size_t kToyTrain = 64;
constexpr std::size_t kToyTest = 16;

ToyRun toy_run(const fs::path& dir) {
  fs::create_directories(dir);
  DatasetOptions o;
  const auto train_set = make_synthetic_dataset(kToyTrain, o, 1);
  const auto test_set = make_synthetic_dataset(kToyTest, o, 2);
  MDNConfig c;
  c.feature_channels = feature_channels(o);
  c.hidden = 16;
  const MDNModel init = init_model(c, 7);
  TrainConfig tc;
  tc.epochs = 20;
  tc.lr = 2.5e-4;
  tc.extra_samples = 600;
  tc.seed = 3;
  RefineConfig rc;

  ToyRun run;
  run.first_loss = -1.0;
  run.running_min = std::numeric_limits<double>::infinity();
  double acc = 0.0;
  std::size_t k = 0;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult res = train(init, train_set, tc, rc, [&](const TrainLogEntry& e) {
    if (run.first_loss < 0.0) run.first_loss = e.loss.total;
    run.running_min = std::min(run.running_min, e.loss.total);
    acc += e.loss.total;
    if (++k % kToyTrain == 0) {
      run.epoch_means.push_back(acc / kToyTrain);
      acc = 0.0;
    }
  });
  run.train_seconds = seconds_since(t0);
  write_bytes(dir / "train_log.csv", train_log_csv(res.log));
  save_checkpoint(res.model, dir / "model.mdn");

  std::string report = "id,coarse_cd,iter1_cd,iter2_cd,iter3_cd\r\n";
  for (const auto& s : test_set) {
    RefinementEval e = evaluate_refinement(res.model, s, rc, 5);
    report += s.id + "," + format_double(e.coarse_cd);
    for (double v : e.iteration_cd) report += "," + format_double(v);
    report += "\r\n";
    for (std::size_t it = 0; it < e.meshes.size(); ++it) {
      const fs::path p = dir / (s.id + "_iter" + std::to_string(it + 1) + ".obj");
      save_obj(e.meshes[it], p);
      try {
        const TriangleMesh back = load_obj(p);
        validate_mesh(back);
        MDN_CHECK(back.faces == s.coarse_mesh.faces, ErrorCode::kInvalidFile, p.string() + ": topology changed");
        for (const auto& v : back.vertices) {
          MDN_CHECK(v.allFinite(), ErrorCode::kNonFinite, p.string() + ": non-finite vertex");
        }
      } catch (const Error& err) {
        run.meshes_valid = false;
        run.mesh_problem = err.what();
      }
    }
    if (e.meshes.size() != 3) {
      run.meshes_valid = false;
      run.mesh_problem = s.id + ": " + std::to_string(e.meshes.size()) + " meshes";
    }
    run.evals.push_back(std::move(e));
  }
  write_bytes(dir / "refinement.csv", report);

  // Coarse input at the edge of the noise range: sigma 0.02 and a 0.05 shift.
  std::string robust = "id,coarse_cd,refined_cd\r\n";
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const auto& s = test_set[i];
    std::mt19937_64 rng(derive_seed(9, {i}));
    const Vec3 shift = 0.05 * detail::random_direction(rng);
    const TriangleMesh coarse = perturb_coarse(s.gt_mesh, 0.02, shift, o.coarse_smooth_steps, rng());
    RefinementEval e = evaluate_refinement(res.model, s, rc, 5, &coarse);
    robust += s.id + "," + format_double(e.coarse_cd) + "," + format_double(e.iteration_cd.back()) + "\r\n";
    save_obj(e.meshes.back(), dir / (s.id + "_robust.obj"));
    run.robust.push_back(std::move(e));
  }
  write_bytes(dir / "robustness.csv", robust);
  return run;
}

Outcome criterion_training(const ToyRun& r) {
  const double ratio = r.running_min / r.first_loss;
  int better = 0;
  for (const auto& e : r.evals) better += e.iteration_cd.back() < e.coarse_cd;
  const double frac = static_cast<double>(better) / r.evals.size();
  const bool ok = ratio <= 0.5 && frac >= 0.9 && r.train_seconds <= 1800.0;
  std::string means;
  if (!r.epoch_means.empty()) {
    means = ", epoch mean " + fmt("%.3g", r.epoch_means.front()) + " -> " + fmt("%.3g", r.epoch_means.back());
  }
  return {ok, "first loss " + fmt("%.4g", r.first_loss) + ", running min " + fmt("%.4g", r.running_min) + " (ratio " +
                  fmt("%.3f", ratio) + ")" + means + "; refined < coarse on " + std::to_string(better) + "/" +
                  std::to_string(r.evals.size()) + "; training " + fmt("%.0f", r.train_seconds) + " s"};
}

Outcome criterion_iterations(const ToyRun& r) {
  double c = 0.0, it1 = 0.0, it3 = 0.0;
  for (const auto& e : r.evals) {
    c += e.coarse_cd;
    it1 += e.iteration_cd.front();
    it3 += e.iteration_cd.back();
  }
  const double n = static_cast<double>(r.evals.size());
  const bool ok = it3 <= it1 && r.meshes_valid;
  return {ok, "mean CD coarse " + fmt("%.4g", c / n) + ", iter1 " + fmt("%.4g", it1 / n) + ", iter3 " +
                  fmt("%.4g", it3 / n) + ", meshes " + (r.meshes_valid ? "valid" : "invalid: " + r.mesh_problem)};
}

Outcome criterion_robustness(const ToyRun& r) {
  int better = 0;
  for (const auto& e : r.robust) better += e.iteration_cd.back() < e.coarse_cd;
  const double frac = static_cast<double>(better) / r.robust.size();
  return {frac >= 0.75, "improved " + std::to_string(better) + "/" + std::to_string(r.robust.size())};
}

Outcome criterion_determinism(const fs::path& a, const fs::path& b) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(a)) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  std::size_t differ = 0;
  std::string first;
  for (const auto& n : names) {
    if (!fs::exists(b / n) || read_bytes(a / n) != read_bytes(b / n)) {
      if (differ++ == 0) first = n;
    }
  }
  std::size_t count_b = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(b)) ++count_b;
  const bool ok = differ == 0 && count_b == names.size() && !names.empty();
  return {ok, std::to_string(names.size()) + " artifacts compared, " + std::to_string(differ) + " differ" +
                  (first.empty() ? "" : " (first: " + first + ")")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string out = "acceptance_out";
  app.add_option("--out", out, "Directory for run artifacts");
  CLI11_PARSE(app, argc, argv);
  const fs::path root(out);
  std::error_code ec;
  fs::remove_all(root, ec);
  fs::create_directories(root);

  int failures = 0;
  auto report = [&](int id, double budget_s, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double dt = seconds_since(t0);
    if (budget_s > 0.0 && dt > budget_s) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", budget_s) + " s budget";
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << o.detail << " [" << fmt("%.1f", dt)
              << " s]" << std::endl;
  };

  report(1, 10.0, criterion_geometry);
  report(2, 120.0, criterion_gradcheck);
  report(3, 0.0, criterion_soft_argmax);
  report(4, 0.0, criterion_pooling);
  report(5, 60.0, criterion_metrics);
  report(6, 60.0, criterion_pose);

  std::optional<ToyRun> first;
  auto after_toy = [&](const std::function<Outcome(const ToyRun&)>& fn) {
    return [&, fn]() -> Outcome { return first ? fn(*first) : Outcome{false, "toy run did not complete"}; };
  };
  report(7, 0.0, [&] {
    first = toy_run(root / "run_a");
    return criterion_training(*first);
  });
  report(8, 0.0, after_toy(criterion_iterations));
  report(9, 0.0, after_toy(criterion_robustness));
  report(10, 0.0, after_toy([&](const ToyRun&) {
    toy_run(root / "run_b");
    return criterion_determinism(root / "run_a", root / "run_b");
  }));

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
