#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdn/camera_io.hpp"
#include "mdn/checkpoint.hpp"
#include "mdn/dataset_io.hpp"
#include "mdn/error.hpp"
#include "mdn/gradcheck.hpp"
#include "mdn/metrics.hpp"
#include "mdn/obj_io.hpp"
#include "mdn/parallel.hpp"
#include "mdn/pipeline.hpp"
#include "mdn/report_io.hpp"

namespace mdn::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kResolvedConfigName = "resolved_config.toml";

// ---------------------------------------------------------------------------
// Shared plumbing

struct Common {
  std::string config;
  std::string out;
  int threads = 1;
};

inline void add_common(CLI::App* sub, Common& c) {
  // Read by expand_config before parsing; listed here for --help.
  sub->add_option("--config", c.config, "flat key = value file; keys mirror the long flag names")
      ->configurable(false);
  sub->add_option("--out", c.out, "output directory")->required();
  sub->add_option("--threads", c.threads, "worker thread cap")->check(CLI::PositiveNumber)->capture_default_str();
}

inline void prepare_output(const CLI::App& sub, const Common& c) {
  set_max_threads(static_cast<unsigned>(c.threads));
  std::error_code ec;
  fs::create_directories(c.out, ec);
  MDN_CHECK(!ec, ErrorCode::kIo, "cannot create " + c.out + ": " + ec.message());
  detail::write_text_file(fs::path(c.out) / kResolvedConfigName, sub.config_to_str(true, false));
}

inline void write_json(const fs::path& path, const Json& j) { detail::write_text_file(path, j.dump(2) + "\n"); }

inline PointCloud load_cloud(const fs::path& path) {
  PointCloud c;
  c.points = load_obj(path).vertices;
  MDN_CHECK(!c.points.empty(), ErrorCode::kInvalidFile, path.string() + ": no vertices");
  return c;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  Common common;
  std::size_t n = 8;
  DatasetOptions options;
  std::uint64_t seed = 0;
};

inline void run_gen_data(const CLI::App& sub, const GenDataArgs& a) {
  prepare_output(sub, a.common);
  validate(a.options);
  const auto samples = make_synthetic_dataset(a.n, a.options, a.seed);
  save_dataset(samples, a.common.out, a.options, a.seed);
  std::printf("wrote %zu samples with %d views to %s\n", samples.size(), a.options.views, a.common.out.c_str());
}

inline void add_gen_data(CLI::App& app, GenDataArgs& a, std::function<void()>& action) {
  auto* sub = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(sub, a.common);
  sub->add_option("--n", a.n, "number of samples")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--views", a.options.views, "views per sample")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--seed", a.seed, "dataset seed")->capture_default_str();
  sub->add_option("--image-size", a.options.image_size, "rendered image side in pixels")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--subdivisions", a.options.subdivisions, "icosphere level of the shapes")
      ->check(CLI::Range(0, 6))
      ->capture_default_str();
  sub->add_option("--gt-points", a.options.gt_points, "ground-truth surface samples")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--coarse-noise", a.options.coarse_noise, "largest per-coordinate noise of coarse meshes")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  sub->add_option("--coarse-shift", a.options.coarse_shift, "largest shift of coarse meshes")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  sub->add_option("--smooth-steps", a.options.coarse_smooth_steps, "Laplacian smoothing passes for coarse meshes")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  sub->callback([sub, &a, &action] { action = [sub, &a] { run_gen_data(*sub, a); }; });
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  Common common;
  std::string data;
  std::string init;
  TrainConfig train;
  RefineConfig refine;
  int hidden = 192;
};

inline void run_train(const CLI::App& sub, const TrainArgs& a) {
  prepare_output(sub, a.common);
  const auto dataset = load_dataset(a.data);
  MDNModel model;
  if (!a.init.empty()) {
    model = load_checkpoint(a.init);
  } else {
    MDNConfig config;
    config.feature_channels = dataset.front().views.front().total_channels();
    config.hidden = a.hidden;
    config.scale = a.refine.scale;
    model = init_model(config, derive_seed(a.train.seed, {0x6d6f64656cULL}));
  }
  RefineConfig rcfg = a.refine;
  rcfg.scale = model.config.scale;
  const fs::path out(a.common.out);
  save_checkpoint(model, out / "model_init.mdn");
  const auto result = train(model, dataset, a.train, rcfg, [&](const TrainLogEntry& e) {
    if (e.step % dataset.size() == 0) {
      std::printf("epoch %d step %zu total %.6g\n", e.epoch, e.step, e.loss.total);
    }
  });
  save_checkpoint(result.model, out / "model.mdn");
  detail::write_text_file(out / "train_log.csv", train_log_csv(result.log));
  std::printf("wrote %s (%zu steps)\n", (out / "model.mdn").string().c_str(), result.log.size());
}

inline void add_train(CLI::App& app, TrainArgs& a, std::function<void()>& action) {
  auto* sub = app.add_subcommand("train", "train the deformation network");
  add_common(sub, a.common);
  sub->add_option("--data", a.data, "dataset directory")->required();
  sub->add_option("--init", a.init, "start from this checkpoint instead of a fresh model");
  sub->add_option("--epochs", a.train.epochs, "training epochs")->check(CLI::NonNegativeNumber)->capture_default_str();
  sub->add_option("--lr", a.train.lr, "Adam learning rate")->check(CLI::NonNegativeNumber)->capture_default_str();
  sub->add_option("--weight-decay", a.train.weight_decay, "decoupled weight decay")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  sub->add_option("--batch-size", a.train.batch_size, "samples per update")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--extra-samples", a.train.extra_samples, "surface samples added to the Chamfer term")
      ->capture_default_str();
  sub->add_option("--w-chamfer", a.train.weights.chamfer, "Chamfer weight")->capture_default_str();
  sub->add_option("--w-normal", a.train.weights.normal, "normal weight")->capture_default_str();
  sub->add_option("--w-edge", a.train.weights.edge, "edge weight")->capture_default_str();
  sub->add_option("--w-laplacian", a.train.weights.laplacian, "Laplacian weight")->capture_default_str();
  sub->add_option("--seed", a.train.seed, "run seed")->capture_default_str();
  sub->add_option("--hidden", a.hidden, "hidden width of a fresh model")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--scale", a.refine.scale, "hypothesis scale of a fresh model")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--iterations", a.refine.iterations, "refinement passes per sample")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--views", a.refine.views, "views drawn per sample (0 = all)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  sub->callback([sub, &a, &action] { action = [sub, &a] { run_train(*sub, a); }; });
}

// ---------------------------------------------------------------------------
// refine

struct RefineArgs {
  Common common;
  std::string model;
  std::string coarse;
  std::vector<std::string> views;
  int iterations = 3;
};

inline void run_refine(const CLI::App& sub, const RefineArgs& a) {
  prepare_output(sub, a.common);
  const MDNModel model = load_checkpoint(a.model);
  const TriangleMesh coarse = load_obj(a.coarse);
  std::vector<FeatureStack> views;
  for (const auto& v : a.views) views.push_back(load_view(v));
  for (std::size_t i = 0; i < views.size(); ++i) {
    const int F = views[i].total_channels();
    MDN_CHECK(F == model.config.feature_channels, ErrorCode::kConfiguration,
              "feature dimension mismatch: checkpoint " + a.model + " expects F=" +
                  std::to_string(model.config.feature_channels) + ", view file " + a.views[i] + " has F=" +
                  std::to_string(F));
  }
  RefineConfig rcfg;
  rcfg.iterations = a.iterations;
  rcfg.scale = model.config.scale;
  const auto meshes = refine(model, coarse, views, rcfg);
  for (std::size_t k = 0; k < meshes.size(); ++k) {
    const fs::path p = fs::path(a.common.out) / ("refined_iter" + std::to_string(k + 1) + ".obj");
    save_obj(meshes[k], p);
    std::printf("wrote %s\n", p.string().c_str());
  }
}

inline void add_refine(CLI::App& app, RefineArgs& a, std::function<void()>& action) {
  auto* sub = app.add_subcommand("refine", "refine a coarse mesh");
  add_common(sub, a.common);
  sub->add_option("--model", a.model, "checkpoint")->required();
  sub->add_option("--coarse", a.coarse, "coarse OBJ mesh")->required();
  sub->add_option("--views", a.views, "view feature files (.mvfm); cameras are read from the matching .cam.json")
      ->required();
  sub->add_option("--iterations", a.iterations, "refinement passes")->check(CLI::PositiveNumber)->capture_default_str();
  sub->callback([sub, &a, &action] { action = [sub, &a] { run_refine(*sub, a); }; });
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  Common common;
  std::vector<std::string> pred;
  std::vector<std::string> gt;
  EvalOptions options;
};

inline void run_eval(const CLI::App& sub, const EvalArgs& a) {
  MDN_CHECK(a.pred.size() == a.gt.size(), ErrorCode::kInvalidArgument,
            "--pred and --gt need the same number of files (" + std::to_string(a.pred.size()) + " vs " +
                std::to_string(a.gt.size()) + ")");
  prepare_output(sub, a.common);
  std::vector<EvalReport> reports;
  for (std::size_t i = 0; i < a.pred.size(); ++i) {
    const TriangleMesh pred = load_obj(a.pred[i]);
    const TriangleMesh gt = load_obj(a.gt[i]);
    try {
      reports.push_back(evaluate(pred, gt, a.options, a.pred[i]));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kPrecondition) throw;
      throw Error(ErrorCode::kPrecondition, "refusing --iou for " + a.pred[i] + " / " + a.gt[i] + ": " + e.what());
    }
  }
  Json j;
  j["tau"] = a.options.tau;
  j["reports"] = Json::array();
  for (const auto& r : reports) j["reports"].push_back(eval_report_json(r));
  j["mean"] = eval_report_json(mean_report(reports));
  const fs::path out(a.common.out);
  write_json(out / "eval.json", j);
  detail::write_text_file(out / "eval.csv", eval_reports_csv(reports));
  const EvalReport m = mean_report(reports);
  std::printf("cd %.6g fscore(tau) %.4g fscore(2tau) %.4g\n", m.cd, m.fscore_tau, m.fscore_2tau);
}

inline void add_eval(CLI::App& app, EvalArgs& a, std::function<void()>& action) {
  auto* sub = app.add_subcommand("eval", "compare predicted and ground-truth meshes");
  add_common(sub, a.common);
  sub->add_option("--pred", a.pred, "predicted OBJ meshes")->required();
  sub->add_option("--gt", a.gt, "ground-truth OBJ meshes, paired with --pred")->required();
  sub->add_flag("--iou", a.options.iou, "also estimate volumetric IoU (needs watertight meshes)");
  sub->add_option("--seed", a.options.seed, "sampling seed")->capture_default_str();
  sub->add_option("--samples", a.options.samples, "surface samples per mesh")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--tau", a.options.tau, "F-score threshold on squared distance")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--iou-samples", a.options.iou_samples, "volume samples for IoU")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->callback([sub, &a, &action] { action = [sub, &a] { run_eval(*sub, a); }; });
}

// ---------------------------------------------------------------------------
// pose-eval and pose-fit

struct PoseEntry {
  std::string id;
  Pose pred;
  Pose gt;
};

inline Json pose_report_json(const std::vector<PoseEntry>& entries, const Intrinsics& k, const PointCloud& points) {
  Json j;
  j["thresholds"] = {{"acc2d_px", kAcc2dThresholdPx}, {"add3d_fraction", kAdd3dFraction}};
  j["reference_image_size"] = {kReferenceImageSize, kReferenceImageSize};
  j["intrinsics"] = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
  j["poses"] = Json::array();
  std::size_t acc2d = 0, add3d = 0, with_d2d = 0;
  double sum2 = 0.0, sum3 = 0.0;
  for (const auto& e : entries) {
    const PoseMetrics m = pose_metrics(e.pred, e.gt, k, points);
    Json row;
    row["id"] = e.id;
    row["d2d"] = m.d2d_available ? Json(m.d2d) : Json(nullptr);
    row["d3d"] = m.d3d;
    row["acc2d_hit"] = m.acc2d_hit;
    row["add3d_hit"] = m.add3d_hit;
    row["diameter"] = m.diameter;
    j["poses"].push_back(row);
    acc2d += m.acc2d_hit;
    add3d += m.add3d_hit;
    sum3 += m.d3d;
    if (m.d2d_available) {
      sum2 += m.d2d;
      ++with_d2d;
    }
  }
  const double n = static_cast<double>(entries.size());
  j["summary"] = {{"count", entries.size()},
                  {"acc2d_percent", 100.0 * static_cast<double>(acc2d) / n},
                  {"add3d_percent", 100.0 * static_cast<double>(add3d) / n},
                  {"mean_d2d", with_d2d ? Json(sum2 / static_cast<double>(with_d2d)) : Json(nullptr)},
                  {"mean_d3d", sum3 / n}};
  return j;
}

inline std::string pose_report_csv(const Json& report) {
  std::string out = "id,d2d,d3d,acc2d_hit,add3d_hit,acc2d_threshold_px,add3d_threshold_fraction\r\n";
  for (const auto& r : report["poses"]) {
    out += csv_field(r["id"].get<std::string>()) + "," +
           (r["d2d"].is_null() ? std::string() : format_double(r["d2d"].get<double>())) + "," +
           format_double(r["d3d"].get<double>()) + "," + (r["acc2d_hit"].get<bool>() ? "1" : "0") + "," +
           (r["add3d_hit"].get<bool>() ? "1" : "0") + "," + format_double(kAcc2dThresholdPx) + "," +
           format_double(kAdd3dFraction) + "\r\n";
  }
  return out;
}

inline void write_pose_report(const fs::path& out, const Json& report) {
  write_json(out / "pose_report.json", report);
  detail::write_text_file(out / "pose_report.csv", pose_report_csv(report));
  const auto& s = report["summary"];
  std::printf("Acc2D %.2f%% (< %g px)  ADD3D %.2f%% (< %g%% of diameter)  mean d3D %.6g\n",
              s["acc2d_percent"].get<double>(), kAcc2dThresholdPx, s["add3d_percent"].get<double>(),
              100.0 * kAdd3dFraction, s["mean_d3d"].get<double>());
}

// {"intrinsics": {...}, "poses": [{"id": ..., "pred": pose, "gt": pose}, ...]}
inline std::pair<Intrinsics, std::vector<PoseEntry>> load_pose_pairs(const fs::path& path) {
  const Json j = detail::read_json_file(path);
  const std::string where = path.string();
  const Intrinsics k = parse_intrinsics(detail::require_field(j, "intrinsics", where), where + " intrinsics");
  const Json& list = detail::require_field(j, "poses", where);
  MDN_CHECK(list.is_array() && !list.empty(), ErrorCode::kInvalidFile, where + ": \"poses\" must be a non-empty array");
  std::vector<PoseEntry> out;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const std::string ew = where + " poses[" + std::to_string(i) + "]";
    PoseEntry e;
    e.id = list[i].value("id", std::to_string(i));
    e.pred = parse_pose(detail::require_field(list[i], "pred", ew), ew + ".pred");
    e.gt = parse_pose(detail::require_field(list[i], "gt", ew), ew + ".gt");
    out.push_back(std::move(e));
  }
  return {k, std::move(out)};
}

struct PoseEvalArgs {
  Common common;
  std::string canonical;
  std::string poses;
};

inline void run_pose_eval(const CLI::App& sub, const PoseEvalArgs& a) {
  prepare_output(sub, a.common);
  const PointCloud cloud = load_cloud(a.canonical);
  const auto [k, entries] = load_pose_pairs(a.poses);
  write_pose_report(a.common.out, pose_report_json(entries, k, cloud));
}

inline void add_pose_eval(CLI::App& app, PoseEvalArgs& a, std::function<void()>& action) {
  auto* sub = app.add_subcommand("pose-eval", "score predicted camera poses against ground truth");
  add_common(sub, a.common);
  sub->add_option("--canonical", a.canonical, "canonical point cloud (OBJ vertices)")->required();
  sub->add_option("--poses", a.poses, "JSON with intrinsics and pred/gt pose pairs")->required();
  sub->callback([sub, &a, &action] { action = [sub, &a] { run_pose_eval(*sub, a); }; });
}

struct PoseFitArgs {
  Common common;
  std::size_t synthetic = 0;
  std::uint64_t seed = 0;
  std::string canonical;
  std::string observed;
  std::string gt;
  int steps = 500;
  double lr = 0.5;
};

inline Json pose7d_json(const Pose7D& p) {
  Json j = pose_to_json(pose_from_7d(p));
  j["rot6"] = p.rot6;
  j["tz"] = p.tz;
  return j;
}

inline void run_pose_fit(const CLI::App& sub, const PoseFitArgs& a) {
  const fs::path out(a.common.out);
  if (a.synthetic > 0) {
    prepare_output(sub, a.common);
    std::vector<PoseEntry> entries;
    Json fits = Json::array();
    Json report;
    for (std::size_t i = 0; i < a.synthetic; ++i) {
      const PoseInstance inst = synthetic_pose_instance(derive_seed(a.seed, {i}));
      const PoseFitResult fit = fit_pose(inst.canonical, inst.observed, default_pose_init(inst.observed), a.steps, a.lr);
      // Metrics are taken on each instance's own cloud.
      const Json one = pose_report_json({{std::to_string(i), pose_from_7d(fit.params), pose_from_7d(inst.gt)}},
                                        reference_intrinsics(), inst.canonical);
      Json row = one["poses"][0];
      row["loss"] = fit.loss;
      fits.push_back(row);
    }
    std::size_t acc2d = 0, add3d = 0, with_d2d = 0;
    double sum2 = 0.0, sum3 = 0.0;
    for (const auto& r : fits) {
      acc2d += r["acc2d_hit"].get<bool>();
      add3d += r["add3d_hit"].get<bool>();
      if (!r["d2d"].is_null()) {
        sum2 += r["d2d"].get<double>();
        ++with_d2d;
      }
      sum3 += r["d3d"].get<double>();
    }
    const double n = static_cast<double>(fits.size());
    const Intrinsics k = reference_intrinsics();
    report["thresholds"] = {{"acc2d_px", kAcc2dThresholdPx}, {"add3d_fraction", kAdd3dFraction}};
    report["reference_image_size"] = {kReferenceImageSize, kReferenceImageSize};
    report["intrinsics"] = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width},
                            {"height", k.height}};
    report["seed"] = a.seed;
    report["poses"] = fits;
    report["summary"] = {{"count", fits.size()},
                         {"acc2d_percent", 100.0 * static_cast<double>(acc2d) / n},
                         {"add3d_percent", 100.0 * static_cast<double>(add3d) / n},
                         {"mean_d2d", with_d2d ? Json(sum2 / static_cast<double>(with_d2d)) : Json(nullptr)},
                         {"mean_d3d", sum3 / n}};
    write_pose_report(out, report);
    return;
  }
  MDN_CHECK(!a.canonical.empty() && !a.observed.empty(), ErrorCode::kInvalidArgument,
            "pose-fit needs --synthetic N or both --canonical and --observed");
  prepare_output(sub, a.common);
  const PointCloud canonical = load_cloud(a.canonical);
  const PointCloud observed = load_cloud(a.observed);
  MDN_CHECK(canonical.size() == observed.size(), ErrorCode::kInvalidArgument,
            "canonical and observed clouds differ in size (" + std::to_string(canonical.size()) + " vs " +
                std::to_string(observed.size()) + ")");
  const PoseFitResult fit = fit_pose(canonical, observed, default_pose_init(observed), a.steps, a.lr);
  Json j = pose7d_json(fit.params);
  j["loss"] = fit.loss;
  j["initial_loss"] = fit.initial_loss;
  j["ill_conditioned"] = fit.ill_conditioned;
  write_json(out / "fitted_pose.json", j);
  std::printf("loss %.6g -> %.6g\n", fit.initial_loss, fit.loss);
  if (!a.gt.empty()) {
    const CameraView gt = load_camera(a.gt);
    write_pose_report(out, pose_report_json({{"fit", pose_from_7d(fit.params), gt.pose}}, gt.intrinsics, canonical));
  }
}

inline void add_pose_fit(CLI::App& app, PoseFitArgs& a, std::function<void()>& action) {
  auto* sub = app.add_subcommand("pose-fit", "recover a 7D pose by gradient descent");
  add_common(sub, a.common);
  sub->add_option("--synthetic", a.synthetic, "fit this many seeded synthetic instances")->capture_default_str();
  sub->add_option("--seed", a.seed, "seed of the synthetic instances")->capture_default_str();
  sub->add_option("--canonical", a.canonical, "canonical point cloud (OBJ vertices)");
  sub->add_option("--observed", a.observed, "camera-frame points matched by index (OBJ vertices)");
  sub->add_option("--gt", a.gt, "ground-truth camera JSON for a metric report");
  sub->add_option("--steps", a.steps, "gradient steps")->check(CLI::NonNegativeNumber)->capture_default_str();
  sub->add_option("--lr", a.lr, "step size")->check(CLI::NonNegativeNumber)->capture_default_str();
  sub->callback([sub, &a, &action] { action = [sub, &a] { run_pose_fit(*sub, a); }; });
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  Common common;
  GradcheckOptions options;
};

inline Json gradcheck_json(const GradcheckOptions& o, const std::vector<GradcheckRow>& rows) {
  Json j;
  j["seed"] = o.seed;
  j["step"] = o.step;
  j["tolerance"] = o.tolerance;
  j["rows"] = Json::array();
  bool pass = true;
  for (const auto& r : rows) {
    j["rows"].push_back({{"op", r.op}, {"max_rel_error", r.max_rel_error}, {"entries", r.entries}, {"pass", r.pass}});
    pass = pass && r.pass;
  }
  j["pass"] = pass;
  return j;
}

inline bool run_gradcheck(const CLI::App& sub, const GradcheckArgs& a) {
  prepare_output(sub, a.common);
  const auto rows = run_gradchecks(a.options);
  const Json j = gradcheck_json(a.options, rows);
  write_json(fs::path(a.common.out) / "gradcheck.json", j);
  std::printf("%-20s %-14s %-8s %s\n", "op", "max_rel_error", "entries", "status");
  for (const auto& r : rows) {
    std::printf("%-20s %-14.3e %-8zu %s\n", r.op.c_str(), r.max_rel_error, r.entries, r.pass ? "pass" : "FAIL");
  }
  return j["pass"].get<bool>();
}

inline void add_gradcheck(CLI::App& app, GradcheckArgs& a, std::function<void()>& action, bool& failed) {
  auto* sub = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  add_common(sub, a.common);
  sub->add_option("--seed", a.options.seed, "instance seed")->capture_default_str();
  sub->add_option("--step", a.options.step, "finite-difference step")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--tolerance", a.options.tolerance, "largest accepted relative error")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--corrupt-op", a.options.corrupt_op, "scale this operation's adjoint (negative control)");
  sub->callback([sub, &a, &action, &failed] { action = [sub, &a, &failed] { failed = !run_gradcheck(*sub, a); }; });
}

// ---------------------------------------------------------------------------

/// Splices the `key = value` lines of a subcommand's --config file into the
/// arguments ahead of the command-line flags. Keys also given as flags are
/// skipped, so flags win.
inline std::vector<std::string> expand_config(const CLI::App& app, std::vector<std::string> args) {
  if (args.size() < 2) return args;
  const CLI::App* sub = app.get_subcommand_no_throw(args[1]);
  if (sub == nullptr) return args;
  std::string path;
  std::set<std::string> given;
  for (std::size_t i = 2; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0) continue;
    const auto eq = a.find('=');
    const std::string name = a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
    given.insert(name);
    if (name == "config") path = eq != std::string::npos ? a.substr(eq + 1) : (i + 1 < args.size() ? args[i + 1] : "");
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw CLI::FileError::Missing(path);
  std::vector<std::string> extra;
  for (const auto& item : CLI::ConfigTOML().from_config(in)) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (!item.parents.empty() && !(item.parents.size() == 1 && item.parents[0] == sub->get_name())) {
      throw CLI::ConfigError(path + ": section '" + item.parents.front() + "' does not belong to " + sub->get_name());
    }
    if (given.count(item.name) != 0) continue;
    const CLI::Option* opt = sub->get_option_no_throw("--" + item.name);
    if (opt == nullptr || item.name == "config") {
      throw CLI::ConfigError(path + ": unknown key '" + item.name + "' for " + sub->get_name());
    }
    if (item.inputs.size() == 1 && item.inputs[0].empty()) continue;
    if (opt->get_expected_max() == 0) {
      extra.push_back("--" + item.name + "=" + (item.inputs.empty() ? "true" : item.inputs.front()));
    } else {
      extra.push_back("--" + item.name);
      extra.insert(extra.end(), item.inputs.begin(), item.inputs.end());
    }
  }
  args.insert(args.begin() + 2, extra.begin(), extra.end());
  return args;
}

/// Parses and runs one command. Returns the process exit code.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"Multi-view mesh deformation toolkit"};
  app.require_subcommand(1);
  std::function<void()> action;
  bool failed = false;
  GenDataArgs gen;
  TrainArgs tr;
  RefineArgs rf;
  EvalArgs ev;
  PoseEvalArgs pe;
  PoseFitArgs pf;
  GradcheckArgs gc;
  add_gen_data(app, gen, action);
  add_train(app, tr, action);
  add_refine(app, rf, action);
  add_eval(app, ev, action);
  add_pose_eval(app, pe, action);
  add_pose_fit(app, pf, action);
  add_gradcheck(app, gc, action, failed);
  try {
    const auto args = expand_config(app, std::vector<std::string>(argv, argv + argc));
    std::vector<const char*> ptrs;
    for (const auto& a : args) ptrs.push_back(a.c_str());
    app.parse(static_cast<int>(ptrs.size()), ptrs.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  try {
    if (action) action();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return failed ? kExitFailure : kExitOk;
}

}  // namespace mdn::cli
