#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "mdn/camera_io.hpp"
#include "mdn/metrics.hpp"
#include "mdn/pipeline.hpp"

namespace mdn {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// RFC 4180 field: quoted when it contains a comma, quote or line break.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline Json eval_report_json(const EvalReport& r) {
  Json j;
  j["id"] = r.id;
  j["cd"] = r.cd;
  j["fscore_tau"] = r.fscore_tau;
  j["fscore_2tau"] = r.fscore_2tau;
  j["iou"] = r.iou ? Json(*r.iou) : Json(nullptr);
  j["samples"] = r.samples;
  j["iou_samples"] = r.iou_samples;
  j["seed"] = r.seed;
  return j;
}

/// Mean of every numeric field over the reports; iou only when all have it.
inline EvalReport mean_report(const std::vector<EvalReport>& reports) {
  MDN_CHECK(!reports.empty(), ErrorCode::kInvalidArgument, "no reports to average");
  EvalReport m;
  m.id = "mean";
  bool all_iou = true;
  double iou = 0.0;
  for (const auto& r : reports) {
    m.cd += r.cd;
    m.fscore_tau += r.fscore_tau;
    m.fscore_2tau += r.fscore_2tau;
    all_iou = all_iou && r.iou.has_value();
    if (r.iou) iou += *r.iou;
  }
  const double n = static_cast<double>(reports.size());
  m.cd /= n;
  m.fscore_tau /= n;
  m.fscore_2tau /= n;
  if (all_iou) m.iou = iou / n;
  m.samples = reports.front().samples;
  m.iou_samples = reports.front().iou_samples;
  m.seed = reports.front().seed;
  return m;
}

/// One row per report followed by a mean row.
inline std::string eval_reports_csv(const std::vector<EvalReport>& reports) {
  std::string out = "id,cd,fscore_tau,fscore_2tau,iou,samples,seed\r\n";
  auto row = [&](const EvalReport& r) {
    out += csv_field(r.id) + "," + format_double(r.cd) + "," + format_double(r.fscore_tau) + "," +
           format_double(r.fscore_2tau) + "," + (r.iou ? format_double(*r.iou) : std::string()) + "," +
           std::to_string(r.samples) + "," + std::to_string(r.seed) + "\r\n";
  };
  for (const auto& r : reports) row(r);
  row(mean_report(reports));
  return out;
}

inline std::string train_log_csv(const std::vector<TrainLogEntry>& log) {
  std::string out = "step,chamfer,normal,edge,laplacian,total\r\n";
  for (const auto& e : log) {
    out += std::to_string(e.step) + "," + format_double(e.loss.chamfer) + "," + format_double(e.loss.normal) +
           "," + format_double(e.loss.edge) + "," + format_double(e.loss.laplacian) + "," +
           format_double(e.loss.total) + "\r\n";
  }
  return out;
}

inline Json loss_breakdown_json(const LossBreakdown& b) {
  return {{"chamfer", b.chamfer}, {"normal", b.normal}, {"edge", b.edge}, {"laplacian", b.laplacian},
          {"total", b.total}};
}

}  // namespace mdn
