// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hqov3d/errors.hpp"
#include "hqov3d/geom.hpp"
#include "hqov3d/json_io.hpp"
#include "hqov3d/proposal.hpp"
#include "hqov3d/scene.hpp"

namespace hqov3d::eval {

enum class Criterion { kIou, kCenterDistance };

struct MatchCriterion {
  Criterion kind = Criterion::kIou;
  double iou_threshold = 0.25;
  double center_threshold = 2.0;  // meters, BEV distance

  friend bool operator==(const MatchCriterion&, const MatchCriterion&) = default;
};

struct ScoredBox {
  Box3D box;
  std::string category;
  double score = 0.0;
};

struct MatchPair {
  std::size_t pred = 0;
  std::size_t gt = 0;
  double iou = 0.0;

  friend bool operator==(const MatchPair&, const MatchPair&) = default;
};

struct MatchResult {
  std::vector<MatchPair> pairs;  // in descending prediction score order
  std::vector<std::size_t> unmatched_predictions;
  std::vector<std::size_t> unmatched_gt;
};

/// Prediction indices by descending score; equal scores keep input order.
inline std::vector<std::size_t> score_order(std::span<const ScoredBox> preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  return order;
}

/// Greedy matching in descending score order: each prediction takes the best
/// still-unmatched gt of its category that meets the criterion. Ties go to
/// the lower gt index.
inline MatchResult match(std::span<const ScoredBox> preds, std::span<const ScoredBox> gts, const MatchCriterion& crit) {
  MatchResult res;
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t pi : score_order(preds)) {
    const ScoredBox& p = preds[pi];
    std::optional<std::size_t> best;
    double best_key = 0.0, best_iou = 0.0;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (taken[gi] || gts[gi].category != p.category) continue;
      const double iou = iou_3d(p.box, gts[gi].box);
      double key = 0.0;
      if (crit.kind == Criterion::kIou) {
        if (iou < crit.iou_threshold || iou <= 0.0) continue;
        key = iou;
      } else {
        const double d = std::hypot(p.box.center.x - gts[gi].box.center.x, p.box.center.y - gts[gi].box.center.y);
        if (d > crit.center_threshold) continue;
        key = -d;
      }
      if (!best || key > best_key) {
        best = gi;
        best_key = key;
        best_iou = iou;
      }
    }
    if (best) {
      taken[*best] = true;
      res.pairs.push_back({pi, *best, best_iou});
    } else {
      res.unmatched_predictions.push_back(pi);
    }
  }
  for (std::size_t gi = 0; gi < gts.size(); ++gi) {
    if (!taken[gi]) res.unmatched_gt.push_back(gi);
  }
  return res;
}

struct PrPoint {
  double score = 0.0;
  bool tp = false;
  double precision = 0.0;
  double recall = 0.0;
};

/// Precision-recall curve for score-sorted detections flagged TP/FP.
inline std::vector<PrPoint> pr_curve(std::vector<std::pair<double, bool>> dets, std::size_t n_gt) {
  std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<PrPoint> curve;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].second) ++tp;
    curve.push_back({dets[i].first, dets[i].second, static_cast<double>(tp) / static_cast<double>(i + 1),
                     n_gt ? static_cast<double>(tp) / static_cast<double>(n_gt) : 0.0});
  }
  return curve;
}

/// All-points interpolation: precision is replaced by its running maximum
/// from the right, and the area under that envelope is integrated with the
/// trapezoid rule starting at recall 0.
inline double average_precision(const std::vector<PrPoint>& curve, std::size_t n_gt) {
  if (n_gt == 0 || curve.empty()) return 0.0;
  std::vector<double> env(curve.size());
  double run = 0.0;
  for (std::size_t i = curve.size(); i-- > 0;) {
    run = std::max(run, curve[i].precision);
    env[i] = run;
  }
  double area = 0.0, prev_r = 0.0, prev_p = env[0];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    area += (curve[i].recall - prev_r) * 0.5 * (prev_p + env[i]);
    prev_r = curve[i].recall;
    prev_p = env[i];
  }
  return std::clamp(area, 0.0, 1.0);
}

struct ErrorStats {
  std::size_t count = 0;
  double center_mean = 0.0, center_median = 0.0;
  double size_mean = 0.0, size_median = 0.0;
  double yaw_mean_deg = 0.0, yaw_median_deg = 0.0;
};

/// min(|d|, pi - |d|) in degrees with d the yaw difference modulo pi.
inline double yaw_error_deg(double a, double b) {
  const double d = wrap_half_turn(a - b);
  return std::min(d, kPi - d) * 180.0 / kPi;
}

struct BoxError {
  double center = 0.0;
  double size = 0.0;
  double yaw_deg = 0.0;
};

/// Center L2 distance, mean per-axis relative size error, and yaw error
/// folded modulo a half turn, on canonicalized boxes.
inline BoxError box_error(const Box3D& pred, const Box3D& gt) {
  const Box3D p = canonical_box(pred), g = canonical_box(gt);
  BoxError e;
  e.center = std::sqrt((p.center.x - g.center.x) * (p.center.x - g.center.x) +
                       (p.center.y - g.center.y) * (p.center.y - g.center.y) +
                       (p.center.z - g.center.z) * (p.center.z - g.center.z));
  e.size = (std::abs(p.size.length - g.size.length) / g.size.length + std::abs(p.size.width - g.size.width) / g.size.width +
            std::abs(p.size.height - g.size.height) / g.size.height) /
           3.0;
  e.yaw_deg = yaw_error_deg(p.yaw, g.yaw);
  return e;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline ErrorStats box_error_stats(std::span<const BoxError> errs) {
  ErrorStats s;
  s.count = errs.size();
  if (errs.empty()) return s;
  std::vector<double> c, z, y;
  for (const auto& e : errs) {
    c.push_back(e.center);
    z.push_back(e.size);
    y.push_back(e.yaw_deg);
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  s.center_mean = mean(c);
  s.center_median = median(c);
  s.size_mean = mean(z);
  s.size_median = median(z);
  s.yaw_mean_deg = mean(y);
  s.yaw_median_deg = median(y);
  return s;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct EvalConfig {
  MatchCriterion criterion;
  int histogram_bins = 10;

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct CategoryMetrics {
  std::string name;
  bool is_base = false;
  double ap = 0.0;
  std::size_t n_gt = 0;
  std::size_t n_pred = 0;
  std::size_t n_tp = 0;
  std::vector<PrPoint> curve;
};

struct MetricsReport {
  std::vector<CategoryMetrics> categories;  // only categories with gt present
  double map_base = 0.0;
  double map_novel = 0.0;
  double map_overall = 0.0;
  ErrorStats errors;                 // over matched pairs
  std::vector<std::size_t> iou_histogram;  // per-proposal IoU with its reference gt
  double mean_iou = 0.0;             // per-proposal IoU with its reference gt
  std::size_t n_proposals = 0;
};

/// IoU of a proposal with its oracle gt when known, else with the best gt of
/// the same category in the scene.
inline double reference_iou(const Proposal& p, const Scene& scene) {
  const Box3D& b = p.final_box();
  if (p.source_gt >= 0 && static_cast<std::size_t>(p.source_gt) < scene.gt.size()) {
    return iou_3d(b, scene.gt[static_cast<std::size_t>(p.source_gt)].box);
  }
  double best = 0.0;
  for (const auto& g : scene.gt) {
    if (g.category.name == p.category.name) best = std::max(best, iou_3d(b, g.box));
  }
  return best;
}

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Per-scene matching pooled across scenes into per-category AP, mAP over
/// the base, novel and overall sets, and box-error statistics.
inline MetricsReport evaluate(std::span<const Scene> scenes, std::span<const std::vector<Proposal>> proposals,
                              const EvalConfig& cfg) {
  if (scenes.size() != proposals.size()) {
    throw ValidationError("eval: " + std::to_string(scenes.size()) + " scenes but " +
                          std::to_string(proposals.size()) + " proposal sets");
  }
  if (cfg.histogram_bins < 1) throw ConfigError("eval.histogram_bins must be >= 1");
  std::map<std::string, std::vector<std::pair<double, bool>>> dets;
  std::map<std::string, std::size_t> n_gt;
  std::vector<BoxError> errors;
  std::vector<double> ious;
  MetricsReport rep;
  rep.iou_histogram.assign(static_cast<std::size_t>(cfg.histogram_bins), 0);

  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const Scene& scene = scenes[s];
    std::vector<ScoredBox> preds, gts;
    for (const auto& p : proposals[s]) preds.push_back({p.final_box(), p.category.name, p.ranking_score()});
    for (const auto& g : scene.gt) {
      gts.push_back({g.box, g.category.name, 1.0});
      ++n_gt[g.category.name];
    }
    const MatchResult m = match(preds, gts, cfg.criterion);
    std::vector<bool> tp(preds.size(), false);
    for (const auto& pr : m.pairs) {
      tp[pr.pred] = true;
      errors.push_back(box_error(preds[pr.pred].box, gts[pr.gt].box));
    }
    for (std::size_t i = 0; i < preds.size(); ++i) dets[preds[i].category].push_back({preds[i].score, tp[i]});
    for (const auto& p : proposals[s]) {
      const double iou = reference_iou(p, scene);
      ious.push_back(iou);
      const auto bin = std::min(static_cast<std::size_t>(iou * cfg.histogram_bins), rep.iou_histogram.size() - 1);
      ++rep.iou_histogram[bin];
    }
  }

  std::vector<double> ap_base, ap_novel, ap_all;
  for (const auto& cat : category_table()) {
    const std::size_t ng = n_gt.count(cat.name) ? n_gt[cat.name] : 0;
    if (ng == 0) continue;
    CategoryMetrics cm;
    cm.name = cat.name;
    cm.is_base = cat.is_base;
    cm.n_gt = ng;
    auto& d = dets[cat.name];
    cm.n_pred = d.size();
    cm.n_tp = static_cast<std::size_t>(std::count_if(d.begin(), d.end(), [](const auto& e) { return e.second; }));
    cm.curve = pr_curve(d, ng);
    cm.ap = average_precision(cm.curve, ng);
    (cat.is_base ? ap_base : ap_novel).push_back(cm.ap);
    ap_all.push_back(cm.ap);
    rep.categories.push_back(std::move(cm));
  }
  rep.map_base = mean_of(ap_base);
  rep.map_novel = mean_of(ap_novel);
  rep.map_overall = mean_of(ap_all);
  rep.errors = box_error_stats(errors);
  rep.mean_iou = mean_of(ious);
  rep.n_proposals = ious.size();
  return rep;
}

inline constexpr int kReportFormatVersion = 1;

inline json to_json(const ErrorStats& e) {
  return json{{"count", e.count},
              {"center_m", {{"mean", e.center_mean}, {"median", e.center_median}}},
              {"size_rel", {{"mean", e.size_mean}, {"median", e.size_median}}},
              {"yaw_deg", {{"mean", e.yaw_mean_deg}, {"median", e.yaw_median_deg}}}};
}

inline json report_to_json(const MetricsReport& r, const EvalConfig& cfg, const json& header = nullptr) {
  json cats = json::array();
  for (const auto& c : r.categories) {
    cats.push_back(json{{"name", c.name},
                        {"split", c.is_base ? "base" : "novel"},
                        {"ap", c.ap},
                        {"n_gt", c.n_gt},
                        {"n_pred", c.n_pred},
                        {"n_tp", c.n_tp}});
  }
  json edges = json::array();
  for (int i = 0; i <= cfg.histogram_bins; ++i) edges.push_back(static_cast<double>(i) / cfg.histogram_bins);
  json crit = cfg.criterion.kind == Criterion::kIou
                  ? json{{"kind", "iou"}, {"threshold", cfg.criterion.iou_threshold}}
                  : json{{"kind", "center_distance"}, {"threshold", cfg.criterion.center_threshold}};
  json doc{{"version", kReportFormatVersion},
           {"criterion", std::move(crit)},
           {"categories", std::move(cats)},
           {"map", {{"base", r.map_base}, {"novel", r.map_novel}, {"overall", r.map_overall}}},
           {"errors", to_json(r.errors)},
           {"iou_histogram", {{"edges", std::move(edges)}, {"counts", r.iou_histogram}}},
           {"mean_iou", r.mean_iou},
           {"n_proposals", r.n_proposals}};
  if (!header.is_null()) doc["header"] = header;
  return doc;
}

inline std::string format_table(const MetricsReport& r) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-22s %-6s %8s %6s %6s %6s\n", "category", "split", "AP", "gt", "pred", "tp");
  os << line;
  for (const auto& c : r.categories) {
    std::snprintf(line, sizeof line, "%-22s %-6s %8.4f %6zu %6zu %6zu\n", c.name.c_str(), c.is_base ? "base" : "novel",
                  c.ap, c.n_gt, c.n_pred, c.n_tp);
    os << line;
  }
  std::snprintf(line, sizeof line, "mAP base %.4f  novel %.4f  overall %.4f\n", r.map_base, r.map_novel, r.map_overall);
  os << line;
  std::snprintf(line, sizeof line, "mean IoU %.4f over %zu proposals\n", r.mean_iou, r.n_proposals);
  os << line;
  std::snprintf(line, sizeof line, "matched %zu: center %.3f/%.3f m  size %.3f/%.3f  yaw %.2f/%.2f deg (mean/median)\n",
                r.errors.count, r.errors.center_mean, r.errors.center_median, r.errors.size_mean, r.errors.size_median,
                r.errors.yaw_mean_deg, r.errors.yaw_median_deg);
  os << line;
  return os.str();
}

inline std::string pr_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "category,rank,score,tp,precision,recall\n";
  char line[160];
  for (const auto& c : r.categories) {
    for (std::size_t i = 0; i < c.curve.size(); ++i) {
      const auto& p = c.curve[i];
      std::snprintf(line, sizeof line, "%s,%zu,%.17g,%d,%.17g,%.17g\n", c.name.c_str(), i, p.score, p.tp ? 1 : 0,
                    p.precision, p.recall);
      os << line;
    }
  }
  return os.str();
}

}  // namespace hqov3d::eval
