// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hqov3d/errors.hpp"
#include "hqov3d/geom.hpp"
#include "hqov3d/proposal.hpp"
#include "hqov3d/scene.hpp"

// Cross-validated proposal generation: foreground extraction from 2D masks,
// per-point geometry scoring, density clustering, greedy cluster merging
// under projected-IoU consistency, and prior-guided candidate selection.
namespace hqov3d::imcv {

struct ImcvConfig {
  double dbscan_eps = 0.50;
  int dbscan_min_samples = 1;
  double r_max = 60.0;
  double alpha_pts = 0.5;
  double alpha_iou = 0.5;
  int n_sizes = 3;
  int n_yaws = 16;
  double thresh_dim_factor = 1.2;
};

inline void validate(const ImcvConfig& c) {
  if (std::abs(c.alpha_pts + c.alpha_iou - 1.0) > 1e-9) throw WeightError("imcv.alpha_pts + imcv.alpha_iou must equal 1");
  if (c.alpha_pts < 0.0 || c.alpha_iou < 0.0) throw WeightError("imcv weights must be non-negative");
  if (!(c.dbscan_eps > 0.0)) throw ConfigError("imcv.dbscan_eps must be > 0");
  if (c.dbscan_min_samples < 1) throw ConfigError("imcv.dbscan_min_samples must be >= 1");
  if (!(c.r_max > 0.0)) throw ConfigError("imcv.r_max must be > 0");
  if (c.n_yaws < 1) throw ConfigError("imcv.n_yaws must be >= 1");
  if (c.n_sizes < 1 || c.n_sizes > 3) throw ConfigError("imcv.n_sizes must be in [1, 3]");
  if (!(c.thresh_dim_factor > 0.0)) throw ConfigError("imcv.thresh_dim_factor must be > 0");
}

struct ScoredPoint {
  std::size_t index = 0;
  double s_geo = 0.0;
};

struct Cluster {
  std::vector<std::size_t> indices;  // into scene points
  double s_geo = 0.0;
  Box3D box;
  double s_iou = 0.0;
};

/// Prior with length >= width; candidate yaws sweep both orientations.
inline Size3 canonical_prior(const Category& c) {
  Size3 s = c.prior;
  if (s.width > s.length) std::swap(s.length, s.width);
  return s;
}

inline Size3 thresh_dim(const Category& c, double factor) {
  const Size3 p = canonical_prior(c);
  return {factor * p.length, factor * p.width, factor * p.height};
}

inline bool dims_below(const Size3& s, const Size3& cap) {
  const double l = std::max(s.length, s.width), w = std::min(s.length, s.width);
  return l < cap.length && w < cap.width && s.height < cap.height;
}

inline std::vector<Point3> gather(const Scene& scene, std::span<const std::size_t> idx) {
  std::vector<Point3> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(scene.points[i]);
  return out;
}

/// Projected-IoU consistency of a 3D box with the detection's 2D box.
inline double consistency_score(const Scene& scene, const Detection2D& det, const Box3D& box) {
  const auto proj = project_box3d(scene.cameras.at(static_cast<std::size_t>(det.view)), box);
  return proj ? iou_2d(*proj, det.box) : 0.0;
}

/// Indices of scene points whose projection in the detection's view lands
/// on a mask pixel.
inline std::vector<std::size_t> extract_foreground_points(const Scene& scene, const Detection2D& det) {
  std::vector<std::size_t> out;
  if (det.mask.empty()) return out;
  const CameraModel& cam = scene.cameras.at(static_cast<std::size_t>(det.view));
  for (std::size_t i = 0; i < scene.points.size(); ++i) {
    auto px = project_point(cam, scene.points[i]);
    if (px && mask_contains(det.mask, pixel_index(cam, *px))) out.push_back(i);
  }
  return out;
}

/// Raw per-point score: 1 - sqrt((x'^2 + y'^2 + r'^2) / 3).
inline double raw_geometry_score(double x_off, double y_off, double r_norm) {
  return 1.0 - std::sqrt((x_off * x_off + y_off * y_off + r_norm * r_norm) / 3.0);
}

/// Min-max normalization; all ones when the scores are constant.
inline std::vector<double> min_max_normalize(std::span<const double> raw) {
  std::vector<double> out(raw.size(), 1.0);
  if (raw.empty()) return out;
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  if (*hi > *lo) {
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - *lo) / (*hi - *lo);
  }
  return out;
}

inline std::vector<ScoredPoint> geometry_scores(const Scene& scene, const Detection2D& det,
                                                std::span<const std::size_t> fg, double r_max) {
  const CameraModel& cam = scene.cameras.at(static_cast<std::size_t>(det.view));
  const double cu = det.box.center_u(), cv = det.box.center_v();
  const double hu = 0.5 * det.box.width(), hv = 0.5 * det.box.height();
  std::vector<double> raw;
  raw.reserve(fg.size());
  for (auto i : fg) {
    const Point3& p = scene.points[i];
    const auto px = project_point_unbounded(cam, p);
    double xo = 1.0, yo = 1.0;
    if (px) {
      xo = std::clamp((px->u - cu) / hu, -1.0, 1.0);
      yo = std::clamp((px->v - cv) / hv, -1.0, 1.0);
    }
    const double r = std::clamp(std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z) / r_max, 0.0, 1.0);
    raw.push_back(raw_geometry_score(xo, yo, r));
  }
  const auto norm = min_max_normalize(raw);
  std::vector<ScoredPoint> out;
  out.reserve(fg.size());
  for (std::size_t k = 0; k < fg.size(); ++k) out.push_back({fg[k], norm[k]});
  return out;
}

/// DBSCAN over 3D coordinates. Returns cluster ids per input point (-1 for
/// noise); ids are assigned in order of first discovery.
inline std::vector<int> dbscan(std::span<const Point3> pts, double eps, int min_samples) {
  const std::size_t n = pts.size();
  std::vector<int> label(n, -2);  // -2 unvisited, -1 noise
  const double eps2 = eps * eps;
  auto cell_of = [&](const Point3& p) {
    return std::array<std::int64_t, 3>{static_cast<std::int64_t>(std::floor(p.x / eps)),
                                       static_cast<std::int64_t>(std::floor(p.y / eps)),
                                       static_cast<std::int64_t>(std::floor(p.z / eps))};
  };
  auto key = [](std::int64_t x, std::int64_t y, std::int64_t z) {
    return static_cast<std::uint64_t>((x * 73856093) ^ (y * 19349663) ^ (z * 83492791));
  };
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> grid;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = cell_of(pts[i]);
    grid[key(c[0], c[1], c[2])].push_back(i);
  }
  auto neighbors = [&](std::size_t i) {
    std::vector<std::size_t> out;
    const auto c = cell_of(pts[i]);
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = grid.find(key(c[0] + dx, c[1] + dy, c[2] + dz));
          if (it == grid.end()) continue;
          for (auto j : it->second) {
            const double ddx = pts[i].x - pts[j].x, ddy = pts[i].y - pts[j].y, ddz = pts[i].z - pts[j].z;
            if (ddx * ddx + ddy * ddy + ddz * ddz <= eps2) out.push_back(j);
          }
        }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  };

  int next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] != -2) continue;
    auto nb = neighbors(i);
    if (static_cast<int>(nb.size()) < min_samples) {
      label[i] = -1;
      continue;
    }
    const int id = next++;
    label[i] = id;
    std::vector<std::size_t> frontier(nb.begin(), nb.end());
    for (std::size_t f = 0; f < frontier.size(); ++f) {
      const std::size_t j = frontier[f];
      if (label[j] == -1) label[j] = id;  // border point
      if (label[j] != -2) continue;
      label[j] = id;
      auto nb2 = neighbors(j);
      if (static_cast<int>(nb2.size()) >= min_samples) frontier.insert(frontier.end(), nb2.begin(), nb2.end());
    }
  }
  return label;
}

/// Clusters the scored foreground points and attaches S_geo (share of the
/// total geometry score mass), a fitted box and its projected-IoU score.
inline std::vector<Cluster> cluster_points(const Scene& scene, const Detection2D& det,
                                           std::span<const ScoredPoint> scored, double eps, int min_samples) {
  std::vector<Point3> pts;
  pts.reserve(scored.size());
  for (const auto& s : scored) pts.push_back(scene.points[s.index]);
  const auto label = dbscan(pts, eps, min_samples);
  const int k = label.empty() ? 0 : *std::max_element(label.begin(), label.end()) + 1;
  std::vector<Cluster> clusters(static_cast<std::size_t>(std::max(k, 0)));
  std::vector<double> mass(clusters.size(), 0.0);
  // Noise points belong to no cluster, so they stay out of the total too.
  double total = 0.0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    if (label[i] < 0) continue;
    clusters[static_cast<std::size_t>(label[i])].indices.push_back(scored[i].index);
    mass[static_cast<std::size_t>(label[i])] += scored[i].s_geo;
    total += scored[i].s_geo;
  }
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    clusters[c].s_geo = total > 0.0 ? mass[c] / total : 1.0 / static_cast<double>(clusters.size());
    clusters[c].box = fit_min_box(gather(scene, clusters[c].indices));
    clusters[c].s_iou = consistency_score(scene, det, clusters[c].box);
  }
  return clusters;
}

struct MergeResult {
  Cluster merged;
  Box3D box;
  int accepted_merges = 0;
};

/// Greedy merge in descending S_geo order. A merge is kept only when the
/// refitted box raises the projected IoU and stays under `cap` on every
/// dimension.
inline MergeResult merge_clusters(const Scene& scene, const Detection2D& det, std::vector<Cluster> clusters,
                                  const Size3& cap) {
  if (clusters.empty()) throw EmptyCluster("merge_clusters needs at least one cluster");
  std::stable_sort(clusters.begin(), clusters.end(),
                   [](const Cluster& a, const Cluster& b) { return a.s_geo > b.s_geo; });
  MergeResult res;
  res.merged = clusters.front();
  res.box = res.merged.box;
  for (std::size_t i = 1; i < clusters.size(); ++i) {
    std::vector<std::size_t> idx = res.merged.indices;
    idx.insert(idx.end(), clusters[i].indices.begin(), clusters[i].indices.end());
    const Box3D box = fit_min_box(gather(scene, idx));
    const double s_iou = consistency_score(scene, det, box);
    if (s_iou > res.merged.s_iou && dims_below(box.size, cap)) {
      res.merged.indices = std::move(idx);
      res.merged.s_geo += clusters[i].s_geo;
      res.merged.s_iou = s_iou;
      res.merged.box = box;
      res.box = box;
      ++res.accepted_merges;
    }
  }
  return res;
}

/// Candidate sizes: prior, fitted, and their elementwise mean (first n).
inline std::vector<Size3> candidate_sizes(const Size3& fitted, const Size3& prior, int n_sizes) {
  std::vector<Size3> sizes{prior, fitted,
                           {0.5 * (prior.length + fitted.length), 0.5 * (prior.width + fitted.width),
                            0.5 * (prior.height + fitted.height)}};
  sizes.resize(static_cast<std::size_t>(n_sizes));
  return sizes;
}

/// Size x yaw candidate set. Each candidate's center sits on the ray from
/// the ego origin through the cluster centroid, placed so that the face
/// nearest the sensor touches the cluster's nearest point along that ray.
inline std::vector<Box3D> generate_candidates(const Box3D& fitted, std::span<const Point3> cluster, const Size3& prior,
                                              int n_sizes, int n_yaws) {
  if (cluster.empty()) throw EmptyCluster("generate_candidates needs a nonempty cluster");
  double cx = 0.0, cy = 0.0, zmin = cluster[0].z, zmax = cluster[0].z;
  for (const auto& p : cluster) {
    cx += p.x;
    cy += p.y;
    zmin = std::min(zmin, p.z);
    zmax = std::max(zmax, p.z);
  }
  cx /= static_cast<double>(cluster.size());
  cy /= static_cast<double>(cluster.size());
  const double norm = std::hypot(cx, cy);
  const Vec2 d = norm > 1e-12 ? Vec2{cx / norm, cy / norm} : Vec2{1.0, 0.0};
  const double phi = std::atan2(d.y, d.x);
  double s_near = std::numeric_limits<double>::infinity();
  for (const auto& p : cluster) s_near = std::min(s_near, p.x * d.x + p.y * d.y);

  std::vector<Box3D> out;
  for (const auto& size : candidate_sizes(fitted.size, prior, n_sizes)) {
    for (int j = 0; j < n_yaws; ++j) {
      const double yaw = kPi * j / n_yaws;
      const double half_d = 0.5 * size.length * std::abs(std::cos(yaw - phi)) +
                            0.5 * size.width * std::abs(std::sin(yaw - phi));
      const double s = s_near + half_d;
      out.push_back(Box3D{{s * d.x, s * d.y, 0.5 * (zmin + zmax)}, size, yaw});
    }
  }
  return out;
}

struct Selection {
  std::size_t index = 0;
  Box3D box;
  double s_pts = 0.0;
  double s_iou = 0.0;
  double s_total = 0.0;
};

struct CandidateScore {
  double s_pts;
  double s_iou;
  double s_total;
};

inline CandidateScore combine_scores(double s_pts, double s_iou, double alpha_pts, double alpha_iou) {
  return {s_pts, s_iou, alpha_pts * s_pts + alpha_iou * s_iou};
}

inline CandidateScore score_candidate(const Scene& scene, const Detection2D& det, const Box3D& cand,
                                      std::span<const Point3> cluster, double alpha_pts, double alpha_iou) {
  const double s_pts = cluster.empty() ? 0.0
                                       : static_cast<double>(count_points_in_box(cand, cluster)) /
                                             static_cast<double>(cluster.size());
  return combine_scores(s_pts, consistency_score(scene, det, cand), alpha_pts, alpha_iou);
}

/// Index of the best score: highest total, then higher S_IoU, then lower index.
inline std::size_t select_best(std::span<const CandidateScore> scores) {
  if (scores.empty()) throw EmptyCluster("select_best needs at least one candidate");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const auto& s = scores[i];
    const auto& b = scores[best];
    if (s.s_total > b.s_total || (s.s_total == b.s_total && s.s_iou > b.s_iou)) best = i;
  }
  return best;
}

/// argmax of alpha_pts * S_pts + alpha_iou * S_IoU over the candidates.
inline Selection score_candidates(const Scene& scene, const Detection2D& det, std::span<const Box3D> candidates,
                                  std::span<const Point3> cluster, double alpha_pts, double alpha_iou) {
  if (candidates.empty()) throw EmptyCluster("score_candidates needs at least one candidate");
  std::vector<CandidateScore> scores;
  scores.reserve(candidates.size());
  for (const auto& c : candidates) scores.push_back(score_candidate(scene, det, c, cluster, alpha_pts, alpha_iou));
  const std::size_t i = select_best(scores);
  return {i, candidates[i], scores[i].s_pts, scores[i].s_iou, scores[i].s_total};
}

struct Diagnostic {
  int det_index = 0;
  int view = 0;
  std::string reason;
};

struct ImcvResult {
  std::vector<Proposal> proposals;
  std::vector<Diagnostic> skipped;
  std::vector<int> cluster_counts;  // per detection, 0 when skipped
};

inline ImcvResult run_imcv(const Scene& scene, std::span<const Detection2D> detections, const ImcvConfig& cfg) {
  validate(cfg);
  ImcvResult res;
  for (std::size_t n = 0; n < detections.size(); ++n) {
    const Detection2D& det = detections[n];
    const auto fg = extract_foreground_points(scene, det);
    if (fg.empty()) {
      res.skipped.push_back({static_cast<int>(n), det.view, "empty foreground"});
      res.cluster_counts.push_back(0);
      continue;
    }
    const auto scored = geometry_scores(scene, det, fg, cfg.r_max);
    auto clusters = cluster_points(scene, det, scored, cfg.dbscan_eps, cfg.dbscan_min_samples);
    res.cluster_counts.push_back(static_cast<int>(clusters.size()));
    if (clusters.empty()) {
      res.skipped.push_back({static_cast<int>(n), det.view, "no clusters"});
      continue;
    }
    const auto merged = merge_clusters(scene, det, std::move(clusters), thresh_dim(det.category, cfg.thresh_dim_factor));
    const auto pts = gather(scene, merged.merged.indices);
    const auto cands = generate_candidates(merged.box, pts, canonical_prior(det.category), cfg.n_sizes, cfg.n_yaws);
    const auto sel = score_candidates(scene, det, cands, pts, cfg.alpha_pts, cfg.alpha_iou);

    Proposal p;
    p.box = sel.box;
    p.category = det.category;
    p.s_geo = merged.merged.s_geo;
    p.s_iou = sel.s_iou;
    p.s_pts = sel.s_pts;
    p.s_total = sel.s_total;
    p.seeker_score = det.seeker_score;
    p.view = det.view;
    p.det_index = static_cast<int>(n);
    p.super_category = det.category.super_category;
    p.source_gt = det.source_gt;
    res.proposals.push_back(std::move(p));
  }
  return res;
}

}  // namespace hqov3d::imcv
