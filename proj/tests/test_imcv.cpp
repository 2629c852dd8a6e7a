// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"
#include "hqov3d/imcv.hpp"
#include "oracles.hpp"

using namespace hqov3d;
using namespace hqov3d::imcv;

namespace {

Scene single_object_scene(const std::string& category, const Box3D& box) {
  SceneConfig c;
  c.seed = 77;
  c.fixed_objects = {{category, box}};
  return generate_scene(c);
}

std::vector<Cluster> clusters_for(const Scene& s, const Detection2D& d, const ImcvConfig& cfg = {}) {
  const auto fg = extract_foreground_points(s, d);
  return cluster_points(s, d, geometry_scores(s, d, fg, cfg.r_max), cfg.dbscan_eps, cfg.dbscan_min_samples);
}

}  // namespace

TEST(Foreground, NoiselessIsolatedObjectGivesItsVisiblePoints) {
  SceneConfig c;
  c.clutter_points = 0;
  c.fixed_objects = {{"car", Box3D{{12, 0, 0.87}, {4.63, 1.97, 1.74}, 0.3}}};
  const Scene s = generate_scene(c);
  const auto dets = oracle_seek(s, {});
  ASSERT_EQ(dets.size(), 1u);
  const auto& cam = s.cameras[static_cast<std::size_t>(dets[0].view)];
  std::vector<std::size_t> want;
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    if (project_point(cam, s.points[i])) want.push_back(i);
  }
  EXPECT_EQ(extract_foreground_points(s, dets[0]), want);
}

TEST(Foreground, EmptyMaskGivesNothing) {
  const Scene s = single_object_scene("car", Box3D{{12, 0, 0.87}, {4.63, 1.97, 1.74}, 0.3});
  Detection2D d = oracle_seek(s, {}).at(0);
  d.mask.clear();
  EXPECT_TRUE(extract_foreground_points(s, d).empty());
}

TEST(Foreground, LeakedMaskMatchesPerPointProjection) {
  SceneConfig c;
  c.seed = 5;
  c.counts = {{"car", 2}, {"pedestrian", 3}};
  const Scene s = generate_scene(c);
  SeekerNoiseConfig n;
  n.leak_point_frac = 0.5;
  n.mask_erode_dilate_px = 2;
  int with_clutter = 0;
  for (const auto& d : oracle_seek(s, n)) {
    const auto& cam = s.cameras[static_cast<std::size_t>(d.view)];
    std::vector<std::size_t> want;
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      const auto px = project_point(cam, s.points[i]);
      if (!px) continue;
      const auto idx = static_cast<std::uint32_t>(static_cast<int>(px->v) * cam.image_width + static_cast<int>(px->u));
      if (std::binary_search(d.mask.begin(), d.mask.end(), idx)) want.push_back(i);
    }
    const auto got = extract_foreground_points(s, d);
    EXPECT_EQ(got, want);
    for (auto i : got) with_clutter += s.labels[i] == kClutterLabel;
  }
  EXPECT_GT(with_clutter, 0);
}

TEST(GeometryScore, ExtremesAndMinMax) {
  EXPECT_DOUBLE_EQ(raw_geometry_score(0, 0, 0), 1.0);
  EXPECT_NEAR(raw_geometry_score(1, 1, 1), 0.0, 1e-15);
  const std::vector<double> raw{0.2, 0.5, 0.8};
  const auto n = min_max_normalize(raw);
  EXPECT_NEAR(n[0], 0.0, 1e-15);
  EXPECT_NEAR(n[1], 0.5, 1e-15);
  EXPECT_NEAR(n[2], 1.0, 1e-15);
  EXPECT_EQ(min_max_normalize(std::vector<double>{0.3, 0.3}), (std::vector<double>{1.0, 1.0}));
}

TEST(GeometryScore, OrderingSurvivesConsistentScaling) {
  std::mt19937_64 rng(3);
  std::vector<std::array<double, 3>> in(50);
  for (auto& v : in) v = {fixture::uni(rng, -1, 1), fixture::uni(rng, -1, 1), fixture::uni(rng, 0, 1)};
  auto ranks = [&](double k) {
    std::vector<double> raw;
    for (const auto& v : in) raw.push_back(raw_geometry_score(k * v[0], k * v[1], k * v[2]));
    const auto n = min_max_normalize(raw);
    std::vector<std::size_t> order(n.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return n[a] < n[b]; });
    return order;
  };
  EXPECT_EQ(ranks(1.0), ranks(0.5));
}

TEST(GeometryScore, CenterPointAtOriginScoresHighest) {
  const Scene s = single_object_scene("car", Box3D{{12, 0, 0.87}, {4.63, 1.97, 1.74}, 0.3});
  const auto d = oracle_seek(s, {}).at(0);
  const auto fg = extract_foreground_points(s, d);
  const auto scored = geometry_scores(s, d, fg, 60.0);
  double lo = 1, hi = 0;
  for (const auto& p : scored) lo = std::min(lo, p.s_geo), hi = std::max(hi, p.s_geo);
  EXPECT_DOUBLE_EQ(lo, 0.0);
  EXPECT_DOUBLE_EQ(hi, 1.0);
}

TEST(Dbscan, TwoDistantGroups) {
  std::vector<Point3> pts;
  for (int i = 0; i < 10; ++i) pts.push_back({0.1 * i, 0, 0});
  for (int i = 0; i < 10; ++i) pts.push_back({10 + 0.1 * i, 0, 0});
  const auto l = dbscan(pts, 0.5, 1);
  EXPECT_EQ(*std::max_element(l.begin(), l.end()), 1);
  for (int i = 0; i < 10; ++i) {
    EXPECT_EQ(l[static_cast<std::size_t>(i)], 0);
    EXPECT_EQ(l[static_cast<std::size_t>(i) + 10], 1);
  }
}

TEST(Dbscan, ChainIsOneClusterWithFullShare) {
  // A dense surface grid: every point has a neighbor well within eps.
  const Box3D car{{12, 0, 0.87}, {4.63, 1.97, 1.74}, 0.3};
  Scene s = fixture::empty_scene({{car, find_category("car")}});
  s.points = fixture::visible_surface(car, 0.1);
  s.labels.assign(s.points.size(), 0);
  const auto d = fixture::oracle_detection(s, 0, fixture::facing_camera(s, car.center));
  const auto cl = clusters_for(s, d);
  ASSERT_EQ(cl.size(), 1u);
  EXPECT_NEAR(cl[0].s_geo, 1.0, 1e-12);
}

TEST(Dbscan, MatchesUnionFindOracle) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<Point3> pts;
    const int n = 50 + trial * 5;
    for (int i = 0; i < n; ++i) pts.push_back({fixture::uni(rng, -4, 4), fixture::uni(rng, -4, 4), fixture::uni(rng, -0.5, 0.5)});
    const double eps = fixture::uni(rng, 0.3, 0.9);
    const int min_samples = 1 + trial % 4;
    const auto got = dbscan(pts, eps, min_samples);
    const auto core = oracle::core_components(pts, eps, min_samples);
    std::vector<int> got_core(pts.size(), -1);
    for (std::size_t i = 0; i < pts.size(); ++i) got_core[i] = core[i] >= 0 ? got[i] : -1;
    EXPECT_EQ(oracle::canonical_labels(got_core), oracle::canonical_labels(core)) << "trial " << trial;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (core[i] >= 0) continue;
      bool near_core = false, label_ok = got[i] == -1;
      for (std::size_t j = 0; j < pts.size(); ++j) {
        if (core[j] < 0 || !oracle::within(pts[i], pts[j], eps)) continue;
        near_core = true;
        label_ok = label_ok || got[i] == got[j];
      }
      if (near_core) {
        EXPECT_TRUE(label_ok && got[i] >= 0) << "border point " << i;
      } else {
        EXPECT_EQ(got[i], -1) << "noise point " << i;
      }
    }
  }
}

TEST(ClusterShares, SumToOneOnNoisyDetections) {
  SeekerNoiseConfig n;
  n.leak_point_frac = 0.3;
  n.mask_erode_dilate_px = 1;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    SceneConfig c;
    c.seed = seed;
    c.counts = {{"car", 3}, {"bus", 1}, {"pedestrian", 3}, {"barrier", 2}};
    const Scene s = generate_scene(c);
    for (const auto& d : oracle_seek(s, n)) {
      for (int min_samples : {1, 3}) {
        ImcvConfig cfg;
        cfg.dbscan_min_samples = min_samples;
        const auto cl = clusters_for(s, d, cfg);
        if (cl.empty()) continue;
        double sum = 0;
        for (const auto& k : cl) sum += k.s_geo;
        EXPECT_NEAR(sum, 1.0, 1e-9);
      }
    }
  }
}

TEST(Merge, SingleClusterIsUnchanged) {
  const Scene s = single_object_scene("car", Box3D{{12, 0, 0.87}, {4.63, 1.97, 1.74}, 0.3});
  const auto d = oracle_seek(s, {}).at(0);
  const auto cl = clusters_for(s, d);
  const auto m = merge_clusters(s, d, cl, thresh_dim(d.category, 1.2));
  EXPECT_EQ(m.accepted_merges, 0);
  EXPECT_EQ(m.box, cl[0].box);
  EXPECT_EQ(m.merged.indices, cl[0].indices);
  EXPECT_THROW(merge_clusters(s, d, {}, thresh_dim(d.category, 1.2)), EmptyCluster);
}

TEST(Merge, SplitObjectMergeNeverLowersConsistency) {
  int merged = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto f = fixture::split_object(seed, false);
    const auto cl = clusters_for(f.scene, f.det);
    ASSERT_GE(cl.size(), 2u) << "seed " << seed;
    double best_single = 0, top_share = -1, top_iou = 0;
    for (const auto& k : cl) {
      best_single = std::max(best_single, k.s_iou);
      if (k.s_geo > top_share) top_share = k.s_geo, top_iou = k.s_iou;
    }
    const auto m = merge_clusters(f.scene, f.det, cl, thresh_dim(f.det.category, 1.2));
    EXPECT_GE(m.merged.s_iou, top_iou);
    EXPECT_GE(m.merged.s_iou, best_single) << "seed " << seed;
    merged += m.accepted_merges > 0;
  }
  EXPECT_GT(merged, 10);
}

TEST(Merge, OversizeMergeIsRejected) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto f = fixture::split_object(seed, true);
    const auto cap = thresh_dim(f.det.category, 1.2);
    const auto m = merge_clusters(f.scene, f.det, clusters_for(f.scene, f.det), cap);
    EXPECT_TRUE(dims_below(m.box.size, cap)) << "seed " << seed;
    for (auto i : m.merged.indices) EXPECT_NE(f.scene.labels[i], kClutterLabel) << "seed " << seed;
  }
}

TEST(Candidates, Cardinality) {
  const std::vector<Point3> pts{{10, 0, 0.5}, {10.5, 0.5, 1.0}};
  const Box3D fitted = fit_min_box(pts);
  const Size3 prior{4.63, 1.97, 1.74};
  EXPECT_EQ(generate_candidates(fitted, pts, prior, 1, 1).size(), 1u);
  EXPECT_EQ(generate_candidates(fitted, pts, prior, 3, 16).size(), 48u);
}

TEST(Candidates, PriorSizedCandidateSnapsToNearestPoint) {
  const Box3D car{{14, 3, 0.87}, {4.63, 1.97, 1.74}, 0.5};
  std::vector<Point3> pts = fixture::visible_surface(car, 0.1);
  const auto cands = generate_candidates(fit_min_box(pts), pts, car.size, 3, 16);
  double cx = 0, cy = 0;
  for (const auto& p : pts) cx += p.x, cy += p.y;
  const double nrm = std::hypot(cx, cy);
  const double dx = cx / nrm, dy = cy / nrm;
  double nearest = INFINITY;
  for (const auto& p : pts) nearest = std::min(nearest, p.x * dx + p.y * dy);
  for (int j = 0; j < 16; ++j) {
    const Box3D& b = cands[static_cast<std::size_t>(j)];
    EXPECT_EQ(b.size, car.size);
    double near_face = INFINITY;
    for (const auto& c : box_corners(b)) near_face = std::min(near_face, c.x * dx + c.y * dy);
    EXPECT_NEAR(near_face, nearest, 0.05);
  }
  // Some prior-sized candidate overlaps the true box substantially.
  double best = 0.0;
  for (int j = 0; j < 16; ++j) best = std::max(best, iou_3d(cands[static_cast<std::size_t>(j)], car));
  EXPECT_GT(best, 0.5);
}

TEST(Selector, WeightedSumArithmetic) {
  const std::vector<CandidateScore> s{combine_scores(0.9, 0.5, 0.5, 0.5), combine_scores(0.6, 0.9, 0.5, 0.5)};
  EXPECT_NEAR(s[0].s_total, 0.70, 1e-15);
  EXPECT_NEAR(s[1].s_total, 0.75, 1e-15);
  EXPECT_EQ(select_best(s), 1u);
}

TEST(Selector, TiesPreferHigherConsistencyThenLowerIndex) {
  const std::vector<CandidateScore> s{{1.0, 0.2, 0.6}, {0.2, 1.0, 0.6}, {0.2, 1.0, 0.6}};
  EXPECT_EQ(select_best(s), 1u);
}

TEST(Selector, DegenerateWeights) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto f = fixture::split_object(seed, false, 0.0);
    const auto cl = clusters_for(f.scene, f.det);
    const auto m = merge_clusters(f.scene, f.det, cl, thresh_dim(f.det.category, 1.2));
    const auto pts = gather(f.scene, m.merged.indices);
    auto cands = generate_candidates(m.box, pts, canonical_prior(f.det.category), 3, 16);
    Box3D all = m.box;
    all.size = {all.size.length + 0.01, all.size.width + 0.01, all.size.height + 0.01};
    cands.push_back(all);  // contains every cluster point
    const auto by_pts = score_candidates(f.scene, f.det, cands, pts, 1.0, 0.0);
    EXPECT_DOUBLE_EQ(by_pts.s_pts, 1.0);
    const auto by_iou = score_candidates(f.scene, f.det, cands, pts, 0.0, 1.0);
    double best = 0;
    for (const auto& c : cands) best = std::max(best, oracle::projected_iou(f.scene.cameras[static_cast<std::size_t>(f.det.view)], c, f.det.box));
    EXPECT_DOUBLE_EQ(by_iou.s_iou, best);
  }
}

TEST(Selector, AgreesWithExhaustiveRescoring) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto f = fixture::split_object(seed, seed % 2 == 0);
    const auto m = merge_clusters(f.scene, f.det, clusters_for(f.scene, f.det), thresh_dim(f.det.category, 1.2));
    const auto pts = gather(f.scene, m.merged.indices);
    const auto cands = generate_candidates(m.box, pts, canonical_prior(f.det.category), 3, 16);
    const auto& cam = f.scene.cameras[static_cast<std::size_t>(f.det.view)];
    for (double a : {0.0, 0.5, 1.0}) {
      const auto sel = score_candidates(f.scene, f.det, cands, pts, a, 1.0 - a);
      const auto ref = oracle::rescore(cam, f.det.box, cands, pts, a, 1.0 - a);
      EXPECT_NEAR(sel.s_total, ref.best_total, 1e-12);
      EXPECT_NEAR(ref.totals[sel.index], ref.best_total, 1e-12);
    }
  }
}

TEST(RunImcv, EmptyDetectionsGiveNothing) {
  const Scene s = single_object_scene("car", Box3D{{12, 0, 0.87}, {4.63, 1.97, 1.74}, 0.3});
  const auto r = run_imcv(s, {}, {});
  EXPECT_TRUE(r.proposals.empty());
  EXPECT_TRUE(r.skipped.empty());
}

TEST(RunImcv, NoiselessSingleObjectIsRecovered) {
  const Box3D truth{{12, 0, 0.87}, {4.63, 1.97, 1.74}, 0.3};
  const Scene s = single_object_scene("car", truth);
  const auto dets = oracle_seek(s, {});
  const auto r = run_imcv(s, dets, {});
  ASSERT_EQ(r.proposals.size(), 1u);
  EXPECT_GE(iou_3d(r.proposals[0].box, s.gt[0].box), 0.7);
  EXPECT_EQ(r.proposals[0].category.name, "car");
  EXPECT_EQ(r.proposals[0].source_gt, 0);
}

TEST(RunImcv, FullDropoutGivesNoProposalsAndNoDiagnostics) {
  SceneConfig c;
  c.counts = {{"car", 3}};
  const Scene s = generate_scene(c);
  SeekerNoiseConfig n;
  n.dropout_prob = 1.0;
  const auto r = run_imcv(s, oracle_seek(s, n), {});
  EXPECT_TRUE(r.proposals.empty());
  EXPECT_TRUE(r.skipped.empty());
}

TEST(RunImcv, EmptyMaskIsReportedAsSkipped) {
  const Scene s = single_object_scene("car", Box3D{{12, 0, 0.87}, {4.63, 1.97, 1.74}, 0.3});
  auto dets = oracle_seek(s, {});
  dets[0].mask.clear();
  const auto r = run_imcv(s, dets, {});
  EXPECT_TRUE(r.proposals.empty());
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_EQ(r.skipped[0].det_index, 0);
}

TEST(RunImcv, RejectsBadConfig) {
  ImcvConfig c;
  c.alpha_pts = 0.7;
  const Scene s = single_object_scene("car", Box3D{{12, 0, 0.87}, {4.63, 1.97, 1.74}, 0.3});
  EXPECT_THROW(run_imcv(s, {}, c), WeightError);
  c = {};
  c.dbscan_eps = 0.0;
  EXPECT_THROW(run_imcv(s, {}, c), ConfigError);
}

TEST(ProposalsFile, RoundTripIsExact) {
  SceneConfig c;
  c.counts = {{"car", 3}, {"truck", 1}};
  const Scene s = generate_scene(c);
  auto props = run_imcv(s, oracle_seek(s, {}), {}).proposals;
  ASSERT_FALSE(props.empty());
  props[0].refined_box = Box3D{{1, 2, 3}, {4, 5, 6}, 0.1};
  props[0].iou_conf = 0.25;
  props[0].fused_score = 0.5;
  EXPECT_EQ(proposals_from_json(json::parse(proposals_to_json(props).dump())), props);
}
