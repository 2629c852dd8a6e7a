// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hqov3d/geom.hpp"
#include "hqov3d/json_io.hpp"
#include "hqov3d/scene.hpp"

namespace hqov3d {

/// A 3D pseudo-label candidate for one 2D detection, with the scores that
/// produced it and, once refined, the denoiser output.
struct Proposal {
  Box3D box;
  Category category;
  double s_geo = 0.0;
  double s_iou = 0.0;
  double s_pts = 0.0;
  double s_total = 0.0;
  double seeker_score = 0.0;
  int view = 0;
  int det_index = 0;
  int super_category = 0;
  int source_gt = -1;  // oracle provenance, -1 when unknown

  std::optional<Box3D> refined_box;
  double iou_conf = 0.0;
  double fused_score = 0.0;

  friend bool operator==(const Proposal&, const Proposal&) = default;

  /// Box used downstream: the refined box when present.
  const Box3D& final_box() const { return refined_box ? *refined_box : box; }
  /// Ranking score: fused when refined, otherwise the seeker score.
  double ranking_score() const { return refined_box ? fused_score : seeker_score; }
};

inline constexpr int kProposalsFormatVersion = 1;

inline json proposal_to_json(const Proposal& p) {
  json j{{"box", box_to_json(p.box)},
         {"category", p.category.name},
         {"super_category", p.super_category},
         {"scores", {{"geo", p.s_geo}, {"iou", p.s_iou}, {"pts", p.s_pts}, {"total", p.s_total}}},
         {"seeker_score", p.seeker_score},
         {"source", {{"view", p.view}, {"det_index", p.det_index}}}};
  if (p.source_gt >= 0) j["source"]["gt"] = p.source_gt;
  if (p.refined_box) {
    j["refined_box"] = box_to_json(*p.refined_box);
    j["iou_conf"] = p.iou_conf;
    j["fused_score"] = p.fused_score;
  }
  return j;
}

inline Proposal proposal_from_json(const json& j, const std::string& path) {
  using namespace jsonio;
  Proposal p;
  p.box = box_from_json(require(j, "box", path), join_path(path, "box"));
  p.category = find_category(string(require(j, "category", path), join_path(path, "category")));
  p.super_category = j.contains("super_category")
                         ? static_cast<int>(integer(j["super_category"], join_path(path, "super_category")))
                         : p.category.super_category;
  const std::string sp = join_path(path, "scores");
  const json& s = require(j, "scores", path);
  p.s_geo = number(require(s, "geo", sp), join_path(sp, "geo"));
  p.s_iou = number(require(s, "iou", sp), join_path(sp, "iou"));
  p.s_pts = number(require(s, "pts", sp), join_path(sp, "pts"));
  p.s_total = number(require(s, "total", sp), join_path(sp, "total"));
  p.seeker_score = number(require(j, "seeker_score", path), join_path(path, "seeker_score"));
  const std::string src = join_path(path, "source");
  const json& so = require(j, "source", path);
  p.view = static_cast<int>(integer(require(so, "view", src), join_path(src, "view")));
  p.det_index = static_cast<int>(integer(require(so, "det_index", src), join_path(src, "det_index")));
  if (so.contains("gt")) p.source_gt = static_cast<int>(integer(so["gt"], join_path(src, "gt")));
  if (j.contains("refined_box")) {
    p.refined_box = box_from_json(j["refined_box"], join_path(path, "refined_box"));
    p.iou_conf = number(require(j, "iou_conf", path), join_path(path, "iou_conf"));
    p.fused_score = number(require(j, "fused_score", path), join_path(path, "fused_score"));
  }
  return p;
}

inline json proposals_to_json(const std::vector<Proposal>& props, const json& header = nullptr,
                              const json& extra = nullptr) {
  json list = json::array();
  for (const auto& p : props) list.push_back(proposal_to_json(p));
  json doc{{"version", kProposalsFormatVersion}, {"proposals", std::move(list)}};
  if (!header.is_null()) doc["header"] = header;
  if (!extra.is_null()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) doc[it.key()] = it.value();
  }
  return doc;
}

inline std::vector<Proposal> proposals_from_json(const json& doc) {
  jsonio::check_version(doc, kProposalsFormatVersion, "proposals file");
  const json& list = jsonio::array(jsonio::require(doc, "proposals", ""), "proposals");
  std::vector<Proposal> out;
  out.reserve(list.size());
  for (std::size_t i = 0; i < list.size(); ++i) out.push_back(proposal_from_json(list[i], jsonio::index_path("proposals", i)));
  return out;
}

}  // namespace hqov3d
