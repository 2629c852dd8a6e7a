// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hqov3d/errors.hpp"
#include "hqov3d/geom.hpp"
#include "hqov3d/json_io.hpp"
#include "hqov3d/rng.hpp"

namespace hqov3d {

// ---------------------------------------------------------------------------
// Categories
// ---------------------------------------------------------------------------

inline constexpr int kNumSuperCategories = 5;

struct Category {
  std::string name;
  Size3 prior;
  int super_category = 0;
  bool is_base = false;

  friend bool operator==(const Category&, const Category&) = default;
};

/// Fixed category table: size priors, super-category grouping and the
/// base/novel split.
inline const std::vector<Category>& category_table() {
  static const std::vector<Category> table{
      {"car", {4.63, 1.97, 1.74}, 0, true},
      {"truck", {6.93, 2.51, 2.84}, 0, false},
      {"construction_vehicle", {6.37, 2.85, 3.19}, 0, true},
      {"bus", {10.50, 2.94, 3.47}, 1, false},
      {"trailer", {12.29, 2.90, 3.87}, 1, true},
      {"barrier", {0.50, 2.53, 0.98}, 2, true},
      {"motorcycle", {2.11, 0.77, 1.47}, 3, false},
      {"bicycle", {1.70, 0.60, 1.28}, 3, true},
      {"pedestrian", {0.73, 0.67, 1.77}, 4, true},
      {"traffic_cone", {0.41, 0.41, 1.07}, 4, false},
  };
  return table;
}

inline const Category* try_find_category(std::string_view name) {
  for (const auto& c : category_table()) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

inline const Category& find_category(std::string_view name) {
  if (const auto* c = try_find_category(name)) return *c;
  throw UnknownCategory("unknown category '" + std::string(name) + "'");
}

inline std::vector<std::string> category_names(bool base, bool novel) {
  std::vector<std::string> out;
  for (const auto& c : category_table()) {
    if ((c.is_base && base) || (!c.is_base && novel)) out.push_back(c.name);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene
// ---------------------------------------------------------------------------

struct GtObject {
  Box3D box;
  Category category;

  friend bool operator==(const GtObject&, const GtObject&) = default;
};

inline constexpr std::int32_t kClutterLabel = -1;

struct Scene {
  std::vector<Point3> points;
  // Index of the gt object that generated each point, kClutterLabel for ground.
  std::vector<std::int32_t> labels;
  std::vector<GtObject> gt;
  std::vector<CameraModel> cameras;
  std::uint64_t seed = 0;

  friend bool operator==(const Scene&, const Scene&) = default;
};

struct CameraRigConfig {
  int count = 6;
  double hfov_deg = 90.0;
  int image_width = 1600;
  int image_height = 900;
  double mount_height = 1.6;
};

inline std::vector<CameraModel> make_camera_rig(const CameraRigConfig& rig) {
  std::vector<CameraModel> cams;
  for (int i = 0; i < rig.count; ++i) {
    const double yaw = 2.0 * kPi * i / rig.count;
    cams.push_back(make_camera(yaw, rig.hfov_deg * kPi / 180.0, rig.image_width, rig.image_height,
                               {0.0, 0.0, rig.mount_height}));
  }
  return cams;
}

struct PlacedObject {
  std::string category;
  Box3D box;
};

struct SceneConfig {
  double half_extent = 40.0;  // world is [-e, e] x [-e, e]
  double min_range = 4.0;
  double max_range = 38.0;
  std::map<std::string, int> counts;
  std::vector<PlacedObject> fixed_objects;
  double point_density = 3000.0;  // surface points per m^2 at 1 m range
  int clutter_points = 3000;
  double clutter_max_z = 0.1;
  bool occlusion = true;
  double size_jitter = 0.1;  // per-axis relative size variation around the prior
  double sensor_height = 1.8;
  CameraRigConfig rig;
  std::uint64_t seed = 0;
};

namespace detail {

// Slab test of the open segment a->b against a box, ignoring hits within
// `margin` of either endpoint (parameter space).
inline bool segment_hits_box(const Point3& a, const Point3& b, const Box3D& box, double margin = 1e-6) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  auto local = [&](const Point3& p) {
    const double dx = p.x - box.center.x, dy = p.y - box.center.y;
    return std::array<double, 3>{c * dx + s * dy, -s * dx + c * dy, p.z - box.center.z};
  };
  const auto la = local(a), lb = local(b);
  const std::array<double, 3> half{0.5 * box.size.length, 0.5 * box.size.width, 0.5 * box.size.height};
  double t0 = margin, t1 = 1.0 - margin;
  for (int k = 0; k < 3; ++k) {
    const double d = lb[k] - la[k];
    if (std::abs(d) < 1e-15) {
      if (std::abs(la[k]) > half[k]) return false;
      continue;
    }
    double ta = (-half[k] - la[k]) / d;
    double tb = (half[k] - la[k]) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  return true;
}

inline bool box_inside_extent(const Box3D& b, double e) {
  for (const auto& v : box_bev_polygon(b)) {
    if (std::abs(v.x) > e || std::abs(v.y) > e) return false;
  }
  return true;
}

struct Face {
  Point3 center;
  Point3 normal;
  Point3 axis_u;  // half-extent vectors spanning the face
  Point3 axis_v;
  double area;
};

inline std::array<Face, 6> box_faces(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const Point3 ex{c, s, 0.0}, ey{-s, c, 0.0}, ez{0.0, 0.0, 1.0};
  const double hl = 0.5 * b.size.length, hw = 0.5 * b.size.width, hh = 0.5 * b.size.height;
  auto scale = [](const Point3& v, double k) { return Point3{v.x * k, v.y * k, v.z * k}; };
  auto add = [](const Point3& p, const Point3& v) { return Point3{p.x + v.x, p.y + v.y, p.z + v.z}; };
  const Point3& o = b.center;
  return {{
      {add(o, scale(ex, hl)), ex, scale(ey, hw), scale(ez, hh), b.size.width * b.size.height},
      {add(o, scale(ex, -hl)), scale(ex, -1.0), scale(ey, hw), scale(ez, hh), b.size.width * b.size.height},
      {add(o, scale(ey, hw)), ey, scale(ex, hl), scale(ez, hh), b.size.length * b.size.height},
      {add(o, scale(ey, -hw)), scale(ey, -1.0), scale(ex, hl), scale(ez, hh), b.size.length * b.size.height},
      {add(o, scale(ez, hh)), ez, scale(ex, hl), scale(ey, hw), b.size.length * b.size.width},
      {add(o, scale(ez, -hh)), scale(ez, -1.0), scale(ex, hl), scale(ey, hw), b.size.length * b.size.width},
  }};
}

inline Box3D inflate(const Box3D& b, double margin) {
  Box3D out = b;
  out.size.length += 2.0 * margin;
  out.size.width += 2.0 * margin;
  out.size.height += 2.0 * margin;
  return out;
}

}  // namespace detail

inline void validate_scene_config(const SceneConfig& cfg) {
  if (!(cfg.point_density > 0.0)) throw ConfigError("scene.point_density must be > 0");
  if (cfg.clutter_points < 0) throw ConfigError("scene.clutter_points must be >= 0");
  if (!(cfg.half_extent > 0.0)) throw ConfigError("scene.half_extent must be > 0");
  if (!(cfg.min_range >= 0.0) || !(cfg.max_range > cfg.min_range)) {
    throw ConfigError("scene ranges must satisfy 0 <= min_range < max_range");
  }
  if (cfg.size_jitter < 0.0 || cfg.size_jitter >= 1.0) throw ConfigError("scene.size_jitter must be in [0, 1)");
  for (const auto& [name, n] : cfg.counts) {
    find_category(name);
    if (n < 0) throw ConfigError("scene.counts." + name + " must be >= 0");
  }
  if (cfg.rig.count < 1) throw ConfigError("scene.rig.count must be >= 1");
}

/// Builds a synthetic scene: non-overlapping gt boxes, range-dependent
/// surface sampling of the faces that face the sensor, optional occlusion
/// culling and uniform ground clutter. Deterministic in `cfg.seed`.
inline Scene generate_scene(const SceneConfig& cfg) {
  validate_scene_config(cfg);
  Rng rng(derive_seed(cfg.seed, {0x5ce9e}));
  Scene scene;
  scene.seed = cfg.seed;
  scene.cameras = make_camera_rig(cfg.rig);

  auto overlaps = [&](const Box3D& b) {
    for (const auto& g : scene.gt) {
      if (bev_intersection_area(b, g.box) > 0.0) return true;
    }
    return false;
  };

  // Long boxes near the minimum range could otherwise swallow the sensor.
  auto covers_ego = [](const Box3D& b) {
    return point_in_box(detail::inflate(b, 1.0), {0.0, 0.0, b.center.z});
  };

  for (const auto& fixed : cfg.fixed_objects) {
    const Category& cat = find_category(fixed.category);
    if (!detail::box_inside_extent(fixed.box, cfg.half_extent) || overlaps(fixed.box)) {
      throw PlacementFailure("fixed object of category '" + fixed.category + "' overlaps or leaves the world extent");
    }
    scene.gt.push_back({make_box(fixed.box.center, fixed.box.size, fixed.box.yaw), cat});
  }

  for (const auto& cat : category_table()) {
    auto it = cfg.counts.find(cat.name);
    const int count = it == cfg.counts.end() ? 0 : it->second;
    for (int i = 0; i < count; ++i) {
      bool placed = false;
      for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        const double r = uniform(rng, cfg.min_range, cfg.max_range);
        const double az = uniform(rng, -kPi, kPi);
        const double yaw = uniform(rng, -kPi, kPi);
        const double j = cfg.size_jitter;
        const Size3 size{cat.prior.length * uniform(rng, 1.0 - j, 1.0 + j),
                         cat.prior.width * uniform(rng, 1.0 - j, 1.0 + j),
                         cat.prior.height * uniform(rng, 1.0 - j, 1.0 + j)};
        const Box3D box = make_box({r * std::cos(az), r * std::sin(az), 0.5 * size.height}, size, yaw);
        if (!detail::box_inside_extent(box, cfg.half_extent) || overlaps(box) || covers_ego(box)) continue;
        scene.gt.push_back({box, cat});
        placed = true;
      }
      if (!placed) {
        throw PlacementFailure("could not place " + cat.name + " #" + std::to_string(i) +
                               " without overlap in 1000 attempts");
      }
    }
  }

  const Point3 sensor{0.0, 0.0, cfg.sensor_height};
  auto occluded = [&](const Point3& p, std::int32_t self) {
    if (!cfg.occlusion) return false;
    for (std::size_t k = 0; k < scene.gt.size(); ++k) {
      if (static_cast<std::int32_t>(k) == self) continue;
      if (detail::segment_hits_box(sensor, p, scene.gt[k].box)) return true;
    }
    return false;
  };

  for (std::size_t k = 0; k < scene.gt.size(); ++k) {
    const Box3D& box = scene.gt[k].box;
    for (const auto& face : detail::box_faces(box)) {
      const Point3 to_sensor{sensor.x - face.center.x, sensor.y - face.center.y, sensor.z - face.center.z};
      const double dist = std::sqrt(to_sensor.x * to_sensor.x + to_sensor.y * to_sensor.y + to_sensor.z * to_sensor.z);
      const double facing =
          (face.normal.x * to_sensor.x + face.normal.y * to_sensor.y + face.normal.z * to_sensor.z) / dist;
      if (facing <= 0.0) continue;
      const double lambda = cfg.point_density * face.area * facing / (dist * dist);
      const int n = std::poisson_distribution<int>(lambda)(rng);
      for (int i = 0; i < n; ++i) {
        const double a = uniform(rng, -1.0, 1.0), b = uniform(rng, -1.0, 1.0);
        const Point3 p{face.center.x + a * face.axis_u.x + b * face.axis_v.x,
                       face.center.y + a * face.axis_u.y + b * face.axis_v.y,
                       face.center.z + a * face.axis_u.z + b * face.axis_v.z};
        if (occluded(p, static_cast<std::int32_t>(k))) continue;
        scene.points.push_back(p);
        scene.labels.push_back(static_cast<std::int32_t>(k));
      }
    }
  }

  for (int i = 0; i < cfg.clutter_points; ++i) {
    const Point3 p{uniform(rng, -cfg.half_extent, cfg.half_extent), uniform(rng, -cfg.half_extent, cfg.half_extent),
                   uniform(rng, 0.0, cfg.clutter_max_z)};
    if (std::hypot(p.x, p.y) < 1.0) continue;
    bool inside = false;
    for (const auto& g : scene.gt) inside = inside || point_in_box(detail::inflate(g.box, 0.05), p);
    if (inside || occluded(p, kClutterLabel)) continue;
    scene.points.push_back(p);
    scene.labels.push_back(kClutterLabel);
  }

  if (scene.points.empty()) throw ConfigError("scene generation produced no points; raise clutter_points or counts");
  return scene;
}

// ---------------------------------------------------------------------------
// Oracle seeker
// ---------------------------------------------------------------------------

struct SeekerNoiseConfig {
  double box_jitter_frac = 0.0;
  int mask_erode_dilate_px = 0;  // > 0 dilates, < 0 erodes
  double leak_point_frac = 0.0;
  double score_noise_std = 0.0;
  double dropout_prob = 0.0;
  // Category confusion: the detection is relabeled to a random other
  // category and its score is scaled by mislabel_score_scale.
  double mislabel_prob = 0.0;
  double mislabel_score_scale = 0.6;
  std::uint64_t seed = 0;
};

inline void validate_noise(const SeekerNoiseConfig& n) {
  auto frac = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string("seeker.") + name + " must be in [0, 1]");
  };
  frac(n.box_jitter_frac, "box_jitter_frac");
  frac(n.leak_point_frac, "leak_point_frac");
  frac(n.score_noise_std, "score_noise_std");
  frac(n.dropout_prob, "dropout_prob");
  frac(n.mislabel_prob, "mislabel_prob");
  frac(n.mislabel_score_scale, "mislabel_score_scale");
}

/// Foreground mask as sorted, unique row-major pixel indices (v * W + u).
using PixelMask = std::vector<std::uint32_t>;

struct Detection2D {
  int view = 0;
  Box2D box;
  PixelMask mask;
  Category category;
  double seeker_score = 1.0;
  std::int32_t source_gt = -1;  // oracle provenance, -1 when unknown

  friend bool operator==(const Detection2D&, const Detection2D&) = default;
};

inline std::uint32_t pixel_index(const CameraModel& cam, const PixelProjection& px) {
  const auto u = static_cast<std::uint32_t>(px.u);
  const auto v = static_cast<std::uint32_t>(px.v);
  return v * static_cast<std::uint32_t>(cam.image_width) + u;
}

inline bool mask_contains(const PixelMask& mask, std::uint32_t idx) {
  return std::binary_search(mask.begin(), mask.end(), idx);
}

inline bool pixel_in_box(const Box2D& box, int u, int v) {
  return u >= std::floor(box.min_u) && u < std::ceil(box.max_u) && v >= std::floor(box.min_v) &&
         v < std::ceil(box.max_v);
}

namespace detail {

inline PixelMask morph_mask(const PixelMask& mask, int k, int width, int height) {
  if (k == 0 || mask.empty()) return mask;
  PixelMask out;
  if (k > 0) {
    for (auto idx : mask) {
      const int u = static_cast<int>(idx % width), v = static_cast<int>(idx / width);
      for (int dv = -k; dv <= k; ++dv) {
        for (int du = -k; du <= k; ++du) {
          const int uu = u + du, vv = v + dv;
          if (uu < 0 || vv < 0 || uu >= width || vv >= height) continue;
          out.push_back(static_cast<std::uint32_t>(vv * width + uu));
        }
      }
    }
  } else {
    // Masks are sparse point footprints, so erosion trims the mask extent:
    // pixels within |k| of the mask's bounding rectangle border are dropped.
    int u0 = width, v0 = height, u1 = -1, v1 = -1;
    for (auto idx : mask) {
      const int u = static_cast<int>(idx % width), v = static_cast<int>(idx / width);
      u0 = std::min(u0, u), u1 = std::max(u1, u), v0 = std::min(v0, v), v1 = std::max(v1, v);
    }
    const int e = -k;
    for (auto idx : mask) {
      const int u = static_cast<int>(idx % width), v = static_cast<int>(idx / width);
      if (u - u0 >= e && u1 - u >= e && v - v0 >= e && v1 - v >= e) out.push_back(idx);
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace detail

/// Ground-truth-driven stand-in for the VLM + segmentation front end. One
/// detection per (view, visible gt object), ordered by view then gt index;
/// each detection draws its noise from its own seeded stream.
inline std::vector<Detection2D> oracle_seek(const Scene& scene, const SeekerNoiseConfig& noise) {
  validate_noise(noise);
  if (scene.cameras.empty()) throw ValidationError("oracle_seek requires at least one camera");
  std::vector<Detection2D> out;
  const auto& table = category_table();
  for (std::size_t m = 0; m < scene.cameras.size(); ++m) {
    const CameraModel& cam = scene.cameras[m];
    std::vector<std::optional<PixelProjection>> proj(scene.points.size());
    for (std::size_t i = 0; i < scene.points.size(); ++i) proj[i] = project_point(cam, scene.points[i]);

    for (std::size_t k = 0; k < scene.gt.size(); ++k) {
      auto box2d = project_box3d(cam, scene.gt[k].box);
      if (!box2d) continue;
      PixelMask mask;
      for (std::size_t i = 0; i < scene.points.size(); ++i) {
        if (scene.labels[i] == static_cast<std::int32_t>(k) && proj[i]) mask.push_back(pixel_index(cam, *proj[i]));
      }
      if (mask.empty()) continue;  // no visible evidence in this view
      std::sort(mask.begin(), mask.end());
      mask.erase(std::unique(mask.begin(), mask.end()), mask.end());

      Rng rng(derive_seed(noise.seed, {scene.seed, m, k}));
      if (uniform(rng) < noise.dropout_prob) continue;

      Box2D box = *box2d;
      const double ju = noise.box_jitter_frac * box.width();
      const double jv = noise.box_jitter_frac * box.height();
      box.min_u += uniform(rng, -1.0, 1.0) * ju;
      box.max_u += uniform(rng, -1.0, 1.0) * ju;
      box.min_v += uniform(rng, -1.0, 1.0) * jv;
      box.max_v += uniform(rng, -1.0, 1.0) * jv;
      box.min_u = std::clamp(box.min_u, 0.0, double(cam.image_width));
      box.max_u = std::clamp(box.max_u, 0.0, double(cam.image_width));
      box.min_v = std::clamp(box.min_v, 0.0, double(cam.image_height));
      box.max_v = std::clamp(box.max_v, 0.0, double(cam.image_height));
      if (!box.valid()) continue;

      mask = detail::morph_mask(mask, noise.mask_erode_dilate_px, cam.image_width, cam.image_height);
      if (noise.leak_point_frac > 0.0) {
        PixelMask leaked;
        for (std::size_t i = 0; i < scene.points.size(); ++i) {
          if (scene.labels[i] == static_cast<std::int32_t>(k) || !proj[i]) continue;
          if (!pixel_in_box(box, static_cast<int>(proj[i]->u), static_cast<int>(proj[i]->v))) continue;
          const auto idx = pixel_index(cam, *proj[i]);
          if (mask_contains(mask, idx)) continue;
          if (uniform(rng) < noise.leak_point_frac) leaked.push_back(idx);
        }
        mask.insert(mask.end(), leaked.begin(), leaked.end());
        std::sort(mask.begin(), mask.end());
        mask.erase(std::unique(mask.begin(), mask.end()), mask.end());
      }

      Detection2D det;
      det.view = static_cast<int>(m);
      det.box = box;
      det.mask = std::move(mask);
      det.category = scene.gt[k].category;
      det.seeker_score = std::clamp(1.0 - std::abs(normal(rng, 0.0, 1.0) * noise.score_noise_std), 0.0, 1.0);
      det.source_gt = static_cast<std::int32_t>(k);
      if (uniform(rng) < noise.mislabel_prob) {
        auto pick = static_cast<std::size_t>(uniform(rng, 0.0, double(table.size() - 1)));
        pick = std::min(pick, table.size() - 2);
        std::size_t idx = 0;
        for (const auto& c : table) {
          if (c.name == det.category.name) continue;
          if (idx++ == pick) {
            det.category = c;
            break;
          }
        }
        det.seeker_score *= noise.mislabel_score_scale;
      }
      out.push_back(std::move(det));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr int kSceneFormatVersion = 1;
inline constexpr int kDetectionsFormatVersion = 1;

inline json camera_to_json(const CameraModel& cam) {
  json k = json::array(), e = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) k.push_back(cam.intrinsics(r, c));
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) e.push_back(cam.ego_to_camera.matrix()(r, c));
  return json{{"intrinsics", k}, {"extrinsics", e}, {"width", cam.image_width}, {"height", cam.image_height}};
}

inline CameraModel camera_from_json(const json& j, const std::string& path) {
  using namespace jsonio;
  CameraModel cam;
  const auto k = numbers(require(j, "intrinsics", path), join_path(path, "intrinsics"), 9);
  const auto e = numbers(require(j, "extrinsics", path), join_path(path, "extrinsics"), 16);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) cam.intrinsics(r, c) = k[r * 3 + c];
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = e[r * 4 + c];
  cam.ego_to_camera.matrix() = m;
  cam.image_width = static_cast<int>(integer(require(j, "width", path), join_path(path, "width")));
  cam.image_height = static_cast<int>(integer(require(j, "height", path), join_path(path, "height")));
  try {
    validate_camera(cam);
  } catch (const ValidationError& err) {
    throw SchemaError(path + ": " + err.what());
  }
  return cam;
}

inline json box_to_json(const Box3D& b) {
  return json{{"center", {b.center.x, b.center.y, b.center.z}},
              {"size", {b.size.length, b.size.width, b.size.height}},
              {"yaw", b.yaw}};
}

inline Box3D box_from_json(const json& j, const std::string& path) {
  using namespace jsonio;
  const auto c = numbers(require(j, "center", path), join_path(path, "center"), 3);
  const auto s = numbers(require(j, "size", path), join_path(path, "size"), 3);
  const double yaw = number(require(j, "yaw", path), join_path(path, "yaw"));
  if (!(s[0] > 0.0 && s[1] > 0.0 && s[2] > 0.0)) throw SchemaError("field '" + path + ".size' must be positive");
  return Box3D{{c[0], c[1], c[2]}, {s[0], s[1], s[2]}, yaw};
}

inline json box2d_to_json(const Box2D& b) { return json{b.min_u, b.min_v, b.max_u, b.max_v}; }

inline Box2D box2d_from_json(const json& j, const std::string& path) {
  const auto v = jsonio::numbers(j, path, 4);
  Box2D b{v[0], v[1], v[2], v[3]};
  if (!b.valid()) throw SchemaError("field '" + path + "' is not a valid 2D box");
  return b;
}

inline json scene_to_json(const Scene& scene, const json& header = nullptr) {
  json doc;
  doc["version"] = kSceneFormatVersion;
  if (!header.is_null()) doc["header"] = header;
  doc["seed"] = scene.seed;
  json cams = json::array();
  for (const auto& c : scene.cameras) cams.push_back(camera_to_json(c));
  doc["cameras"] = std::move(cams);
  std::vector<double> flat;
  flat.reserve(scene.points.size() * 3);
  for (const auto& p : scene.points) {
    flat.push_back(p.x);
    flat.push_back(p.y);
    flat.push_back(p.z);
  }
  doc["points"] = flat;
  doc["labels"] = scene.labels;
  json gt = json::array();
  for (const auto& g : scene.gt) {
    json o = box_to_json(g.box);
    o["category"] = g.category.name;
    gt.push_back(std::move(o));
  }
  doc["gt"] = std::move(gt);
  return doc;
}

inline Scene scene_from_json(const json& doc) {
  using namespace jsonio;
  check_version(doc, kSceneFormatVersion, "scene file");
  Scene scene;
  const json& seed = require(doc, "seed", "");
  if (!seed.is_number_unsigned() && !seed.is_number_integer()) throw SchemaError("field 'seed' must be an integer");
  scene.seed = seed.get<std::uint64_t>();
  const json& cams = array(require(doc, "cameras", ""), "cameras");
  for (std::size_t i = 0; i < cams.size(); ++i) scene.cameras.push_back(camera_from_json(cams[i], index_path("cameras", i)));
  const auto flat = numbers(require(doc, "points", ""), "points");
  if (flat.size() % 3 != 0) throw SchemaError("field 'points' must hold xyz triples");
  for (std::size_t i = 0; i < flat.size(); i += 3) scene.points.push_back({flat[i], flat[i + 1], flat[i + 2]});
  const json& gt = array(require(doc, "gt", ""), "gt");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::string path = index_path("gt", i);
    GtObject g;
    g.box = box_from_json(gt[i], path);
    g.category = find_category(string(require(gt[i], "category", path), join_path(path, "category")));
    scene.gt.push_back(std::move(g));
  }
  const json& labels = array(require(doc, "labels", ""), "labels");
  if (labels.size() != scene.points.size()) throw SchemaError("field 'labels' must have one entry per point");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto l = integer(labels[i], index_path("labels", i));
    if (l < kClutterLabel || l >= static_cast<std::int64_t>(scene.gt.size())) {
      throw SchemaError("field '" + index_path("labels", i) + "' references a missing gt object");
    }
    scene.labels.push_back(static_cast<std::int32_t>(l));
  }
  return scene;
}

inline void save_scene(const std::filesystem::path& path, const Scene& scene, const json& header = nullptr) {
  write_json_file(path, scene_to_json(scene, header));
}

inline Scene load_scene(const std::filesystem::path& path) {
  try {
    return scene_from_json(read_json_file(path));
  } catch (const SchemaError& e) {
    const std::string msg = e.what();
    if (msg.rfind(path.string(), 0) == 0) throw;
    if (dynamic_cast<const UnsupportedVersion*>(&e)) throw UnsupportedVersion(path.string() + ": " + msg);
    throw SchemaError(path.string() + ": " + msg);
  }
}

/// Row-major run-length encoding: alternating run lengths over the W*H grid,
/// starting with a (possibly empty) background run.
inline std::vector<std::uint32_t> mask_to_rle(const PixelMask& mask, std::uint32_t total) {
  std::vector<std::uint32_t> counts;
  std::uint32_t pos = 0;
  std::size_t i = 0;
  while (i < mask.size()) {
    counts.push_back(mask[i] - pos);
    std::uint32_t run = 1;
    while (i + run < mask.size() && mask[i + run] == mask[i] + run) ++run;
    counts.push_back(run);
    pos = mask[i] + run;
    i += run;
  }
  if (pos < total) counts.push_back(total - pos);
  return counts;
}

inline PixelMask mask_from_rle(const std::vector<std::uint32_t>& counts, std::uint32_t total) {
  PixelMask mask;
  std::uint64_t pos = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (i % 2 == 1) {
      for (std::uint32_t k = 0; k < counts[i]; ++k) mask.push_back(static_cast<std::uint32_t>(pos + k));
    }
    pos += counts[i];
  }
  if (pos != total) throw SchemaError("mask_rle counts do not cover the image grid");
  return mask;
}

inline json detections_to_json(const std::vector<Detection2D>& dets, const std::vector<CameraModel>& cams,
                               const json& header = nullptr) {
  json list = json::array();
  for (const auto& d : dets) {
    const auto& cam = cams.at(static_cast<std::size_t>(d.view));
    const auto total = static_cast<std::uint32_t>(cam.image_width) * static_cast<std::uint32_t>(cam.image_height);
    list.push_back(json{{"view", d.view},
                        {"box", box2d_to_json(d.box)},
                        {"mask_rle", {{"size", {cam.image_height, cam.image_width}}, {"counts", mask_to_rle(d.mask, total)}}},
                        {"category", d.category.name},
                        {"score", d.seeker_score},
                        {"gt", d.source_gt}});
  }
  json doc{{"version", kDetectionsFormatVersion}, {"detections", list}};
  if (!header.is_null()) doc["header"] = header;
  return doc;
}

inline std::vector<Detection2D> detections_from_json(const json& doc) {
  using namespace jsonio;
  check_version(doc, kDetectionsFormatVersion, "detections file");
  const json& list = array(require(doc, "detections", ""), "detections");
  std::vector<Detection2D> out;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const std::string path = index_path("detections", i);
    const json& j = list[i];
    Detection2D d;
    d.view = static_cast<int>(integer(require(j, "view", path), join_path(path, "view")));
    d.box = box2d_from_json(require(j, "box", path), join_path(path, "box"));
    const json& rle = require(j, "mask_rle", path);
    const auto size = numbers(require(rle, "size", join_path(path, "mask_rle")), join_path(path, "mask_rle.size"), 2);
    const auto total = static_cast<std::uint32_t>(size[0] * size[1]);
    std::vector<std::uint32_t> counts;
    for (double c : numbers(require(rle, "counts", join_path(path, "mask_rle")), join_path(path, "mask_rle.counts"))) {
      counts.push_back(static_cast<std::uint32_t>(c));
    }
    d.mask = mask_from_rle(counts, total);
    d.category = find_category(string(require(j, "category", path), join_path(path, "category")));
    d.seeker_score = number(require(j, "score", path), join_path(path, "score"));
    if (j.contains("gt")) d.source_gt = static_cast<std::int32_t>(integer(j["gt"], join_path(path, "gt")));
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace hqov3d
