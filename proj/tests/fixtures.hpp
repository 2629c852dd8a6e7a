// SPDX-License-Identifier: Apache-2.0
// Deterministic fixture builders shared by the unit and acceptance tests.
#pragma once

#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "hqov3d/geom.hpp"
#include "hqov3d/imcv.hpp"
#include "hqov3d/scene.hpp"

namespace fixture {

using namespace hqov3d;

inline double uni(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline Box3D random_box(std::mt19937_64& rng) {
  return Box3D{{uni(rng, -5, 5), uni(rng, -5, 5), uni(rng, 0, 2)},
               {uni(rng, 0.5, 5), uni(rng, 0.5, 3), uni(rng, 0.5, 3)},
               uni(rng, -kPi, kPi)};
}

/// A second box near `a` so that pairs cover the full IoU range.
inline Box3D nearby_box(std::mt19937_64& rng, const Box3D& a) {
  return Box3D{{a.center.x + uni(rng, -1.5, 1.5), a.center.y + uni(rng, -1.5, 1.5), a.center.z + uni(rng, -0.5, 0.5)},
               {a.size.length * uni(rng, 0.6, 1.4), a.size.width * uni(rng, 0.6, 1.4), a.size.height * uni(rng, 0.6, 1.4)},
               a.yaw + uni(rng, -0.8, 0.8)};
}

/// Scene with the default camera rig, no sampled points, and the given
/// ground-truth objects; tests then add points by hand.
inline Scene empty_scene(std::vector<GtObject> gt = {}) {
  Scene s;
  s.cameras = make_camera_rig(CameraRigConfig{});
  s.gt = std::move(gt);
  return s;
}

/// Points on the visible surfaces of a box seen from the ego origin:
/// a regular grid over the faces whose outward normal points at the sensor.
inline std::vector<Point3> visible_surface(const Box3D& b, double spacing) {
  std::vector<Point3> out;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = b.size.length / 2, hw = b.size.width / 2, hh = b.size.height / 2;
  auto world = [&](double lx, double ly, double lz) {
    return Point3{b.center.x + c * lx - s * ly, b.center.y + s * lx + c * ly, b.center.z + lz};
  };
  const double ox = -(c * b.center.x + s * b.center.y);  // ego origin in the box frame
  const double oy = -(-s * b.center.x + c * b.center.y);
  for (int side : {1, -1}) {
    if (side * ox > hl) {
      for (double y = -hw; y <= hw + 1e-9; y += spacing)
        for (double z = -hh; z <= hh + 1e-9; z += spacing) out.push_back(world(side * hl, y, z));
    }
    if (side * oy > hw) {
      for (double x = -hl; x <= hl + 1e-9; x += spacing)
        for (double z = -hh; z <= hh + 1e-9; z += spacing) out.push_back(world(x, side * hw, z));
    }
  }
  return out;
}

/// Index of the camera whose optical axis is closest to the bearing of p.
inline int facing_camera(const Scene& s, const Point3& p) {
  int best = 0;
  double best_z = -INFINITY;
  for (std::size_t m = 0; m < s.cameras.size(); ++m) {
    const Eigen::Vector3d pc = s.cameras[m].ego_to_camera * Eigen::Vector3d(p.x, p.y, p.z);
    const double cosang = pc.z() / pc.norm();
    if (cosang > best_z) {
      best_z = cosang;
      best = static_cast<int>(m);
    }
  }
  return best;
}

/// Noiseless detection of gt object k in view m from the scene's labeled
/// points: the projected gt envelope plus every labeled point's pixel.
inline Detection2D oracle_detection(const Scene& s, std::size_t k, int m) {
  const CameraModel& cam = s.cameras.at(static_cast<std::size_t>(m));
  Detection2D d;
  d.view = m;
  d.box = *project_box3d(cam, s.gt[k].box);
  d.category = s.gt[k].category;
  d.source_gt = static_cast<std::int32_t>(k);
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    if (s.labels[i] != static_cast<std::int32_t>(k)) continue;
    if (auto px = project_point(cam, s.points[i])) d.mask.push_back(pixel_index(cam, *px));
  }
  std::sort(d.mask.begin(), d.mask.end());
  d.mask.erase(std::unique(d.mask.begin(), d.mask.end()), d.mask.end());
  return d;
}

struct SplitFixture {
  Scene scene;
  Detection2D det;
  std::size_t clutter_points = 0;
};

/// A car in full view of one camera whose visible surface is cut by a gap
/// wider than the clustering radius across its length, so the mask yields
/// two nearby clusters. With `clutter`, a compact blob 3.5 m beyond the
/// car's far end joins the mask; merging it would exceed the size cap.
inline SplitFixture split_object(std::uint64_t seed, bool clutter, double gap = 0.7) {
  std::mt19937_64 rng(seed);
  SplitFixture f;
  f.scene = empty_scene();
  const auto cams = f.scene.cameras;
  const int m = static_cast<int>(seed % cams.size());
  const double axis = 2.0 * kPi * m / static_cast<double>(cams.size());
  const double bearing = axis + uni(rng, -0.25, 0.25), range = uni(rng, 8.0, 18.0);
  const Category& car = find_category("car");
  const Box3D box{{range * std::cos(bearing), range * std::sin(bearing), 0.87},
                  {car.prior.length, car.prior.width, car.prior.height}, bearing + uni(rng, 0.6, 1.2)};
  f.scene.gt = {{box, car}};
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  for (const auto& p : visible_surface(box, 0.12)) {
    const double lx = c * (p.x - box.center.x) + s * (p.y - box.center.y);
    if (std::abs(lx - 0.3) < gap / 2) continue;
    f.scene.points.push_back(p);
    f.scene.labels.push_back(0);
  }
  if (clutter) {
    const double far = 0.5 * box.size.length + 3.5;
    const int side = (c * box.center.x + s * box.center.y) > 0 ? 1 : -1;  // beyond the end away from the sensor
    const Point3 blob{box.center.x + side * far * c, box.center.y + side * far * s, 0.5};
    for (int i = 0; i < 30; ++i) {
      f.scene.points.push_back({blob.x + uni(rng, -0.2, 0.2), blob.y + uni(rng, -0.2, 0.2), blob.z + uni(rng, -0.3, 0.3)});
      f.scene.labels.push_back(kClutterLabel);
      ++f.clutter_points;
    }
  }
  const CameraModel& cam = cams[static_cast<std::size_t>(m)];
  f.det.view = m;
  f.det.box = *project_box3d(cam, box);
  f.det.category = car;
  f.det.source_gt = 0;
  for (const auto& p : f.scene.points) {
    if (auto px = project_point(cam, p)) f.det.mask.push_back(pixel_index(cam, *px));
  }
  std::sort(f.det.mask.begin(), f.det.mask.end());
  f.det.mask.erase(std::unique(f.det.mask.begin(), f.det.mask.end()), f.det.mask.end());
  return f;
}

}  // namespace fixture
