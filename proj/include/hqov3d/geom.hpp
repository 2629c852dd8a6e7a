// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "hqov3d/errors.hpp"

namespace hqov3d {

inline constexpr double kPi = std::numbers::pi;

// Minimum per-axis extent of a fitted box, in meters.
inline constexpr double kSizeFloor = 0.05;

// Tolerance for inclusive point-in-box tests and polygon vertex merging.
inline constexpr double kGeomEps = 1e-9;

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend bool operator==(const Point3&, const Point3&) = default;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

struct Size3 {
  double length = 0.0;
  double width = 0.0;
  double height = 0.0;

  friend bool operator==(const Size3&, const Size3&) = default;
};

/// Wraps an angle into [-pi, pi).
inline double wrap_angle(double a) {
  double r = std::fmod(a + kPi, 2.0 * kPi);
  if (r < 0.0) r += 2.0 * kPi;
  double out = r - kPi;
  return out >= kPi ? -kPi : out;
}

/// Wraps an angle into [0, pi). Boxes are symmetric under a half turn.
inline double wrap_half_turn(double a) {
  double r = std::fmod(a, kPi);
  if (r < 0.0) r += kPi;
  return r >= kPi ? 0.0 : r;
}

/// Oriented 3D box. Yaw rotates the length axis away from ego +x.
struct Box3D {
  Point3 center;
  Size3 size;
  double yaw = 0.0;

  friend bool operator==(const Box3D&, const Box3D&) = default;

  double volume() const { return size.length * size.width * size.height; }
  double bev_area() const { return size.length * size.width; }
  double z_min() const { return center.z - 0.5 * size.height; }
  double z_max() const { return center.z + 0.5 * size.height; }
};

inline Box3D make_box(Point3 center, Size3 size, double yaw) {
  return Box3D{center, size, wrap_angle(yaw)};
}

/// Same physical box with length >= width and yaw in [0, pi).
inline Box3D canonical_box(const Box3D& b) {
  Box3D out = b;
  if (out.size.width > out.size.length) {
    std::swap(out.size.length, out.size.width);
    out.yaw += 0.5 * kPi;
  }
  out.yaw = wrap_half_turn(out.yaw);
  return out;
}

struct Box2D {
  double min_u = 0.0;
  double min_v = 0.0;
  double max_u = 0.0;
  double max_v = 0.0;

  friend bool operator==(const Box2D&, const Box2D&) = default;

  double width() const { return max_u - min_u; }
  double height() const { return max_v - min_v; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const { return max_u > min_u && max_v > min_v; }
  double center_u() const { return 0.5 * (min_u + max_u); }
  double center_v() const { return 0.5 * (min_v + max_v); }
};

/// Pinhole camera. Camera frame is x right, y down, z forward.
struct CameraModel {
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  Eigen::Isometry3d ego_to_camera = Eigen::Isometry3d::Identity();
  int image_width = 0;
  int image_height = 0;

  bool operator==(const CameraModel& o) const {
    return intrinsics == o.intrinsics && ego_to_camera.matrix() == o.ego_to_camera.matrix() &&
           image_width == o.image_width && image_height == o.image_height;
  }
};

inline void validate_camera(const CameraModel& cam) {
  if (!(cam.intrinsics(0, 0) > 0.0) || !(cam.intrinsics(1, 1) > 0.0)) {
    throw ValidationError("camera intrinsics must have positive focal entries");
  }
  if (cam.image_width <= 0 || cam.image_height <= 0) {
    throw ValidationError("camera image size must be positive");
  }
  const Eigen::Matrix3d r = cam.ego_to_camera.linear();
  if (!(r * r.transpose()).isApprox(Eigen::Matrix3d::Identity(), 1e-9) ||
      std::abs(r.determinant() - 1.0) > 1e-9) {
    throw ValidationError("camera extrinsics must be a proper rigid transform");
  }
}

/// Camera at `position` (ego frame) looking along ego heading `yaw`, level
/// with the ground, with the given horizontal field of view.
inline CameraModel make_camera(double yaw, double hfov, int width, int height, Point3 position) {
  CameraModel cam;
  const double f = 0.5 * width / std::tan(0.5 * hfov);
  cam.intrinsics << f, 0.0, 0.5 * width, 0.0, f, 0.5 * height, 0.0, 0.0, 1.0;
  const Eigen::Vector3d forward(std::cos(yaw), std::sin(yaw), 0.0);
  const Eigen::Vector3d right(std::sin(yaw), -std::cos(yaw), 0.0);
  const Eigen::Vector3d down(0.0, 0.0, -1.0);
  Eigen::Matrix3d cam_to_ego;
  cam_to_ego.col(0) = right;
  cam_to_ego.col(1) = down;
  cam_to_ego.col(2) = forward;
  Eigen::Isometry3d t = Eigen::Isometry3d::Identity();
  t.linear() = cam_to_ego.transpose();
  t.translation() = -cam_to_ego.transpose() * Eigen::Vector3d(position.x, position.y, position.z);
  cam.ego_to_camera = t;
  cam.image_width = width;
  cam.image_height = height;
  return cam;
}

struct PixelProjection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

/// Projection without the image-bounds test; absent only behind the camera.
inline std::optional<PixelProjection> project_point_unbounded(const CameraModel& cam, const Point3& p) {
  const Eigen::Vector3d pc = cam.ego_to_camera * Eigen::Vector3d(p.x, p.y, p.z);
  if (pc.z() <= 0.0) return std::nullopt;
  const Eigen::Vector3d uvw = cam.intrinsics * pc;
  return PixelProjection{uvw.x() / uvw.z(), uvw.y() / uvw.z(), pc.z()};
}

inline std::optional<PixelProjection> project_point(const CameraModel& cam, const Point3& p) {
  auto px = project_point_unbounded(cam, p);
  if (!px) return std::nullopt;
  if (px->u < 0.0 || px->u >= cam.image_width || px->v < 0.0 || px->v >= cam.image_height) {
    return std::nullopt;
  }
  return px;
}

/// Corners ordered: bottom face CCW from (+l/2, +w/2), then top face.
inline std::array<Point3, 8> box_corners(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = 0.5 * b.size.length, hw = 0.5 * b.size.width;
  const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Point3, 8> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    const double x = b.center.x + c * local[i].x - s * local[i].y;
    const double y = b.center.y + s * local[i].x + c * local[i].y;
    out[i] = Point3{x, y, b.z_min()};
    out[i + 4] = Point3{x, y, b.z_max()};
  }
  return out;
}

inline std::array<Vec2, 4> box_bev_polygon(const Box3D& b) {
  auto corners = box_corners(b);
  return {{{corners[0].x, corners[0].y},
           {corners[1].x, corners[1].y},
           {corners[2].x, corners[2].y},
           {corners[3].x, corners[3].y}}};
}

/// Axis-aligned envelope of the projections of the box corners that lie in
/// front of the camera, clipped to the image.
inline std::optional<Box2D> project_box3d(const CameraModel& cam, const Box3D& b) {
  int visible = 0;
  Box2D env{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
            -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& corner : box_corners(b)) {
    auto px = project_point_unbounded(cam, corner);
    if (!px) continue;
    ++visible;
    env.min_u = std::min(env.min_u, px->u);
    env.min_v = std::min(env.min_v, px->v);
    env.max_u = std::max(env.max_u, px->u);
    env.max_v = std::max(env.max_v, px->v);
  }
  if (visible < 2) return std::nullopt;
  env.min_u = std::clamp(env.min_u, 0.0, double(cam.image_width));
  env.max_u = std::clamp(env.max_u, 0.0, double(cam.image_width));
  env.min_v = std::clamp(env.min_v, 0.0, double(cam.image_height));
  env.max_v = std::clamp(env.max_v, 0.0, double(cam.image_height));
  if (!env.valid()) return std::nullopt;
  return env;
}

inline double iou_2d(const Box2D& a, const Box2D& b) {
  const double iw = std::min(a.max_u, b.max_u) - std::max(a.min_u, b.min_u);
  const double ih = std::min(a.max_v, b.max_v) - std::max(a.min_v, b.min_v);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

namespace detail {

inline double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline double polygon_area(std::span<const Vec2> poly) {
  double acc = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    acc += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(acc);
}

// Sutherland-Hodgman: clip `subject` by the CCW convex polygon `clip`.
inline std::vector<Vec2> clip_convex(std::vector<Vec2> subject, std::span<const Vec2> clip) {
  for (std::size_t i = 0; i < clip.size() && !subject.empty(); ++i) {
    const Vec2 a = clip[i];
    const Vec2 b = clip[(i + 1) % clip.size()];
    std::vector<Vec2> out;
    out.reserve(subject.size() + 2);
    for (std::size_t j = 0; j < subject.size(); ++j) {
      const Vec2 p = subject[j];
      const Vec2 q = subject[(j + 1) % subject.size()];
      const double dp = cross(a, b, p);
      const double dq = cross(a, b, q);
      const bool p_in = dp >= 0.0;
      const bool q_in = dq >= 0.0;
      if (p_in) out.push_back(p);
      if (p_in != q_in) {
        const double t = dp / (dp - dq);
        out.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
      }
    }
    // merge near-duplicate vertices
    std::vector<Vec2> merged;
    for (const auto& v : out) {
      if (merged.empty() || std::hypot(v.x - merged.back().x, v.y - merged.back().y) > kGeomEps) {
        merged.push_back(v);
      }
    }
    while (merged.size() > 1 &&
           std::hypot(merged.front().x - merged.back().x, merged.front().y - merged.back().y) <= kGeomEps) {
      merged.pop_back();
    }
    subject = std::move(merged);
  }
  if (subject.size() < 3) subject.clear();
  return subject;
}

}  // namespace detail

inline double bev_intersection_area(const Box3D& a, const Box3D& b) {
  const auto pa = box_bev_polygon(a);
  const auto pb = box_bev_polygon(b);
  auto clipped = detail::clip_convex(std::vector<Vec2>(pa.begin(), pa.end()), pb);
  return clipped.empty() ? 0.0 : detail::polygon_area(clipped);
}

inline double bev_iou(const Box3D& a, const Box3D& b) {
  const double inter = bev_intersection_area(a, b);
  const double uni = a.bev_area() + b.bev_area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

inline double iou_3d(const Box3D& a, const Box3D& b) {
  const double dz = std::min(a.z_max(), b.z_max()) - std::max(a.z_min(), b.z_min());
  if (dz <= 0.0) return 0.0;
  const double inter = bev_intersection_area(a, b) * dz;
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

/// Convex hull (Andrew's monotone chain), CCW, without collinear points.
inline std::vector<Vec2> convex_hull(std::vector<Vec2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const Vec2& a, const Vec2& b) { return a.x == b.x && a.y == b.y; }),
            pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Vec2> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && detail::cross(hull[k - 2], hull[k - 1], p) <= 0.0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && detail::cross(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

/// Minimal-area oriented box around the points: rotating calipers over the
/// BEV hull, z-extent from min/max z. Longer BEV side becomes the length,
/// yaw is reported in [0, pi). Throws EmptyCluster on no points.
inline Box3D fit_min_box(std::span<const Point3> points) {
  if (points.empty()) throw EmptyCluster();
  double zmin = points[0].z, zmax = points[0].z;
  std::vector<Vec2> bev;
  bev.reserve(points.size());
  for (const auto& p : points) {
    zmin = std::min(zmin, p.z);
    zmax = std::max(zmax, p.z);
    bev.push_back({p.x, p.y});
  }
  const auto hull = convex_hull(std::move(bev));

  Vec2 center{hull[0].x, hull[0].y};
  double ext_a = 0.0, ext_b = 0.0, yaw = 0.0;
  if (hull.size() == 2) {
    const double dx = hull[1].x - hull[0].x, dy = hull[1].y - hull[0].y;
    center = {0.5 * (hull[0].x + hull[1].x), 0.5 * (hull[0].y + hull[1].y)};
    ext_a = std::hypot(dx, dy);
    yaw = std::atan2(dy, dx);
  } else if (hull.size() >= 3) {
    double best_area = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < hull.size(); ++i) {
      const Vec2& p = hull[i];
      const Vec2& q = hull[(i + 1) % hull.size()];
      const double len = std::hypot(q.x - p.x, q.y - p.y);
      if (len <= 0.0) continue;
      const Vec2 e{(q.x - p.x) / len, (q.y - p.y) / len};
      const Vec2 n{-e.y, e.x};
      double lo_e = std::numeric_limits<double>::infinity(), hi_e = -lo_e;
      double lo_n = lo_e, hi_n = -lo_e;
      for (const auto& h : hull) {
        const double se = h.x * e.x + h.y * e.y;
        const double sn = h.x * n.x + h.y * n.y;
        lo_e = std::min(lo_e, se);
        hi_e = std::max(hi_e, se);
        lo_n = std::min(lo_n, sn);
        hi_n = std::max(hi_n, sn);
      }
      const double area = (hi_e - lo_e) * (hi_n - lo_n);
      if (area < best_area) {
        best_area = area;
        const double me = 0.5 * (lo_e + hi_e), mn = 0.5 * (lo_n + hi_n);
        center = {me * e.x + mn * n.x, me * e.y + mn * n.y};
        if (hi_e - lo_e >= hi_n - lo_n) {
          ext_a = hi_e - lo_e;
          ext_b = hi_n - lo_n;
          yaw = std::atan2(e.y, e.x);
        } else {
          ext_a = hi_n - lo_n;
          ext_b = hi_e - lo_e;
          yaw = std::atan2(n.y, n.x);
        }
      }
    }
  }
  Box3D out;
  out.center = {center.x, center.y, 0.5 * (zmin + zmax)};
  out.size = {std::max(ext_a, kSizeFloor), std::max(ext_b, kSizeFloor), std::max(zmax - zmin, kSizeFloor)};
  out.yaw = wrap_half_turn(yaw);
  return out;
}

/// True when p lies inside b, boundary inclusive within kGeomEps.
inline bool point_in_box(const Box3D& b, const Point3& p) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double dx = p.x - b.center.x, dy = p.y - b.center.y;
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::abs(lx) <= 0.5 * b.size.length + kGeomEps && std::abs(ly) <= 0.5 * b.size.width + kGeomEps &&
         std::abs(p.z - b.center.z) <= 0.5 * b.size.height + kGeomEps;
}

inline std::vector<std::size_t> points_in_box(const Box3D& b, std::span<const Point3> pts) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (point_in_box(b, pts[i])) out.push_back(i);
  }
  return out;
}

inline std::size_t count_points_in_box(const Box3D& b, std::span<const Point3> pts) {
  std::size_t n = 0;
  for (const auto& p : pts) n += point_in_box(b, p) ? 1 : 0;
  return n;
}

}  // namespace hqov3d
