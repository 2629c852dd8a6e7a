// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hqov3d/errors.hpp"
#include "hqov3d/geom.hpp"
#include "hqov3d/json_io.hpp"
#include "hqov3d/nn.hpp"
#include "hqov3d/proposal.hpp"
#include "hqov3d/rng.hpp"
#include "hqov3d/scene.hpp"

namespace hqov3d {

// ---------------------------------------------------------------------------
// BEV rasterization
// ---------------------------------------------------------------------------

/// Square grid of handcrafted per-cell point statistics in the ego frame,
/// covering [-half_extent, half_extent] on both axes. Channel layout:
/// log(1 + count), max z, min z, mean z, z variance, mean horizontal range.
/// Empty cells hold zeros in every channel.
struct BevGrid {
  static constexpr std::size_t kChannels = 6;

  double half_extent = 40.0;
  double cell = 0.25;
  std::size_t n = 0;
  std::vector<double> data;

  double at(std::size_t c, std::size_t iy, std::size_t ix) const { return data[(c * n + iy) * n + ix]; }
  double& at(std::size_t c, std::size_t iy, std::size_t ix) { return data[(c * n + iy) * n + ix]; }

  bool contains(double x, double y) const {
    return x >= -half_extent && x <= half_extent && y >= -half_extent && y <= half_extent;
  }

  /// Bilinear interpolation over the four nearest cell centers, clamped to
  /// the lattice of centers.
  std::array<double, kChannels> sample(double x, double y) const {
    auto coord = [&](double v, std::size_t& i0, double& w) {
      double f = (v + half_extent) / cell - 0.5;
      f = std::clamp(f, 0.0, static_cast<double>(n - 1));
      i0 = std::min(static_cast<std::size_t>(f), n >= 2 ? n - 2 : 0);
      w = n >= 2 ? f - static_cast<double>(i0) : 0.0;
    };
    std::size_t ix = 0, iy = 0;
    double wx = 0.0, wy = 0.0;
    coord(x, ix, wx);
    coord(y, iy, wy);
    const std::size_t ix1 = std::min(ix + 1, n - 1), iy1 = std::min(iy + 1, n - 1);
    std::array<double, kChannels> out{};
    for (std::size_t c = 0; c < kChannels; ++c) {
      out[c] = (1.0 - wy) * ((1.0 - wx) * at(c, iy, ix) + wx * at(c, iy, ix1)) +
               wy * ((1.0 - wx) * at(c, iy1, ix) + wx * at(c, iy1, ix1));
    }
    return out;
  }
};

inline BevGrid rasterize_bev(std::span<const Point3> points, double half_extent, double cell) {
  if (!(half_extent > 0.0) || !(cell > 0.0)) throw ConfigError("bev: extent and cell size must be positive");
  const double cells = 2.0 * half_extent / cell;
  const double rounded = std::round(cells);
  if (std::abs(cells - rounded) > 1e-9 * std::max(1.0, cells) || rounded < 1.0) {
    throw ConfigError("bev: 2 * half_extent must be a whole multiple of the cell size");
  }
  BevGrid g;
  g.half_extent = half_extent;
  g.cell = cell;
  g.n = static_cast<std::size_t>(rounded);
  g.data.assign(BevGrid::kChannels * g.n * g.n, 0.0);

  const std::size_t cn = g.n * g.n;
  std::vector<std::uint32_t> count(cn, 0);
  std::vector<double> zmax(cn, -std::numeric_limits<double>::infinity());
  std::vector<double> zmin(cn, std::numeric_limits<double>::infinity());
  std::vector<double> zsum(cn, 0.0), rsum(cn, 0.0);
  std::vector<std::size_t> cell_of(points.size(), cn);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Point3& p = points[i];
    const double fx = std::floor((p.x + half_extent) / cell), fy = std::floor((p.y + half_extent) / cell);
    if (fx < 0.0 || fy < 0.0 || fx >= rounded || fy >= rounded) continue;
    const std::size_t k = static_cast<std::size_t>(fy) * g.n + static_cast<std::size_t>(fx);
    cell_of[i] = k;
    ++count[k];
    zmax[k] = std::max(zmax[k], p.z);
    zmin[k] = std::min(zmin[k], p.z);
    zsum[k] += p.z;
    rsum[k] += std::hypot(p.x, p.y);
  }
  std::vector<double> zvar(cn, 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const std::size_t k = cell_of[i];
    if (k == cn) continue;
    const double d = points[i].z - zsum[k] / count[k];
    zvar[k] += d * d;
  }
  for (std::size_t k = 0; k < cn; ++k) {
    if (count[k] == 0) continue;
    const double c = static_cast<double>(count[k]);
    const std::size_t iy = k / g.n, ix = k % g.n;
    g.at(0, iy, ix) = std::log1p(c);
    g.at(1, iy, ix) = zmax[k];
    g.at(2, iy, ix) = zmin[k];
    g.at(3, iy, ix) = zsum[k] / c;
    g.at(4, iy, ix) = zvar[k] / c;
    g.at(5, iy, ix) = rsum[k] / c;
  }
  return g;
}

inline BevGrid rasterize_bev(const Scene& scene, double half_extent, double cell) {
  return rasterize_bev(std::span<const Point3>(scene.points), half_extent, cell);
}

// ---------------------------------------------------------------------------
// Super categories and state normalization
// ---------------------------------------------------------------------------

struct GroupScale {
  Size3 mean_prior;
  double ref = 1.0;  // center scale in meters

  friend bool operator==(const GroupScale&, const GroupScale&) = default;
};

using GroupScales = std::array<GroupScale, kNumSuperCategories>;

inline Size3 canonical_size(Size3 s) {
  if (s.width > s.length) std::swap(s.length, s.width);
  return s;
}

/// Mean canonical prior per super category; the center scale is the mean of
/// the horizontal dimensions.
inline GroupScales default_group_scales() {
  GroupScales out{};
  std::array<int, kNumSuperCategories> n{};
  for (const auto& c : category_table()) {
    const Size3 p = canonical_size(c.prior);
    auto& m = out[c.super_category].mean_prior;
    m.length += p.length;
    m.width += p.width;
    m.height += p.height;
    ++n[c.super_category];
  }
  for (int g = 0; g < kNumSuperCategories; ++g) {
    auto& m = out[g].mean_prior;
    m.length /= n[g];
    m.width /= n[g];
    m.height /= n[g];
    out[g].ref = 0.5 * (m.length + m.width);
  }
  return out;
}

/// Super-category index of a category. Categories missing from the table fall
/// back to the group whose mean prior is nearest in relative L2 distance.
inline int super_category_of(std::string_view name, std::optional<Size3> prior = std::nullopt) {
  if (const auto* c = try_find_category(name)) return c->super_category;
  if (!prior) throw UnknownCategory("no super category for '" + std::string(name) + "' without a size prior");
  const Size3 p = canonical_size(*prior);
  const GroupScales groups = default_group_scales();
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int g = 0; g < kNumSuperCategories; ++g) {
    const Size3& m = groups[g].mean_prior;
    const double d = std::sqrt((p.length - m.length) * (p.length - m.length) + (p.width - m.width) * (p.width - m.width) +
                               (p.height - m.height) * (p.height - m.height)) /
                     std::sqrt(m.length * m.length + m.width * m.width + m.height * m.height);
    if (d < best_d) {
      best_d = d;
      best = g;
    }
  }
  return best;
}

inline constexpr std::size_t kStateDim = 8;
using StateVec = std::array<double, kStateDim>;

/// Box as a normalized state: center over the group reference scale, log of
/// size over the group mean prior, and the yaw as (sin 2θ, cos 2θ) since a
/// box is symmetric under a half turn.
inline StateVec normalize_box(const Box3D& box, const GroupScale& g) {
  const Box3D b = canonical_box(box);
  return {b.center.x / g.ref,
          b.center.y / g.ref,
          b.center.z / g.ref,
          std::log(b.size.length / g.mean_prior.length),
          std::log(b.size.width / g.mean_prior.width),
          std::log(b.size.height / g.mean_prior.height),
          std::sin(2.0 * b.yaw),
          std::cos(2.0 * b.yaw)};
}

inline void renormalize_yaw(StateVec& x) {
  const double n = std::hypot(x[6], x[7]);
  if (n < 1e-12) {
    x[6] = 0.0;
    x[7] = 1.0;
  } else if (std::abs(n - 1.0) > 1e-12) {
    x[6] /= n;
    x[7] /= n;
  }
}

inline double state_yaw(const StateVec& x) { return wrap_half_turn(0.5 * std::atan2(x[6], x[7])); }

// Log sizes are clamped so that a wildly noised state still yields a finite box.
inline constexpr double kLogSizeClamp = 4.0;

inline Box3D denormalize_state(StateVec x, const GroupScale& g) {
  renormalize_yaw(x);
  auto sz = [](double base, double v) {
    return std::max(kSizeFloor, base * std::exp(std::clamp(v, -kLogSizeClamp, kLogSizeClamp)));
  };
  return Box3D{{x[0] * g.ref, x[1] * g.ref, x[2] * g.ref},
               {sz(g.mean_prior.length, x[3]), sz(g.mean_prior.width, x[4]), sz(g.mean_prior.height, x[5])},
               state_yaw(x)};
}

// ---------------------------------------------------------------------------
// Diffusion schedule
// ---------------------------------------------------------------------------

struct ScheduleConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int steps = 8;
  int t_start = 200;
  double eta = 0.0;

  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

inline void validate(const ScheduleConfig& c) {
  if (c.T < 1) throw ConfigError("schedule.T must be >= 1");
  if (!(c.beta_start > 0.0) || !(c.beta_end >= c.beta_start) || !(c.beta_end < 1.0)) {
    throw ConfigError("schedule ramp must satisfy 0 < start <= end < 1");
  }
  if (c.t_start < 1 || c.t_start > c.T) throw ConfigError("schedule.t_start must lie in [1, T]");
  if (c.steps < 1 || c.steps > c.t_start) throw ConfigError("schedule.S must lie in [1, t_start]");
  if (!(c.eta >= 0.0 && c.eta <= 1.0)) throw ConfigError("schedule.eta must lie in [0, 1]");
}

/// Linear beta ramp. The state is carried in variance-exploding form
/// x_t = x_0 + sigma_t * eps with sigma_t = sqrt((1 - abar_t) / abar_t), the
/// rescaling of the usual sqrt(abar) x_0 + sqrt(1 - abar) eps that keeps a
/// residual x_0 - x_t meaningful in box units.
class DiffusionSchedule {
 public:
  DiffusionSchedule() : DiffusionSchedule(ScheduleConfig{}) {}

  explicit DiffusionSchedule(const ScheduleConfig& cfg) : cfg_(cfg) {
    validate(cfg_);
    abar_.resize(cfg_.T + 1);
    abar_[0] = 1.0;
    for (int t = 1; t <= cfg_.T; ++t) {
      const double beta =
          cfg_.T == 1 ? cfg_.beta_start
                      : cfg_.beta_start + (cfg_.beta_end - cfg_.beta_start) * (t - 1) / static_cast<double>(cfg_.T - 1);
      abar_[t] = abar_[t - 1] * (1.0 - beta);
    }
  }

  const ScheduleConfig& config() const { return cfg_; }
  int T() const { return cfg_.T; }

  double alpha_bar(int t) const { return abar_.at(static_cast<std::size_t>(t)); }
  double sigma(int t) const { return std::sqrt((1.0 - alpha_bar(t)) / alpha_bar(t)); }

  /// Descending timesteps from t_start, followed by 0.
  std::vector<int> inference_steps(int steps, int t_start) const {
    std::vector<int> out;
    for (int k = 0; k < steps; ++k) {
      out.push_back(static_cast<int>(std::lround(static_cast<double>(t_start) * (steps - k) / steps)));
    }
    out.push_back(0);
    return out;
  }

  /// One deterministic-path transition from t to t_next given the clean
  /// estimate. With eta > 0 a gaussian term of the matching scale is added.
  StateVec transition(const StateVec& x_t, const StateVec& x0_hat, int t, int t_next, double eta, Rng* rng) const {
    const double s_t = sigma(t);
    const double a_next = alpha_bar(t_next), a_t = alpha_bar(t);
    double noise_vp = 0.0;
    if (eta > 0.0 && t_next > 0) {
      noise_vp = eta * std::sqrt((1.0 - a_next) / (1.0 - a_t)) * std::sqrt(std::max(0.0, 1.0 - a_t / a_next));
    }
    const double dir = std::sqrt(std::max(0.0, (1.0 - a_next - noise_vp * noise_vp) / a_next));
    const double noise = noise_vp / std::sqrt(a_next);
    StateVec out{};
    for (std::size_t i = 0; i < kStateDim; ++i) {
      const double eps_hat = s_t > 0.0 ? (x_t[i] - x0_hat[i]) / s_t : 0.0;
      out[i] = x0_hat[i] + dir * eps_hat;
      if (noise > 0.0 && rng) out[i] += noise * normal(*rng);
    }
    return out;
  }

 private:
  ScheduleConfig cfg_;
  std::vector<double> abar_;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ModelConfig {
  int width = 32;        // feature width C
  int hidden = 64;       // head hidden width
  int window = 8;        // tokens per side of the box-aligned window
  double window_scale = 1.25;
  double window_pad = 0.5;  // meters
  int super_dim = 16;
  int time_dim = 32;
  double half_extent = 40.0;
  double cell = 0.25;
  double r_max = 60.0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  if (c.width < 1 || c.hidden < 1 || c.window < 1 || c.super_dim < 1) throw ConfigError("model widths must be >= 1");
  if (c.time_dim < 2 || c.time_dim % 2 != 0) throw ConfigError("model.time_dim must be a positive even number");
  if (!(c.window_scale > 0.0) || !(c.window_pad >= 0.0)) throw ConfigError("model window must be positive");
  if (!(c.r_max > 0.0)) throw ConfigError("model.r_max must be positive");
}

// Points whose cell maximum height exceeds this are treated as above ground.
inline constexpr double kElevatedZ = 0.15;

// Local feature: the six grid channels under the box center, followed by the
// count, mean and central second moments of above-ground points in the window.
inline constexpr std::size_t kLocalFeatures = BevGrid::kChannels + 6;
inline constexpr std::size_t kBoxFeatures = 10;
inline constexpr std::size_t kPooledChannels = 6;
inline constexpr std::size_t kTokenFeatures = kPooledChannels + 7;

/// Output of one residual prediction.
struct Prediction {
  StateVec delta{};
  double logit = 0.0;
  bool out_of_extent = false;
};

/// Anything that predicts the residual x_0 - x_t for a state.
template <class P>
concept ResidualPredictor = requires(const P& p, const BevGrid& g, const StateVec& x, int t, int s) {
  { p.predict(g, x, t, s) } -> std::convertible_to<Prediction>;
};

/// Per-sample network inputs; none of these carry gradients.
struct ModelInputs {
  nn::Tensor local;   // 1 x kLocalFeatures
  nn::Tensor box;     // 1 x kBoxFeatures
  nn::Tensor tokens;  // L x kTokenFeatures
  nn::Tensor time;    // 1 x time_dim
  int super_category = 0;
  double cos_t = 1.0, sin_t = 0.0;    // box frame
  double sin2 = 0.0, cos2 = 1.0;      // doubled-angle frame
  bool out_of_extent = false;
};

/// Conditional residual network: a query built from the BEV feature under the
/// box center and an embedding of the box attends over box-aligned BEV
/// tokens; timestep and super-category embeddings modulate the result; two
/// heads emit the 8-D residual and a confidence logit.
class DenoiserModel {
 public:
  struct Cache {
    nn::Tensor a, b1, g1, phi, qin, qp, keys, values, r, f;
    nn::AttentionCache att;
    nn::LayerNorm::Cache ln;
    nn::Tensor es, cin, c1, gc1, econd, gecond, gb, ft, h1, gh1, raw, k1, gk1;
    Prediction out;
  };

  explicit DenoiserModel(const ModelConfig& mc = {}, const ScheduleConfig& sc = {}, std::uint64_t seed = 0)
      : config_(mc), schedule_(sc), scales_(default_group_scales()) {
    validate(config_);
    Rng rng(derive_seed(seed, {0x1417}));
    const auto C = static_cast<std::size_t>(mc.width), H = static_cast<std::size_t>(mc.hidden);
    local_ = nn::Linear("local", kLocalFeatures, C, rng);
    box1_ = nn::Linear("box1", kBoxFeatures, C, rng);
    box2_ = nn::Linear("box2", C, C, rng);
    query_ = nn::Linear("query", 2 * C, C, rng);
    key_ = nn::Linear("key", kTokenFeatures, C, rng);
    value_ = nn::Linear("value", kTokenFeatures, C, rng);
    norm_ = nn::LayerNorm("norm", C);
    super_ = nn::Embedding("super", kNumSuperCategories, static_cast<std::size_t>(mc.super_dim), rng);
    cond1_ = nn::Linear("cond1", static_cast<std::size_t>(mc.time_dim + mc.super_dim), C, rng);
    cond2_ = nn::Linear("cond2", C, C, rng);
    film_ = nn::Linear("film", C, 2 * C, rng, 0.5);
    for (std::size_t c = 0; c < C; ++c) film_.bias.value[c] = 1.0;  // gamma starts near 1
    head1_ = nn::Linear("head1", C, H, rng);
    head2_ = nn::Linear("head2", H, kStateDim, rng);
    head2_.zero_init();
    conf1_ = nn::Linear("conf1", C, H, rng);
    conf2_ = nn::Linear("conf2", H, 1, rng);
  }

  DenoiserModel(const DenoiserModel& o) : DenoiserModel(o.config_, o.schedule_.config()) { copy_from(o); }
  DenoiserModel& operator=(const DenoiserModel& o) {
    if (this != &o) {
      DenoiserModel tmp(o);
      std::swap(*this, tmp);
    }
    return *this;
  }
  DenoiserModel(DenoiserModel&&) = default;
  DenoiserModel& operator=(DenoiserModel&&) = default;

  const ModelConfig& config() const { return config_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  const GroupScales& scales() const { return scales_; }
  std::int64_t trained_steps() const { return trained_steps_; }
  void set_trained_steps(std::int64_t s) { trained_steps_ = s; }

  nn::ParameterList parameters() {
    nn::ParameterList ps;
    for (auto* l : {&local_, &box1_, &box2_, &query_, &key_, &value_}) l->collect(ps);
    norm_.collect(ps);
    super_.collect(ps);
    for (auto* l : {&cond1_, &cond2_, &film_, &head1_, &head2_, &conf1_, &conf2_}) l->collect(ps);
    return ps;
  }

  std::vector<const nn::Parameter*> parameters() const {
    auto ps = const_cast<DenoiserModel*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  /// Zeroes the residual output layer so the model predicts no change.
  void zero_residual_head() { head2_.zero_init(); }

  nn::Tensor time_embedding(int t) const {
    const std::size_t half = static_cast<std::size_t>(config_.time_dim / 2);
    nn::Tensor e = nn::Tensor::matrix(1, 2 * half);
    for (std::size_t k = 0; k < half; ++k) {
      const double w = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
      e[k] = std::sin(t * w);
      e[half + k] = std::cos(t * w);
    }
    return e;
  }

  ModelInputs make_inputs(const BevGrid& bev, const StateVec& state, int t, int super) const {
    if (super < 0 || super >= kNumSuperCategories) throw ConfigError("super category index out of range");
    StateVec x = state;
    renormalize_yaw(x);
    const GroupScale& g = scales_[super];
    ModelInputs in;
    in.super_category = super;
    in.sin2 = x[6];
    in.cos2 = x[7];
    const double theta = 0.5 * std::atan2(x[6], x[7]);
    in.cos_t = std::cos(theta);
    in.sin_t = std::sin(theta);

    const double cx = x[0] * g.ref, cy = x[1] * g.ref, cz = x[2] * g.ref;
    in.out_of_extent = !bev.contains(cx, cy);
    const double qx = std::clamp(cx, -bev.half_extent, bev.half_extent);
    const double qy = std::clamp(cy, -bev.half_extent, bev.half_extent);

    const auto c0 = bev.sample(qx, qy);
    std::array<double, kLocalFeatures> loc{c0[0], 0.5 * c0[1], 0.5 * c0[2], 0.5 * c0[3], c0[4], c0[5] / config_.r_max};

    auto clampl = [](double v) { return std::clamp(v, -kLogSizeClamp, kLogSizeClamp); };
    const double l = g.mean_prior.length * std::exp(clampl(x[3]));
    const double w = g.mean_prior.width * std::exp(clampl(x[4]));
    const double h = g.mean_prior.height * std::exp(clampl(x[5]));
    const double range = std::hypot(cx, cy);
    // Bearing of the ego origin seen from the box center, in the box frame.
    const double ex = -in.cos_t * cx - in.sin_t * cy, ey = in.sin_t * cx - in.cos_t * cy;
    const double en = std::max(std::hypot(ex, ey), 1e-9);
    const std::array<double, kBoxFeatures> bf{clampl(x[3]), clampl(x[4]), clampl(x[5]), l / g.ref, w / g.ref, h / g.ref,
                                              ex / en,      ey / en,      range / config_.r_max, cz / g.ref};
    in.box = nn::Tensor::row(bf);

    // Box-aligned pooling: every grid cell whose center falls inside the
    // square window contributes to exactly one of the G x G tokens.
    const std::size_t G = static_cast<std::size_t>(config_.window);
    const double half = std::min(config_.window_scale * 0.5 * std::max(l, w) + config_.window_pad, bev.half_extent);
    const double s = g.ref;
    const double span = 2.0 * half / static_cast<double>(G);
    struct Pool {
      double count = 0.0, elevated = 0.0, zmax = -1e300, zmin = 1e300, zsum = 0.0, cells = 0.0, occupied = 0.0;
    };
    std::vector<Pool> pool(G * G);
    double m_n = 0.0, m_u = 0.0, m_v = 0.0, m_uu = 0.0, m_vv = 0.0, m_uv = 0.0;
    const double reach = half * std::sqrt(2.0);
    auto cell_range = [&](double center) {
      const double lo = std::floor((center - reach + bev.half_extent) / bev.cell);
      const double hi = std::floor((center + reach + bev.half_extent) / bev.cell);
      const double top = static_cast<double>(bev.n) - 1.0;
      return std::pair<std::size_t, std::size_t>{static_cast<std::size_t>(std::clamp(lo, 0.0, top)),
                                                 static_cast<std::size_t>(std::clamp(hi, 0.0, top))};
    };
    const auto [ix0, ix1] = cell_range(qx);
    const auto [iy0, iy1] = cell_range(qy);
    for (std::size_t iy = iy0; iy <= iy1; ++iy) {
      const double py = -bev.half_extent + (static_cast<double>(iy) + 0.5) * bev.cell - qy;
      for (std::size_t ix = ix0; ix <= ix1; ++ix) {
        const double px = -bev.half_extent + (static_cast<double>(ix) + 0.5) * bev.cell - qx;
        const double u = in.cos_t * px + in.sin_t * py, v = -in.sin_t * px + in.cos_t * py;
        if (std::abs(u) >= half || std::abs(v) >= half) continue;
        const auto a = std::min(G - 1, static_cast<std::size_t>((u + half) / span));
        const auto b = std::min(G - 1, static_cast<std::size_t>((v + half) / span));
        Pool& p = pool[a * G + b];
        p.cells += 1.0;
        const double lc = bev.at(0, iy, ix);
        if (lc <= 0.0) continue;
        const double n = std::expm1(lc);
        p.occupied += 1.0;
        p.count += n;
        p.zmax = std::max(p.zmax, bev.at(1, iy, ix));
        p.zmin = std::min(p.zmin, bev.at(2, iy, ix));
        p.zsum += n * bev.at(3, iy, ix);
        if (bev.at(1, iy, ix) > kElevatedZ) {
          p.elevated += n;
          const double us = u / s, vs = v / s;
          m_n += n;
          m_u += n * us;
          m_v += n * vs;
          m_uu += n * us * us;
          m_vv += n * vs * vs;
          m_uv += n * us * vs;
        }
      }
    }
    if (m_n > 0.0) {
      loc[6] = std::log1p(m_n);
      loc[7] = m_u / m_n;
      loc[8] = m_v / m_n;
      const double mu = m_u / m_n, mv = m_v / m_n;
      const double cuu = m_uu / m_n - mu * mu, cvv = m_vv / m_n - mv * mv, cuv = m_uv / m_n - mu * mv;
      loc[9] = cuu - cvv;
      loc[10] = 2.0 * cuv;
      loc[11] = cuu + cvv;
    }
    in.local = nn::Tensor::row(loc);

    in.tokens = nn::Tensor::matrix(G * G, kTokenFeatures);
    for (std::size_t a = 0; a < G; ++a) {
      for (std::size_t b = 0; b < G; ++b) {
        const std::size_t r = a * G + b;
        const Pool& p = pool[r];
        if (p.occupied > 0.0) {
          in.tokens(r, 0) = std::log1p(p.count);
          in.tokens(r, 1) = std::log1p(p.elevated);
          in.tokens(r, 2) = 0.5 * p.zmax;
          in.tokens(r, 3) = 0.5 * p.zmin;
          in.tokens(r, 4) = 0.5 * p.zsum / p.count;
          in.tokens(r, 5) = p.occupied / p.cells;
        }
        const double u = half * (-1.0 + (2.0 * a + 1.0) / G), v = half * (-1.0 + (2.0 * b + 1.0) / G);
        const double us = u / s, vs = v / s;
        std::size_t c = kPooledChannels;
        in.tokens(r, c++) = us;
        in.tokens(r, c++) = vs;
        in.tokens(r, c++) = us * us - vs * vs;
        in.tokens(r, c++) = 2.0 * us * vs;
        in.tokens(r, c++) = us * us + vs * vs;
        in.tokens(r, c++) = u / (0.5 * l);
        in.tokens(r, c++) = v / (0.5 * w);
      }
    }
    in.time = time_embedding(t);
    return in;
  }

  void forward(const ModelInputs& in, Cache& k) const {
    const auto C = static_cast<std::size_t>(config_.width);
    k.a = local_.forward(in.local);
    k.b1 = box1_.forward(in.box);
    k.g1 = nn::gelu(k.b1);
    k.phi = box2_.forward(k.g1);
    k.qin = nn::concat_cols(k.a, k.phi);
    k.qp = query_.forward(k.qin);
    k.keys = key_.forward(in.tokens);
    k.values = value_.forward(in.tokens);
    k.r = nn::add(k.qp, nn::attention(k.qp, k.keys, k.values, &k.att));
    k.f = norm_.forward(k.r, &k.ln);

    k.es = super_.forward(static_cast<std::size_t>(in.super_category));
    k.cin = nn::concat_cols(in.time, k.es);
    k.c1 = cond1_.forward(k.cin);
    k.gc1 = nn::gelu(k.c1);
    k.econd = cond2_.forward(k.gc1);
    k.gecond = nn::gelu(k.econd);
    k.gb = film_.forward(k.gecond);
    k.ft = nn::Tensor::matrix(1, C);
    for (std::size_t c = 0; c < C; ++c) k.ft[c] = k.gb[c] * k.f[c] + k.gb[C + c];

    k.h1 = head1_.forward(k.ft);
    k.gh1 = nn::gelu(k.h1);
    k.raw = head2_.forward(k.gh1);
    k.k1 = conf1_.forward(k.ft);
    k.gk1 = nn::gelu(k.k1);
    const nn::Tensor logit = conf2_.forward(k.gk1);

    const nn::Tensor& o = k.raw;
    Prediction& p = k.out;
    p.delta = {in.cos_t * o[0] - in.sin_t * o[1],
               in.sin_t * o[0] + in.cos_t * o[1],
               o[2],
               o[3],
               o[4],
               o[5],
               in.sin2 * o[6] + in.cos2 * o[7],
               in.cos2 * o[6] - in.sin2 * o[7]};
    p.logit = logit[0];
    p.out_of_extent = in.out_of_extent;
    for (double v : p.delta) {
      if (!std::isfinite(v)) throw NumericError("denoiser produced a non-finite residual");
    }
    if (!std::isfinite(p.logit)) throw NumericError("denoiser produced a non-finite confidence");
  }

  /// Accumulates parameter gradients for upstream gradients on the world
  /// residual and the confidence logit.
  void backward(const ModelInputs& in, const Cache& k, const StateVec& d_delta, double d_logit) {
    const auto C = static_cast<std::size_t>(config_.width);
    nn::Tensor d_raw = nn::Tensor::matrix(1, kStateDim);
    d_raw[0] = in.cos_t * d_delta[0] + in.sin_t * d_delta[1];
    d_raw[1] = -in.sin_t * d_delta[0] + in.cos_t * d_delta[1];
    d_raw[2] = d_delta[2];
    d_raw[3] = d_delta[3];
    d_raw[4] = d_delta[4];
    d_raw[5] = d_delta[5];
    d_raw[6] = in.sin2 * d_delta[6] + in.cos2 * d_delta[7];
    d_raw[7] = in.cos2 * d_delta[6] - in.sin2 * d_delta[7];

    nn::Tensor d_ft = head1_.backward(k.ft, nn::gelu_backward(k.h1, head2_.backward(k.gh1, d_raw)));
    const nn::Tensor d_logit_t = nn::Tensor::from({1, 1}, {d_logit});
    nn::accumulate(d_ft, conf1_.backward(k.ft, nn::gelu_backward(k.k1, conf2_.backward(k.gk1, d_logit_t))));

    nn::Tensor d_f = nn::Tensor::matrix(1, C);
    nn::Tensor d_gb = nn::Tensor::matrix(1, 2 * C);
    for (std::size_t c = 0; c < C; ++c) {
      d_f[c] = d_ft[c] * k.gb[c];
      d_gb[c] = d_ft[c] * k.f[c];
      d_gb[C + c] = d_ft[c];
    }
    const nn::Tensor d_econd = nn::gelu_backward(k.econd, film_.backward(k.gecond, d_gb));
    const nn::Tensor d_c1 = nn::gelu_backward(k.c1, cond2_.backward(k.gc1, d_econd));
    const nn::Tensor d_cin = cond1_.backward(k.cin, d_c1);
    super_.backward(static_cast<std::size_t>(in.super_category),
                    nn::slice_cols(d_cin, static_cast<std::size_t>(config_.time_dim), static_cast<std::size_t>(config_.super_dim)));

    const nn::Tensor d_r = norm_.backward(k.ln, d_f);
    const nn::AttentionGrads ag = nn::attention_backward(k.qp, k.keys, k.values, k.att, d_r);
    nn::Tensor d_qp = nn::add(d_r, ag.dq);
    key_.backward(in.tokens, ag.dkeys);
    value_.backward(in.tokens, ag.dvalues);
    const nn::Tensor d_qin = query_.backward(k.qin, d_qp);
    local_.backward(in.local, nn::slice_cols(d_qin, 0, C));
    box1_.backward(in.box, nn::gelu_backward(k.b1, box2_.backward(k.g1, nn::slice_cols(d_qin, C, C))));
  }

  Prediction predict(const BevGrid& bev, const StateVec& x, int t, int super) const {
    Cache k;
    forward(make_inputs(bev, x, t, super), k);
    return k.out;
  }

  /// The modulated feature the heads read; exposed for conditioning checks.
  nn::Tensor modulated_feature(const BevGrid& bev, const StateVec& x, int t, int super) const {
    Cache k;
    forward(make_inputs(bev, x, t, super), k);
    return k.ft;
  }

  void copy_from(const DenoiserModel& o) {
    if (o.config_ != config_) throw ShapeMismatch("model config mismatch");
    auto dst = parameters();
    auto src = o.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = *src[i];
    schedule_ = o.schedule_;
    scales_ = o.scales_;
    trained_steps_ = o.trained_steps_;
  }

  void set_schedule(const ScheduleConfig& sc) { schedule_ = DiffusionSchedule(sc); }
  void set_scales(const GroupScales& s) { scales_ = s; }

 private:
  ModelConfig config_;
  DiffusionSchedule schedule_;
  GroupScales scales_;
  std::int64_t trained_steps_ = 0;

  nn::Linear local_, box1_, box2_, query_, key_, value_;
  nn::LayerNorm norm_;
  nn::Embedding super_;
  nn::Linear cond1_, cond2_, film_, head1_, head2_, conf1_, conf2_;
};

static_assert(ResidualPredictor<DenoiserModel>);

// ---------------------------------------------------------------------------
// Refinement
// ---------------------------------------------------------------------------

struct RefineOptions {
  int steps = 8;
  int t_start = 200;
  double eta = 0.0;
  std::uint64_t seed = 0;
};

struct RefineResult {
  Box3D box;
  double confidence = 0.0;
  bool out_of_extent = false;
};

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

/// Deterministic-path refinement of one box. The refined box is expressed as
/// a change relative to the input, so a predictor with zero residual returns
/// the input box bit for bit.
template <ResidualPredictor P>
RefineResult ddim_refine(const P& model, const DiffusionSchedule& schedule, const GroupScale& g, const BevGrid& bev,
                         const Box3D& box, int super, const RefineOptions& opt) {
  if (opt.steps < 1 || opt.t_start < opt.steps || opt.t_start > schedule.T()) {
    throw ConfigError("refine: need 1 <= S <= t_start <= T");
  }
  if (!(opt.eta >= 0.0 && opt.eta <= 1.0)) throw ConfigError("refine: eta must lie in [0, 1]");
  const StateVec x_init = normalize_box(box, g);
  StateVec x = x_init;
  Rng rng(opt.seed);
  const auto ts = schedule.inference_steps(opt.steps, opt.t_start);
  RefineResult res;
  double logit = 0.0;
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    const Prediction p = model.predict(bev, x, ts[k], super);
    res.out_of_extent = res.out_of_extent || p.out_of_extent;
    logit = p.logit;
    StateVec x0{};
    for (std::size_t i = 0; i < kStateDim; ++i) x0[i] = x[i] + p.delta[i];
    x = schedule.transition(x, x0, ts[k], ts[k + 1], opt.eta, &rng);
    renormalize_yaw(x);
  }
  res.confidence = sigmoid(logit);
  if (x == x_init) {
    res.box = box;
    return res;
  }
  const Box3D c = canonical_box(box);
  auto sz = [&](double base, std::size_t i) {
    // Bounded by the span of the clamped absolute range, so any in-range target stays reachable.
    return std::max(kSizeFloor, base * std::exp(std::clamp(x[i] - x_init[i], -2.0 * kLogSizeClamp, 2.0 * kLogSizeClamp)));
  };
  const double dyaw = 0.5 * (std::atan2(x[6], x[7]) - std::atan2(x_init[6], x_init[7]));
  res.box = Box3D{{c.center.x + (x[0] - x_init[0]) * g.ref, c.center.y + (x[1] - x_init[1]) * g.ref,
                   c.center.z + (x[2] - x_init[2]) * g.ref},
                  {sz(c.size.length, 3), sz(c.size.width, 4), sz(c.size.height, 5)},
                  wrap_half_turn(c.yaw + dyaw)};
  return res;
}

inline RefineResult ddim_refine(const DenoiserModel& model, const BevGrid& bev, const Box3D& box, int super,
                                const RefineOptions& opt) {
  return ddim_refine(model, model.schedule(), model.scales()[super], bev, box, super, opt);
}

// ---------------------------------------------------------------------------
// Confidence loss and score fusion
// ---------------------------------------------------------------------------

struct VarifocalParams {
  double alpha = 0.75;
  double gamma = 2.0;
};

inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline double varifocal_loss(double p, double q, const VarifocalParams& vp = {}) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("varifocal: prediction must lie strictly inside (0, 1)");
  if (!(q >= 0.0 && q <= 1.0)) throw DomainError("varifocal: target must lie in [0, 1]");
  if (q > 0.0) return -q * (q * std::log(p) + (1.0 - q) * std::log1p(-p));
  return -vp.alpha * std::pow(p, vp.gamma) * std::log1p(-p);
}

/// Loss and its derivative with respect to the logit z, p = sigmoid(z),
/// evaluated with log-sigmoid identities for stability.
inline std::pair<double, double> varifocal_from_logit(double z, double q, const VarifocalParams& vp = {}) {
  const double p = sigmoid(z);
  const double log_p = -softplus(-z), log_1mp = -softplus(z);
  if (q > 0.0) return {-q * (q * log_p + (1.0 - q) * log_1mp), q * (p - q)};
  const double pg = std::pow(p, vp.gamma);
  const double loss = -vp.alpha * pg * log_1mp;
  // d/dz [-a p^g log(1-p)] = -a [g p^g (1-p) log(1-p) - p^(g+1)]
  const double grad = -vp.alpha * (vp.gamma * pg * (1.0 - p) * log_1mp - pg * p);
  return {loss, grad};
}

inline double fuse_scores(double iou_conf, double seeker_score, double w_iou = 0.6, double w_seeker = 0.4) {
  if (std::abs(w_iou + w_seeker - 1.0) > 1e-9) throw WeightError("fusion weights must sum to 1");
  if (w_iou < 0.0 || w_seeker < 0.0) throw WeightError("fusion weights must be non-negative");
  return w_iou * iou_conf + w_seeker * seeker_score;
}

// ---------------------------------------------------------------------------
// Evaluation-time systematic bias
// ---------------------------------------------------------------------------

/// Structured perturbation: the center moves toward ego by a fraction of its
/// range, sizes shrink by a fixed factor, and yaw turns by a fixed offset.
struct SystematicBias {
  double shift_per_meter = 0.03;
  double size_scale = 0.85;
  double yaw_offset = 0.0;

  friend bool operator==(const SystematicBias&, const SystematicBias&) = default;
};

inline Box3D apply_systematic_bias(const Box3D& b, const SystematicBias& bias) {
  if (!(bias.size_scale > 0.0) || !(bias.shift_per_meter >= 0.0 && bias.shift_per_meter < 1.0)) {
    throw ConfigError("bias: need size_scale > 0 and shift_per_meter in [0, 1)");
  }
  Box3D out = b;
  const double k = 1.0 - bias.shift_per_meter;
  out.center.x *= k;
  out.center.y *= k;
  out.size = {std::max(kSizeFloor, b.size.length * bias.size_scale), std::max(kSizeFloor, b.size.width * bias.size_scale),
              std::max(kSizeFloor, b.size.height * bias.size_scale)};
  out.yaw = wrap_half_turn(b.yaw + bias.yaw_offset);
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.01;
  double lambda_conf = 1.0;
  VarifocalParams vfl;
  std::uint64_t seed = 0;
  int epochs = 20;
  int batch_size = 16;
  int train_t_max = 200;       // timesteps drawn from [1, train_t_max]
  int min_points = 3;          // gt boxes with fewer interior points are skipped
  int chunk_scenes = 8;        // scenes whose BEV grids are resident together
  std::optional<int> fixed_timestep;
  bool resample_noise = true;  // false: each sample keeps one noise draw
  std::optional<std::int64_t> max_steps;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate(const TrainConfig& c, const DiffusionSchedule& s) {
  if (!(c.lr > 0.0) || !(c.weight_decay >= 0.0)) throw ConfigError("train.lr must be > 0 and train.weight_decay >= 0");
  if (!(c.lambda_conf >= 0.0)) throw ConfigError("train.lambda_conf must be >= 0");
  if (c.epochs < 0 || c.batch_size < 1 || c.chunk_scenes < 1 || c.min_points < 0) {
    throw ConfigError("train: epochs >= 0, batch_size >= 1, chunk_scenes >= 1, min_points >= 0");
  }
  if (c.train_t_max < 1 || c.train_t_max > s.T()) throw ConfigError("train.train_t_max must lie in [1, T]");
  if (c.fixed_timestep && (*c.fixed_timestep < 0 || *c.fixed_timestep > s.T())) {
    throw ConfigError("train.fixed_timestep must lie in [0, T]");
  }
  if (c.max_steps && *c.max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
}

struct SampleLoss {
  double loss = 0.0;
  double l1 = 0.0;
  double vfl = 0.0;
  double target_iou = 0.0;
};

/// Residual L1 plus weighted varifocal loss for one noised state. With
/// `grad_scale` set, parameter gradients are accumulated scaled by it. The
/// confidence target is treated as a constant; pass `fixed_target` to pin it.
inline SampleLoss sample_loss(DenoiserModel& model, const BevGrid& bev, const Box3D& gt, int super, const StateVec& x_t,
                              int t, double lambda_conf, const VarifocalParams& vp,
                              std::optional<double> grad_scale = std::nullopt,
                              std::optional<double> fixed_target = std::nullopt) {
  const GroupScale& g = model.scales()[super];
  const StateVec x0 = normalize_box(gt, g);
  const ModelInputs in = model.make_inputs(bev, x_t, t, super);
  DenoiserModel::Cache k;
  model.forward(in, k);
  SampleLoss out;
  StateVec d_delta{};
  StateVec pred{};
  for (std::size_t i = 0; i < kStateDim; ++i) {
    pred[i] = x_t[i] + k.out.delta[i];
    const double r = pred[i] - x0[i];
    out.l1 += std::abs(r) / kStateDim;
    d_delta[i] = (r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0)) / kStateDim;
  }
  out.target_iou = fixed_target ? *fixed_target : iou_3d(denormalize_state(pred, g), canonical_box(gt));
  const auto [vfl, dz] = varifocal_from_logit(k.out.logit, out.target_iou, vp);
  out.vfl = vfl;
  out.loss = out.l1 + lambda_conf * vfl;
  if (grad_scale) {
    for (auto& d : d_delta) d *= *grad_scale;
    model.backward(in, k, d_delta, lambda_conf * dz * *grad_scale);
  }
  return out;
}

/// Noised state x_t = x_0 + sigma_t * eps with the yaw pair renormalized.
inline StateVec noise_state(const StateVec& x0, double sigma, const StateVec& eps) {
  StateVec x{};
  for (std::size_t i = 0; i < kStateDim; ++i) x[i] = x0[i] + sigma * eps[i];
  renormalize_yaw(x);
  return x;
}

struct TrainSample {
  std::size_t scene = 0;
  std::size_t gt = 0;

  friend bool operator==(const TrainSample&, const TrainSample&) = default;
};

struct LossRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double l1 = 0.0;
  double vfl = 0.0;
};

struct TrainReport {
  std::vector<LossRecord> log;
  std::size_t samples = 0;
  std::int64_t steps_per_epoch = 0;
  std::int64_t total_steps = 0;
};

/// Refuses corpora with any novel-category box and lists trainable boxes.
inline std::vector<TrainSample> collect_samples(std::span<const Scene> corpus, int min_points) {
  std::vector<TrainSample> out;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    const Scene& sc = corpus[s];
    for (std::size_t i = 0; i < sc.gt.size(); ++i) {
      const Category& c = sc.gt[i].category;
      if (!c.is_base) {
        throw ConfigError("training corpus contains novel category '" + c.name + "' (scene " + std::to_string(s) +
                          ", box " + std::to_string(i) + ")");
      }
      if (static_cast<int>(count_points_in_box(sc.gt[i].box, sc.points)) >= min_points) out.push_back({s, i});
    }
  }
  return out;
}

/// Sample order for one epoch: scenes are shuffled and visited in chunks, and
/// boxes are shuffled within each chunk, so only a chunk of BEV grids needs
/// to be resident at a time.
inline std::vector<TrainSample> epoch_order(std::span<const TrainSample> samples, std::size_t n_scenes,
                                            std::uint64_t seed, std::int64_t epoch, int chunk_scenes) {
  Rng rng(derive_seed(seed, {0xE90C, static_cast<std::uint64_t>(epoch)}));
  std::vector<std::vector<TrainSample>> by_scene(n_scenes);
  for (const auto& s : samples) by_scene[s.scene].push_back(s);
  std::vector<std::size_t> scenes;
  for (std::size_t i = 0; i < n_scenes; ++i) {
    if (!by_scene[i].empty()) scenes.push_back(i);
  }
  std::shuffle(scenes.begin(), scenes.end(), rng);
  std::vector<TrainSample> out;
  out.reserve(samples.size());
  for (std::size_t c = 0; c < scenes.size(); c += static_cast<std::size_t>(chunk_scenes)) {
    const std::size_t begin = out.size();
    for (std::size_t j = c; j < std::min(scenes.size(), c + static_cast<std::size_t>(chunk_scenes)); ++j) {
      out.insert(out.end(), by_scene[scenes[j]].begin(), by_scene[scenes[j]].end());
    }
    std::shuffle(out.begin() + static_cast<std::ptrdiff_t>(begin), out.end(), rng);
  }
  return out;
}

/// Trains from the model's current step count up to epochs * steps_per_epoch
/// (or max_steps, if smaller). All randomness is keyed by (seed, step,
/// element), so stopping and resuming yields the same parameters as one
/// uninterrupted run.
inline TrainReport train(DenoiserModel& model, std::span<const Scene> corpus, const TrainConfig& cfg,
                         const std::function<void(const LossRecord&)>& on_step = {}) {
  validate(cfg, model.schedule());
  const auto samples = collect_samples(corpus, cfg.min_points);
  TrainReport rep;
  rep.samples = samples.size();
  const auto B = static_cast<std::int64_t>(cfg.batch_size);
  rep.steps_per_epoch = (static_cast<std::int64_t>(samples.size()) + B - 1) / B;
  rep.total_steps = rep.steps_per_epoch * cfg.epochs;
  if (cfg.max_steps) rep.total_steps = std::min(rep.total_steps, *cfg.max_steps);
  if (samples.empty() || model.trained_steps() >= rep.total_steps) return rep;

  const nn::AdamW opt{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
  const nn::ParameterList params = model.parameters();
  const ModelConfig& mc = model.config();
  const DiffusionSchedule& sched = model.schedule();

  std::int64_t cached_epoch = -1;
  std::vector<TrainSample> order;
  std::map<std::size_t, BevGrid> grids;
  const std::size_t grid_capacity = 2 * static_cast<std::size_t>(cfg.chunk_scenes);

  for (std::int64_t step = model.trained_steps(); step < rep.total_steps; ++step) {
    const std::int64_t epoch = step / rep.steps_per_epoch;
    if (epoch != cached_epoch) {
      order = epoch_order(samples, corpus.size(), cfg.seed, epoch, cfg.chunk_scenes);
      cached_epoch = epoch;
    }
    const std::size_t begin = static_cast<std::size_t>((step % rep.steps_per_epoch) * B);
    const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(B));
    const double scale = 1.0 / static_cast<double>(end - begin);

    nn::zero_grads(params);
    LossRecord rec{step, 0.0, 0.0, 0.0};
    for (std::size_t e = begin; e < end; ++e) {
      const TrainSample& ts = order[e];
      auto it = grids.find(ts.scene);
      if (it == grids.end()) {
        if (grids.size() >= grid_capacity) grids.clear();
        it = grids.emplace(ts.scene, rasterize_bev(corpus[ts.scene], mc.half_extent, mc.cell)).first;
      }
      const GtObject& obj = corpus[ts.scene].gt[ts.gt];
      const int super = obj.category.super_category;

      const std::uint64_t noise_key = cfg.resample_noise ? static_cast<std::uint64_t>(step) : 0;
      Rng rng(derive_seed(cfg.seed, {0x7A11, noise_key, ts.scene, ts.gt}));
      const int t = cfg.fixed_timestep ? *cfg.fixed_timestep
                                       : std::uniform_int_distribution<int>(1, cfg.train_t_max)(rng);
      StateVec eps{};
      for (auto& v : eps) v = normal(rng);
      const StateVec x0 = normalize_box(obj.box, model.scales()[super]);
      const StateVec x_t = noise_state(x0, sched.sigma(t), eps);

      const SampleLoss sl = sample_loss(model, it->second, obj.box, super, x_t, t, cfg.lambda_conf, cfg.vfl, scale);
      rec.loss += sl.loss * scale;
      rec.l1 += sl.l1 * scale;
      rec.vfl += sl.vfl * scale;
    }
    opt.step(params);
    model.set_trained_steps(step + 1);
    rep.log.push_back(rec);
    if (on_step) on_step(rec);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointFormatVersion = 1;

inline json to_json(const ModelConfig& c) {
  return json{{"width", c.width},         {"hidden", c.hidden},         {"window", c.window},
              {"window_scale", c.window_scale}, {"window_pad", c.window_pad}, {"super_dim", c.super_dim},
              {"time_dim", c.time_dim},   {"half_extent", c.half_extent}, {"cell", c.cell},
              {"r_max", c.r_max}};
}

inline ModelConfig model_config_from_json(const json& j, const std::string& path) {
  using namespace jsonio;
  reject_unknown(j, {"width", "hidden", "window", "window_scale", "window_pad", "super_dim", "time_dim", "half_extent",
                     "cell", "r_max"},
                 path);
  ModelConfig c;
  auto geti = [&](const char* k, int& v) {
    if (j.contains(k)) v = static_cast<int>(integer(j[k], join_path(path, k)));
  };
  auto getd = [&](const char* k, double& v) {
    if (j.contains(k)) v = number(j[k], join_path(path, k));
  };
  geti("width", c.width);
  geti("hidden", c.hidden);
  geti("window", c.window);
  getd("window_scale", c.window_scale);
  getd("window_pad", c.window_pad);
  geti("super_dim", c.super_dim);
  geti("time_dim", c.time_dim);
  getd("half_extent", c.half_extent);
  getd("cell", c.cell);
  getd("r_max", c.r_max);
  validate(c);
  return c;
}

inline json to_json(const ScheduleConfig& c) {
  return json{{"T", c.T}, {"ramp", {c.beta_start, c.beta_end}}, {"S", c.steps}, {"t_start", c.t_start}, {"eta", c.eta}};
}

inline ScheduleConfig schedule_config_from_json(const json& j, const std::string& path, ScheduleConfig c = {}) {
  using namespace jsonio;
  reject_unknown(j, {"T", "ramp", "S", "t_start", "eta"}, path);
  if (j.contains("T")) c.T = static_cast<int>(integer(j["T"], join_path(path, "T")));
  if (j.contains("ramp")) {
    const auto r = numbers(j["ramp"], join_path(path, "ramp"), 2);
    c.beta_start = r[0];
    c.beta_end = r[1];
  }
  if (j.contains("S")) c.steps = static_cast<int>(integer(j["S"], join_path(path, "S")));
  if (j.contains("t_start")) c.t_start = static_cast<int>(integer(j["t_start"], join_path(path, "t_start")));
  if (j.contains("eta")) c.eta = number(j["eta"], join_path(path, "eta"));
  validate(c);
  return c;
}

inline json checkpoint_to_json(const DenoiserModel& model, const json& header = nullptr) {
  json scales = json::array();
  for (const auto& g : model.scales()) {
    scales.push_back(json{{"mean_prior", {g.mean_prior.length, g.mean_prior.width, g.mean_prior.height}}, {"ref", g.ref}});
  }
  auto params = const_cast<DenoiserModel&>(model).parameters();
  json doc{{"version", kCheckpointFormatVersion},
           {"model", to_json(model.config())},
           {"schedule", to_json(model.schedule().config())},
           {"scales", std::move(scales)},
           {"trained_steps", model.trained_steps()},
           {"params", nn::parameters_to_json(params)}};
  if (!header.is_null()) doc["header"] = header;
  return doc;
}

inline DenoiserModel checkpoint_from_json(const json& doc) {
  using namespace jsonio;
  check_version(doc, kCheckpointFormatVersion, "checkpoint");
  const ModelConfig mc = model_config_from_json(require(doc, "model", ""), "model");
  const ScheduleConfig sc = schedule_config_from_json(require(doc, "schedule", ""), "schedule");
  DenoiserModel model(mc, sc);
  const json& sj = array(require(doc, "scales", ""), "scales", kNumSuperCategories);
  GroupScales scales{};
  for (std::size_t g = 0; g < scales.size(); ++g) {
    const std::string p = index_path("scales", g);
    const auto m = numbers(require(sj[g], "mean_prior", p), join_path(p, "mean_prior"), 3);
    scales[g] = {{m[0], m[1], m[2]}, number(require(sj[g], "ref", p), join_path(p, "ref"))};
  }
  model.set_scales(scales);
  model.set_trained_steps(integer(require(doc, "trained_steps", ""), "trained_steps"));
  nn::parameters_from_json(model.parameters(), require(doc, "params", ""));
  return model;
}

inline void save_checkpoint(const std::filesystem::path& path, const DenoiserModel& model, const json& header = nullptr) {
  write_json_file(path, checkpoint_to_json(model, header));
}

inline DenoiserModel load_checkpoint(const std::filesystem::path& path) {
  try {
    return checkpoint_from_json(read_json_file(path));
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

}  // namespace hqov3d
