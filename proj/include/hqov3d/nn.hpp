// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hqov3d/errors.hpp"
#include "hqov3d/json_io.hpp"
#include "hqov3d/rng.hpp"

// Small float64 differentiable-computation kernel. Layers expose an explicit
// forward and a backward that accumulates parameter gradients and returns
// the input gradient; there is no tape.
namespace hqov3d::nn {

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) { return Tensor({rows, cols}, fill); }

  static Tensor from(std::vector<std::size_t> shape, std::vector<double> values) {
    if (count(shape) != values.size()) throw ShapeMismatch("tensor value count does not match shape");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
  }

  static Tensor row(std::span<const double> values) {
    return from({1, values.size()}, std::vector<double>(values.begin(), values.end()));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  void check_finite(std::string_view where) const {
    for (double v : data_) {
      if (!std::isfinite(v)) throw NumericError("non-finite value in " + std::string(where));
    }
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view what) {
  if (a.shape() != b.shape()) throw ShapeMismatch(std::string(what) + ": shape mismatch");
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) throw ShapeMismatch("concat_cols: row count mismatch");
  Tensor out = Tensor::matrix(a.rows(), a.cols() + b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) out(r, c) = a(r, c);
    for (std::size_t c = 0; c < b.cols(); ++c) out(r, a.cols() + c) = b(r, c);
  }
  return out;
}

/// Column slice [begin, begin + n).
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t n) {
  if (begin + n > a.cols()) throw ShapeMismatch("slice_cols: out of range");
  Tensor out = Tensor::matrix(a.rows(), n);
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) = a(r, begin + c);
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline void accumulate(Tensor& into, const Tensor& g) {
  require_same_shape(into, g, "accumulate");
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
}

/// A learnable tensor with its gradient and adaptive-moment state.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor m;
  Tensor v;
  std::int64_t step = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor init)
      : name(std::move(n)), value(std::move(init)), grad(value.shape()), m(value.shape()), v(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }

  friend bool operator==(const Parameter&, const Parameter&) = default;
};

using ParameterList = std::vector<Parameter*>;

inline void zero_grads(const ParameterList& params) {
  for (auto* p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// y = x W + b with W stored in x out layout.
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, double gain = 1.0)
      : weight(name + ".weight", Tensor::matrix(in, out)), bias(name + ".bias", Tensor::matrix(1, out)) {
    const double limit = gain * std::sqrt(6.0 / static_cast<double>(in + out));
    for (auto& w : weight.value.values()) w = uniform(rng, -limit, limit);
  }

  std::size_t in_features() const { return weight.value.rows(); }
  std::size_t out_features() const { return weight.value.cols(); }

  Tensor forward(const Tensor& x) const {
    if (x.cols() != in_features()) throw ShapeMismatch(weight.name + ": input width " + std::to_string(x.cols()) +
                                                       " != " + std::to_string(in_features()));
    const std::size_t n = x.rows(), in = in_features(), out = out_features();
    Tensor y = Tensor::matrix(n, out);
    for (std::size_t r = 0; r < n; ++r) {
      double* yr = &y(r, 0);
      for (std::size_t o = 0; o < out; ++o) yr[o] = bias.value[o];
      for (std::size_t i = 0; i < in; ++i) {
        const double xi = x(r, i);
        if (xi == 0.0) continue;
        const double* wr = &weight.value(i, 0);
        for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
      }
    }
    return y;
  }

  /// Accumulates dW, db; returns dx.
  Tensor backward(const Tensor& x, const Tensor& dy) {
    const std::size_t n = x.rows(), in = in_features(), out = out_features();
    if (dy.rows() != n || dy.cols() != out) throw ShapeMismatch(weight.name + ": gradient shape mismatch");
    Tensor dx = Tensor::matrix(n, in);
    for (std::size_t r = 0; r < n; ++r) {
      const double* dyr = &dy(r, 0);
      for (std::size_t o = 0; o < out; ++o) bias.grad[o] += dyr[o];
      for (std::size_t i = 0; i < in; ++i) {
        const double xi = x(r, i);
        double* gw = &weight.grad(i, 0);
        const double* wr = &weight.value(i, 0);
        double acc = 0.0;
        for (std::size_t o = 0; o < out; ++o) {
          gw[o] += xi * dyr[o];
          acc += wr[o] * dyr[o];
        }
        dx(r, i) = acc;
      }
    }
    return dx;
  }

  void zero_init() {
    weight.value.fill(0.0);
    bias.value.fill(0.0);
  }

  void collect(ParameterList& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Parameter weight;
  Parameter bias;
};

// tanh approximation of GELU
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

inline Tensor gelu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.values()) {
    const double u = kGeluC * (v + 0.044715 * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return y;
}

inline Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
  require_same_shape(x, dy, "gelu_backward");
  Tensor dx = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double u = kGeluC * (v + 0.044715 * v * v * v);
    const double th = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
    dx[i] = dy[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
  }
  return dx;
}

/// Row-wise layer normalization with learned gain and shift.
class LayerNorm {
 public:
  struct Cache {
    Tensor xhat;
    std::vector<double> inv_std;
  };

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim, double eps = 1e-5)
      : gain(name + ".gain", Tensor::matrix(1, dim, 1.0)), shift(name + ".shift", Tensor::matrix(1, dim)), eps_(eps) {}

  Tensor forward(const Tensor& x, Cache* cache = nullptr) const {
    const std::size_t d = gain.value.cols();
    if (x.cols() != d) throw ShapeMismatch(gain.name + ": width mismatch");
    Tensor y = Tensor::matrix(x.rows(), d);
    Tensor xhat = Tensor::matrix(x.rows(), d);
    std::vector<double> inv(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      double mean = 0.0;
      for (std::size_t c = 0; c < d; ++c) mean += x(r, c);
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t c = 0; c < d; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
      var /= static_cast<double>(d);
      inv[r] = 1.0 / std::sqrt(var + eps_);
      for (std::size_t c = 0; c < d; ++c) {
        xhat(r, c) = (x(r, c) - mean) * inv[r];
        y(r, c) = gain.value[c] * xhat(r, c) + shift.value[c];
      }
    }
    if (cache) *cache = {std::move(xhat), std::move(inv)};
    return y;
  }

  Tensor backward(const Cache& cache, const Tensor& dy) {
    const std::size_t d = gain.value.cols();
    Tensor dx = Tensor::matrix(dy.rows(), d);
    for (std::size_t r = 0; r < dy.rows(); ++r) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double g = dy(r, c) * gain.value[c];
        gain.grad[c] += dy(r, c) * cache.xhat(r, c);
        shift.grad[c] += dy(r, c);
        sum_g += g;
        sum_gx += g * cache.xhat(r, c);
      }
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t c = 0; c < d; ++c) {
        const double g = dy(r, c) * gain.value[c];
        dx(r, c) = cache.inv_std[r] * (g - inv_d * sum_g - cache.xhat(r, c) * inv_d * sum_gx);
      }
    }
    return dx;
  }

  void collect(ParameterList& out) {
    out.push_back(&gain);
    out.push_back(&shift);
  }

  Parameter gain;
  Parameter shift;

 private:
  double eps_ = 1e-5;
};

/// Lookup table; row i is the embedding of index i.
class Embedding {
 public:
  Embedding() = default;
  Embedding(const std::string& name, std::size_t count, std::size_t dim, Rng& rng)
      : table(name + ".table", Tensor::matrix(count, dim)) {
    for (auto& v : table.value.values()) v = normal(rng, 0.0, 1.0);
  }

  std::size_t count() const { return table.value.rows(); }

  Tensor forward(std::size_t index) const {
    if (index >= count()) throw ShapeMismatch(table.name + ": index out of range");
    return slice_row(index);
  }

  void backward(std::size_t index, const Tensor& dy) {
    for (std::size_t c = 0; c < table.value.cols(); ++c) table.grad(index, c) += dy[c];
  }

  void collect(ParameterList& out) { out.push_back(&table); }

  Parameter table;

 private:
  Tensor slice_row(std::size_t r) const {
    Tensor out = Tensor::matrix(1, table.value.cols());
    for (std::size_t c = 0; c < out.cols(); ++c) out[c] = table.value(r, c);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

struct AttentionCache {
  std::vector<double> weights;  // softmax over keys
};

/// Single-head scaled dot-product attention of one query over L keys:
/// softmax(q K^T / sqrt(d)) V.
inline Tensor attention(const Tensor& q, const Tensor& keys, const Tensor& values, AttentionCache* cache = nullptr) {
  const std::size_t d = q.cols(), l = keys.rows();
  if (q.rows() != 1 || keys.cols() != d || values.rows() != l || l == 0) {
    throw ShapeMismatch("attention: expected q 1xd, K Lxd, V Lxdv with L >= 1");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> w(l);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < l; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += q[c] * keys(i, c);
    w[i] = s * scale;
    mx = std::max(mx, w[i]);
  }
  double z = 0.0;
  for (auto& v : w) {
    v = std::exp(v - mx);
    z += v;
  }
  for (auto& v : w) v /= z;
  Tensor out = Tensor::matrix(1, values.cols());
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t c = 0; c < values.cols(); ++c) out[c] += w[i] * values(i, c);
  if (cache) cache->weights = std::move(w);
  return out;
}

struct AttentionGrads {
  Tensor dq;
  Tensor dkeys;
  Tensor dvalues;
};

inline AttentionGrads attention_backward(const Tensor& q, const Tensor& keys, const Tensor& values,
                                         const AttentionCache& cache, const Tensor& dout) {
  const std::size_t d = q.cols(), l = keys.rows(), dv = values.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionGrads g{Tensor::matrix(1, d), Tensor::matrix(l, d), Tensor::matrix(l, dv)};
  std::vector<double> dw(l);
  double dot = 0.0;
  for (std::size_t i = 0; i < l; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < dv; ++c) {
      g.dvalues(i, c) = cache.weights[i] * dout[c];
      s += dout[c] * values(i, c);
    }
    dw[i] = s;
    dot += cache.weights[i] * s;
  }
  for (std::size_t i = 0; i < l; ++i) {
    const double ds = cache.weights[i] * (dw[i] - dot) * scale;
    for (std::size_t c = 0; c < d; ++c) {
      g.dq[c] += ds * keys(i, c);
      g.dkeys(i, c) = ds * q[c];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment update with decoupled weight decay.
struct AdamW {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void step(const ParameterList& params) const {
    for (auto* p : params) {
      ++p->step;
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(p->step));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(p->step));
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i];
        p->m[i] = beta1 * p->m[i] + (1.0 - beta1) * g;
        p->v[i] = beta2 * p->v[i] + (1.0 - beta2) * g * g;
        const double mhat = p->m[i] / bc1;
        const double vhat = p->v[i] / bc2;
        p->value[i] -= lr * weight_decay * p->value[i];
        p->value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
      p->value.check_finite(p->name);
    }
  }
};

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = true;
};

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries
/// whose true gradient is near zero from reporting roundoff as error.
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the analytic gradient of every entry of every parameter with a
/// central difference of `loss`. `compute_grads` must zero and refill the
/// parameter gradients at the current values.
inline GradCheckReport gradient_check(const ParameterList& params, const std::function<double()>& loss,
                                      const std::function<void()>& compute_grads, double tolerance,
                                      double step = 1e-5, double floor = 1e-6) {
  compute_grads();
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);
  GradCheckReport rep;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + step;
      const double lp = loss();
      p.value[i] = saved - step;
      const double lm = loss();
      p.value[i] = saved;
      const double numeric = (lp - lm) / (2.0 * step);
      const double err = relative_error(analytic[k][i], numeric, floor);
      ++rep.checked;
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_parameter = p.name;
        rep.worst_index = i;
      }
    }
  }
  rep.passed = rep.max_rel_error < tolerance;
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline json tensor_to_json(const Tensor& t) { return json{{"shape", t.shape()}, {"values", t.values()}}; }

inline json parameters_to_json(const ParameterList& params) {
  json list = json::array();
  for (const auto* p : params) {
    list.push_back(json{{"name", p->name},
                        {"shape", p->value.shape()},
                        {"values", p->value.values()},
                        {"m", p->m.values()},
                        {"v", p->v.values()},
                        {"step", p->step}});
  }
  return list;
}

/// Loads values and optimizer state by name; every parameter must be present
/// with an identical shape.
inline void parameters_from_json(const ParameterList& params, const json& list) {
  using namespace jsonio;
  array(list, "params");
  for (auto* p : params) {
    const json* found = nullptr;
    for (const auto& e : list) {
      if (e.is_object() && e.contains("name") && e["name"] == p->name) found = &e;
    }
    if (!found) throw SchemaError("checkpoint is missing parameter '" + p->name + "'");
    const std::string path = "params." + p->name;
    std::vector<std::size_t> shape;
    for (double d : numbers(require(*found, "shape", path), join_path(path, "shape"))) shape.push_back(static_cast<std::size_t>(d));
    if (shape != p->value.shape()) throw SchemaError("checkpoint shape mismatch for '" + p->name + "'");
    auto load = [&](const char* key, Tensor& into) {
      auto vals = numbers(require(*found, key, path), join_path(path, key), into.size());
      std::copy(vals.begin(), vals.end(), into.values().begin());
    };
    load("values", p->value);
    load("m", p->m);
    load("v", p->v);
    p->step = integer(require(*found, "step", path), join_path(path, "step"));
    p->zero_grad();
  }
}

}  // namespace hqov3d::nn
