// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "hqov3d/nn.hpp"
#include "hqov3d/rng.hpp"

using namespace hqov3d;
using namespace hqov3d::nn;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.values()) v = normal(rng);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Linear, IdentityWeightsPassInputThrough) {
  Rng rng(1);
  Linear lin("id", 3, 3, rng);
  lin.weight.value.fill(0.0);
  for (std::size_t i = 0; i < 3; ++i) lin.weight.value(i, i) = 1.0;
  lin.bias.value.fill(0.0);
  const Tensor x = random_matrix(4, 3, rng);
  EXPECT_EQ(lin.forward(x).values()[5], x.values()[5]);
  const Tensor y = lin.forward(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Linear, ScalarCaseAndHandDerivative) {
  Rng rng(1);
  Linear lin("s", 1, 1, rng);
  lin.weight.value[0] = 2.0;
  lin.bias.value[0] = 1.0;
  const Tensor x = Tensor::from({1, 1}, {3.0});
  EXPECT_DOUBLE_EQ(lin.forward(x)[0], 7.0);
  ParameterList ps;
  lin.collect(ps);
  zero_grads(ps);
  const Tensor dx = lin.backward(x, Tensor::from({1, 1}, {1.0}));
  EXPECT_DOUBLE_EQ(dx[0], 2.0);
  EXPECT_DOUBLE_EQ(lin.weight.grad[0], 3.0);
  EXPECT_DOUBLE_EQ(lin.bias.grad[0], 1.0);
}

TEST(Linear, ShapeMismatchThrows) {
  Rng rng(1);
  Linear lin("m", 3, 2, rng);
  EXPECT_THROW(lin.forward(Tensor::matrix(1, 4)), ShapeMismatch);
  EXPECT_THROW(lin.backward(Tensor::matrix(1, 3), Tensor::matrix(1, 3)), ShapeMismatch);
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  Rng rng(2);
  for (auto [n, in, out] : {std::tuple{1, 1, 1}, {3, 5, 4}, {7, 2, 9}}) {
    Linear lin("l", in, out, rng);
    const Tensor x = random_matrix(n, in, rng), w = random_matrix(n, out, rng);
    ParameterList ps;
    lin.collect(ps);
    auto loss = [&] { return dot(lin.forward(x), w); };
    auto grads = [&] {
      zero_grads(ps);
      lin.backward(x, w);
    };
    const auto rep = gradient_check(ps, loss, grads, 1e-8);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  }
}

TEST(Linear, InputGradientMatchesFiniteDifferences) {
  Rng rng(3);
  Linear lin("l", 4, 3, rng);
  Tensor x = random_matrix(2, 4, rng);
  const Tensor w = random_matrix(2, 3, rng);
  Parameter px("x", x);
  auto loss = [&] { return dot(lin.forward(px.value), w); };
  auto grads = [&] {
    px.grad.fill(0.0);
    accumulate(px.grad, lin.backward(px.value, w));
  };
  EXPECT_TRUE(gradient_check({&px}, loss, grads, 1e-8).passed);
}

TEST(Gelu, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  Parameter x("x", random_matrix(3, 5, rng));
  const Tensor w = random_matrix(3, 5, rng);
  auto loss = [&] { return dot(gelu(x.value), w); };
  auto grads = [&] {
    x.grad.fill(0.0);
    accumulate(x.grad, gelu_backward(x.value, w));
  };
  EXPECT_TRUE(gradient_check({&x}, loss, grads, 1e-6).passed);
  EXPECT_DOUBLE_EQ(gelu(Tensor::from({1, 1}, {0.0}))[0], 0.0);
}

TEST(LayerNorm, NormalizesRowsAndGradientsMatch) {
  Rng rng(5);
  LayerNorm ln("ln", 6);
  const Tensor y0 = ln.forward(random_matrix(2, 6, rng));
  for (std::size_t r = 0; r < 2; ++r) {
    double m = 0;
    for (std::size_t c = 0; c < 6; ++c) m += y0(r, c);
    EXPECT_NEAR(m / 6, 0.0, 1e-12);
  }
  for (auto& g : ln.gain.value.values()) g += 0.3 * normal(rng);
  for (auto& b : ln.shift.value.values()) b += 0.3 * normal(rng);
  Parameter x("x", random_matrix(3, 6, rng));
  const Tensor w = random_matrix(3, 6, rng);
  ParameterList ps{&x};
  ln.collect(ps);
  auto loss = [&] { return dot(ln.forward(x.value), w); };
  auto grads = [&] {
    zero_grads(ps);
    LayerNorm::Cache c;
    ln.forward(x.value, &c);
    accumulate(x.grad, ln.backward(c, w));
  };
  const auto rep = gradient_check(ps, loss, grads, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error << " at " << rep.worst_parameter;
}

TEST(Attention, SingletonKeyReturnsItsValue) {
  Rng rng(6);
  const Tensor q = random_matrix(1, 4, rng), k = random_matrix(1, 4, rng), v = random_matrix(1, 3, rng);
  const Tensor out = attention(q, k, v);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(out[i], v[i]);
}

TEST(Attention, OrthogonalQueryAveragesValues) {
  Rng rng(7);
  const Tensor q = Tensor::from({1, 3}, {1, 0, 0});
  const Tensor k = Tensor::from({3, 3}, {0, 1, 0, 0, 0, 1, 0, -1, 0});
  const Tensor v = random_matrix(3, 2, rng);
  const Tensor out = attention(q, k, v);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out[c], (v(0, c) + v(1, c) + v(2, c)) / 3, 1e-15);
}

TEST(Attention, MatchesDenseRecomputation) {
  Rng rng(8);
  const Tensor q = random_matrix(1, 5, rng), k = random_matrix(7, 5, rng), v = random_matrix(7, 3, rng);
  std::vector<double> s(7);
  double mx = -INFINITY, z = 0;
  for (std::size_t j = 0; j < 7; ++j) {
    double d = 0;
    for (std::size_t c = 0; c < 5; ++c) d += q[c] * k(j, c);
    s[j] = d / std::sqrt(5.0);
    mx = std::max(mx, s[j]);
  }
  for (auto& e : s) z += (e = std::exp(e - mx));
  const Tensor out = attention(q, k, v);
  for (std::size_t c = 0; c < 3; ++c) {
    double want = 0, lo = INFINITY, hi = -INFINITY;
    for (std::size_t j = 0; j < 7; ++j) {
      want += s[j] / z * v(j, c);
      lo = std::min(lo, v(j, c));
      hi = std::max(hi, v(j, c));
    }
    EXPECT_NEAR(out[c], want, 1e-14);
    EXPECT_GE(out[c], lo);
    EXPECT_LE(out[c], hi);
  }
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  Parameter q("q", random_matrix(1, 4, rng)), k("k", random_matrix(6, 4, rng)), v("v", random_matrix(6, 3, rng));
  const Tensor w = random_matrix(1, 3, rng);
  auto loss = [&] { return dot(attention(q.value, k.value, v.value), w); };
  auto grads = [&] {
    zero_grads({&q, &k, &v});
    AttentionCache c;
    attention(q.value, k.value, v.value, &c);
    const auto g = attention_backward(q.value, k.value, v.value, c, w);
    accumulate(q.grad, g.dq);
    accumulate(k.grad, g.dkeys);
    accumulate(v.grad, g.dvalues);
  };
  const auto rep = gradient_check({&q, &k, &v}, loss, grads, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(Attention, ShapeMismatchThrows) {
  EXPECT_THROW(attention(Tensor::matrix(1, 3), Tensor::matrix(4, 2), Tensor::matrix(4, 2)), ShapeMismatch);
  EXPECT_THROW(attention(Tensor::matrix(1, 3), Tensor::matrix(4, 3), Tensor::matrix(5, 2)), ShapeMismatch);
}

TEST(AdamW, ZeroGradientAndZeroDecayLeaveParametersUnchanged) {
  Parameter p("p", Tensor::from({1, 3}, {1.0, -2.0, 0.5}));
  const Tensor before = p.value;
  const AdamW opt{0.1, 0.9, 0.999, 1e-8, 0.0};
  for (int i = 0; i < 5; ++i) opt.step({&p});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(p.value[i], before[i]);
}

TEST(AdamW, OneStepDescendsOnSquare) {
  Parameter w("w", Tensor::from({1, 1}, {1.0}));
  w.grad[0] = 2.0 * w.value[0];
  AdamW{0.1, 0.9, 0.999, 1e-8, 0.0}.step({&w});
  EXPECT_LT(w.value[0], 1.0);
}

TEST(AdamW, ConvergesOnConvexQuadratic) {
  // f(w) = sum_i a_i (w_i - c_i)^2, optimum 0 at w = c.
  const std::vector<double> a{1.0, 3.0, 0.5}, c{0.7, -1.2, 2.0};
  Parameter w("w", Tensor::matrix(1, 3));
  auto f = [&] {
    double s = 0;
    for (std::size_t i = 0; i < 3; ++i) s += a[i] * (w.value[i] - c[i]) * (w.value[i] - c[i]);
    return s;
  };
  const AdamW opt{0.1, 0.9, 0.999, 1e-8, 0.0};
  for (int step = 0; step < 200; ++step) {
    for (std::size_t i = 0; i < 3; ++i) w.grad[i] = 2 * a[i] * (w.value[i] - c[i]);
    opt.step({&w});
  }
  EXPECT_LT(f(), 1e-6);
}

TEST(AdamW, DecayShrinksWeightsWithoutGradient) {
  Parameter p("p", Tensor::from({1, 1}, {2.0}));
  AdamW{0.1, 0.9, 0.999, 1e-8, 0.5}.step({&p});
  EXPECT_NEAR(p.value[0], 2.0 * (1 - 0.1 * 0.5), 1e-12);
}

TEST(GradientCheck, LinearModelIsTight) {
  Rng rng(10);
  Linear lin("l", 6, 4, rng);
  const Tensor x = random_matrix(5, 6, rng), w = random_matrix(5, 4, rng);
  ParameterList ps;
  lin.collect(ps);
  const auto rep = gradient_check(
      ps, [&] { return dot(lin.forward(x), w); },
      [&] {
        zero_grads(ps);
        lin.backward(x, w);
      },
      1e-8);
  EXPECT_LT(rep.max_rel_error, 1e-8);
}

TEST(GradientCheck, CorruptedBackwardIsCaught) {
  Rng rng(11);
  Linear lin("l", 3, 2, rng);
  const Tensor x = random_matrix(2, 3, rng), w = random_matrix(2, 2, rng);
  ParameterList ps;
  lin.collect(ps);
  const auto rep = gradient_check(
      ps, [&] { return dot(lin.forward(x), w); },
      [&] {
        zero_grads(ps);
        lin.backward(x, w);
        lin.weight.grad[1] *= 1.01;
      },
      1e-4);
  EXPECT_FALSE(rep.passed);
  EXPECT_EQ(rep.worst_parameter, "l.weight");
  EXPECT_EQ(rep.worst_index, 1u);
}

TEST(Determinism, ForwardIsBitIdentical) {
  Rng a(12), b(12);
  Linear la("l", 5, 5, a), lb("l", 5, 5, b);
  Rng r(13);
  const Tensor x = random_matrix(3, 5, r);
  EXPECT_EQ(gelu(la.forward(x)).values()[7], gelu(lb.forward(x)).values()[7]);
  const Tensor ya = gelu(la.forward(x)), yb = gelu(lb.forward(x));
  for (std::size_t i = 0; i < ya.size(); ++i) EXPECT_EQ(ya[i], yb[i]);
}

TEST(Checkpoint, ParametersRoundTripExactly) {
  Rng rng(14);
  Linear a("a", 4, 3, rng), b("b", 3, 2, rng);
  ParameterList ps;
  a.collect(ps);
  b.collect(ps);
  for (auto* p : ps) {
    for (auto& v : p->m.values()) v = normal(rng);
    for (auto& v : p->v.values()) v = std::abs(normal(rng));
    p->step = 17;
  }
  const json j = json::parse(parameters_to_json(ps).dump());
  Rng other(99);
  Linear a2("a", 4, 3, other), b2("b", 3, 2, other);
  ParameterList ps2;
  a2.collect(ps2);
  b2.collect(ps2);
  parameters_from_json(ps2, j);
  for (std::size_t k = 0; k < ps.size(); ++k) {
    for (std::size_t i = 0; i < ps[k]->value.size(); ++i) {
      EXPECT_EQ(ps[k]->value[i], ps2[k]->value[i]);
      EXPECT_EQ(ps[k]->m[i], ps2[k]->m[i]);
      EXPECT_EQ(ps[k]->v[i], ps2[k]->v[i]);
    }
    EXPECT_EQ(ps2[k]->step, 17);
  }
  Linear wrong("a", 5, 3, other);
  ParameterList ps3;
  wrong.collect(ps3);
  EXPECT_THROW(parameters_from_json(ps3, j), SchemaError);
}
