#include <doctest.h>

#include <cmath>

#include "aquant/quantizers.hpp"

using namespace aquant;

namespace {

Tensorf scalar(float v) { return Tensorf({1}, std::vector<float>{v}); }

Tensorf uniform_tensor(Rng& rng, Index n, double lo, double hi) {
  Tensorf t({n});
  for (auto& v : t.data()) v = static_cast<float>(lo + (hi - lo) * rng.uniform());
  return t;
}

// Exhaustive oracles over the whole integer grid.
float grid_argmin(float w, const QuantSpec& q) {
  std::int64_t best = q.lo;
  for (std::int64_t k = q.lo; k <= q.hi; ++k)
    if (std::fabs(static_cast<double>(w) - q.scale * k) < std::fabs(static_cast<double>(w) - q.scale * best)) best = k;
  return q.grid(best);
}

float bracket_below(float w, const QuantSpec& q) {
  std::int64_t k = q.lo;
  for (std::int64_t j = q.lo; j <= q.hi; ++j)
    if (q.grid(j) <= w) k = j;
  return q.grid(k);
}

float bracket_above(float w, const QuantSpec& q) {
  std::int64_t k = q.hi;
  for (std::int64_t j = q.hi; j >= q.lo; --j)
    if (q.grid(j) >= w) k = j;
  return q.grid(k);
}

}  // namespace

TEST_CASE("QuantSpec invariants") {
  const QuantSpec s4 = QuantSpec::make(4, 0.1, true);
  CHECK(s4.lo == -8);
  CHECK(s4.hi == 7);
  const QuantSpec u4 = QuantSpec::make(4, 0.1, false);
  CHECK(u4.lo == 0);
  CHECK(u4.hi == 15);
  CHECK(QuantSpec::make(8, 1.0, true).lo == -128);
  CHECK_THROWS_AS(QuantSpec::make(1, 0.1, true), DomainError);
  CHECK_THROWS_AS(QuantSpec::make(4, 0.0, true), DomainError);
  CHECK_THROWS_AS(QuantSpec::make(4, 0.1, true, 0.0), DomainError);
  QuantSpec bad = s4;
  bad.hi = 9;
  CHECK_THROWS_AS(bad.validate(), DomainError);
  CHECK_THROWS_AS(quantize_nearest(scalar(0.2f), bad), DomainError);
}

TEST_CASE("nearest, floor, ceil") {
  const QuantSpec q = QuantSpec::make(4, 0.1, true);
  CHECK(quantize_nearest(scalar(0.26f), q)[0] == 0.3f);
  CHECK(quantize_nearest(scalar(5.0f), q)[0] == 0.7f);
  CHECK(quantize_nearest(scalar(-5.0f), q)[0] == q.grid(-8));
  CHECK(quantize_floor(scalar(0.29f), q)[0] == 0.2f);
  CHECK(quantize_ceil(scalar(0.21f), q)[0] == 0.3f);

  const QuantSpec unit = QuantSpec::make(4, 1.0, true);
  CHECK(quantize_nearest(scalar(2.5f), unit)[0] == 2.0f);
  CHECK(quantize_nearest(scalar(3.5f), unit)[0] == 4.0f);
  CHECK(quantize_nearest(scalar(-2.5f), unit)[0] == -2.0f);

  for (std::int64_t k = q.lo; k <= q.hi; ++k) {
    const Tensorf on = scalar(q.grid(k));
    CHECK(quantize_floor(on, q) == on);
    CHECK(quantize_ceil(on, q) == on);
    CHECK(quantize_nearest(on, q) == on);
  }
}

TEST_CASE("nearest/floor/ceil against exhaustive grid oracles") {
  Rng rng(101);
  for (auto [bits, scale] : {std::pair{4, 0.1}, {3, 0.37}, {8, 0.013}, {2, 1.0}}) {
    const QuantSpec q = QuantSpec::make(bits, scale, true);
    const Tensorf w = uniform_tensor(rng, 2500, q.min_value() * 1.3, q.max_value() * 1.3);
    const Tensorf n = quantize_nearest(w, q), f = quantize_floor(w, q), c = quantize_ceil(w, q);
    int mismatches = 0;
    for (Index i = 0; i < w.size(); ++i) {
      mismatches += n[i] != grid_argmin(w[i], q);
      mismatches += f[i] != bracket_below(w[i], q);
      mismatches += c[i] != bracket_above(w[i], q);
    }
    CHECK(mismatches == 0);
  }
}

TEST_CASE("floor <= nearest <= ceil for unclipped inputs") {
  Rng rng(3);
  const QuantSpec q = QuantSpec::make(5, 0.05, true);
  const Tensorf w = uniform_tensor(rng, 1000, q.min_value(), q.max_value());
  const Tensorf f = quantize_floor(w, q), n = quantize_nearest(w, q), c = quantize_ceil(w, q);
  for (Index i = 0; i < w.size(); ++i) {
    CHECK(f[i] <= n[i]);
    CHECK(n[i] <= c[i]);
    CHECK(f[i] <= w[i]);
    CHECK(c[i] >= w[i]);
  }
}

TEST_CASE("stochastic rounding") {
  const QuantSpec q = QuantSpec::make(4, 0.1, true);
  Rng rng(17);
  const Tensorf on = scalar(q.grid(3));
  for (int i = 0; i < 100; ++i) CHECK(quantize_stochastic(on, q, rng) == quantize_nearest(on, q));

  const Index n = 100000;
  const Tensorf w({n}, 0.26f);
  const Tensorf s = quantize_stochastic(w, q, rng);
  Index up = 0;
  for (float v : s.data()) {
    CHECK((v == q.grid(2) || v == q.grid(3)));
    up += v == q.grid(3);
  }
  const double p = static_cast<double>(up) / n;
  const double frac = 0.26f / 0.1 - 2.0;
  CHECK(std::fabs(p - 0.6) <= 0.005);
  CHECK(std::fabs(p - frac) <= 3.0 * std::sqrt(frac * (1 - frac) / n));

  for (float wv : {0.013f, -0.337f, 0.5555f}) {
    const Tensorf ws({n}, wv);
    const double mean = quantize_stochastic(ws, q, rng).flat().cast<double>().mean();
    const double f = static_cast<double>(wv) / q.scale - std::floor(static_cast<double>(wv) / q.scale);
    CHECK(std::fabs(mean - wv) <= 3.0 * q.scale * std::sqrt(f * (1 - f) / n));
  }
}

TEST_CASE("outputs stay on the grid and in range") {
  Rng rng(23);
  const QuantSpec q = QuantSpec::make(3, 0.25, true);
  const Tensorf w = rng_normal(rng, 0.0, 1.5, Index{4000});
  AlphaState st = attention_init(w.shape(), q, rng);
  const AdaRoundState ar = adaround_init(w, q, {});
  for (const Tensorf& out : {quantize_nearest(w, q), quantize_floor(w, q), quantize_ceil(w, q),
                             quantize_stochastic(w, q, rng), attention_forward(w, q, st), adaround_hard(w, q, ar)}) {
    CHECK(quantize_nearest(out, q) == out);
    CHECK(out.flat().minCoeff() >= q.min_value());
    CHECK(out.flat().maxCoeff() <= q.max_value());
  }
}

TEST_CASE("attention forward") {
  const QuantSpec q = QuantSpec::make(4, 0.1, true);
  Rng rng(5);
  const Tensorf w = rng_normal(rng, 0.0, 0.3, Index{500});
  AlphaState zero{Tensorf(w.shape()), Tensorf(w.shape()), Tensorf(w.shape()), 0};
  CHECK(attention_forward(w, q, zero) == quantize_nearest(w, q));

  AlphaState one{Tensorf({1}, 1.3f), Tensorf({1}), Tensorf({1}), 0};
  CHECK(attention_forward(scalar(0.26f), q, one)[0] == 0.4f);
  one.alpha[0] = 1e6f;
  CHECK(attention_forward(scalar(0.26f), q, one)[0] == q.max_value());
  one.alpha[0] = -1e6f;
  CHECK(attention_forward(scalar(0.26f), q, one)[0] == q.min_value());
  CHECK_THROWS_AS(attention_forward(Tensorf({2}), q, one), ShapeError);
}

TEST_CASE("attention init") {
  const QuantSpec q = QuantSpec::make(4, 0.1, true, 0.5);
  Rng a(99), b(99);
  const AlphaState st = attention_init({1000, 1000}, q, a);
  const double mean = st.alpha.flat().cast<double>().mean();
  const double sd = std::sqrt((st.alpha.flat().cast<double>() - mean).square().mean());
  CHECK(std::fabs(sd - 5.0) <= 0.02);
  CHECK(st.adam_m.flat().abs().maxCoeff() == 0.0f);
  CHECK(st.adam_v.flat().abs().maxCoeff() == 0.0f);
  CHECK(st.step == 0);
  CHECK(attention_init({1000, 1000}, q, b).alpha == st.alpha);

  const QuantSpec tiny = QuantSpec::make(4, 0.1, true, 1e-9);
  Rng c(1);
  const Tensorf w = rng_normal(c, 0.0, 0.3, Index{1000});
  const AlphaState z = attention_init(w.shape(), tiny, c);
  CHECK(z.alpha.flat().abs().maxCoeff() < 1e-6f);
  CHECK(attention_forward(w, tiny, z) == quantize_nearest(w, tiny));
}

TEST_CASE("attention gradient gate") {
  const double tau = 0.05, s = 0.1, unit = tau / s;
  CHECK(attention_grad_gate(0.0, tau, s, 1.0) == 0.5);
  CHECK(attention_grad_gate(0.0, tau, s, -1.0) == 0.5);
  CHECK(std::fabs(attention_grad_gate(3 * unit, tau, s, 1.0) - 0.99865) <= 1e-4);
  CHECK(attention_grad_gate(-10 * unit, tau, s, 1.0) <= 1e-9);
  CHECK(attention_grad_gate(-10 * unit, tau, s, -1.0) >= 1.0 - 1e-9);
  CHECK_THROWS_AS(attention_grad_gate(0.0, 0.0, s, 1.0), DomainError);
  CHECK_THROWS_AS(attention_grad_gate(0.0, tau, -s, 1.0), DomainError);

  double prev_pos = -1.0, prev_neg = 2.0;
  for (int i = 0; i < 1000; ++i) {
    const double a = -4 * unit + 8 * unit * i / 999.0;
    const double pos = attention_grad_gate(a, tau, s, 1.0), neg = attention_grad_gate(a, tau, s, -1.0);
    CHECK(pos > prev_pos);
    CHECK(neg < prev_neg);
    CHECK(std::fabs(pos + neg - 1.0) <= 1e-9);
    prev_pos = pos;
    prev_neg = neg;
  }
}

TEST_CASE("attention alpha gradient") {
  const QuantSpec q = QuantSpec::make(4, 0.1, true, 0.05);
  const Tensorf w({3}, std::vector<float>{0.12f, -0.31f, 0.69f});
  AlphaState st{Tensorf({3}, std::vector<float>{0.4f, -0.2f, 5.0f}), Tensorf({3}), Tensorf({3}), 0};
  const Tensorf gz({3}, std::vector<float>{2.0f, -1.5f, 1.0f});
  const Tensorf g = attention_alpha_grad(w, q, st, gz);
  CHECK(g[0] == doctest::Approx(2.0 * 0.1 * attention_grad_gate(0.4, 0.05, 0.1, 2.0)));
  CHECK(g[1] == doctest::Approx(-1.5 * 0.1 * attention_grad_gate(-0.2, 0.05, 0.1, -1.5)));
  CHECK(g[2] == 0.0f);  // round(6.9 + 5) = 12 is clipped to 7
}

TEST_CASE("bin probabilities") {
  const QuantSpec q = QuantSpec::make(4, 1.0, true, 0.5);
  CHECK(attention_map_probability(0.0, q, 0) == doctest::Approx(0.6826895).epsilon(1e-7));
  CHECK_THROWS_AS(attention_map_probability(0.0, q, 8), DomainError);
  CHECK_THROWS_AS(attention_map_probability(0.0, q, -9), DomainError);

  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const double scale = 0.01 + rng.uniform();
    const QuantSpec qs = QuantSpec::make(3 + static_cast<int>(rng.below(4)), scale, rng.uniform() < 0.5,
                                         scale * (0.05 + 2 * rng.uniform()));
    const double w = qs.scale * (qs.lo - 2 + (qs.hi - qs.lo + 4) * rng.uniform());
    double total = 0.0;
    for (std::int64_t k = qs.lo; k <= qs.hi; ++k) total += attention_map_probability(w, qs, k);
    CHECK(std::fabs(total - 1.0) <= 1e-9);
  }

  const QuantSpec sharp = QuantSpec::make(4, 0.1, true, 1e-6);
  CHECK(attention_map_probability(sharp.scale * 3, sharp, 3) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("the most likely bin is the nearest grid point") {
  Rng rng(12);
  for (int t = 0; t < 500; ++t) {
    const QuantSpec q = QuantSpec::make(4, 0.1, true, 0.1 * (0.1 + rng.uniform()));
    // Away from the end bins, which also collect the tail mass beyond the clip range.
    const double lo = q.scale * (q.lo + 0.5) + 4 * q.tau, hi = q.scale * (q.hi - 0.5) - 4 * q.tau;
    const double w = lo + (hi - lo) * rng.uniform();
    std::int64_t best = q.lo;
    for (std::int64_t k = q.lo; k <= q.hi; ++k)
      if (attention_map_probability(w, q, k) > attention_map_probability(w, q, best)) best = k;
    CHECK(best == nearest_index(static_cast<float>(w), q));
  }
}

TEST_CASE("AdaRound rectifier and regulariser") {
  CHECK(adaround_rectifier(scalar(20.0f))[0] == 1.0f);
  CHECK(adaround_reg(scalar(20.0f), 2.0) == 0.0);
  CHECK(adaround_rectifier(scalar(0.0f))[0] == doctest::Approx(0.5));
  CHECK(adaround_reg(scalar(0.0f), 2.0) == doctest::Approx(1.0).epsilon(1e-6));

  Rng rng(4);
  const Tensorf v = rng_normal(rng, 0.0, 6.0, Index{2000});
  const Tensorf h = adaround_rectifier(v);
  CHECK(h.flat().minCoeff() >= 0.0f);
  CHECK(h.flat().maxCoeff() <= 1.0f);
  CHECK(adaround_reg(v, 3.0) >= 0.0);
  CHECK(adaround_reg(Tensorf({4}, std::vector<float>{-30, 30, 25, -12}), 2.0) == 0.0);
}

TEST_CASE("AdaRound forward") {
  const QuantSpec q = QuantSpec::make(4, 0.1, true);
  Rng rng(6);
  Tensorf w = rng_normal(rng, 0.0, 0.25, Index{1000});
  AdaRoundState st = adaround_init(w, q, {});

  // Initial V reproduces w inside the clip range.
  const Tensorf soft = adaround_forward(w, q, st);
  for (Index i = 0; i < w.size(); ++i)
    if (w[i] > q.min_value() && w[i] < q.max_value()) CHECK(soft[i] == doctest::Approx(w[i]).epsilon(1e-4));

  st.v = Tensorf(w.shape(), -20.0f);
  CHECK(adaround_forward(w, q, st) == quantize_floor(w, q));
  st.v = Tensorf(w.shape(), 20.0f);
  const Tensorf up = adaround_forward(w, q, st), c = quantize_ceil(w, q);
  for (Index i = 0; i < w.size(); ++i) {
    const std::int64_t k = q.clip(floor_index(w[i], q) + 1);
    CHECK(up[i] == doctest::Approx(q.scale * k));
    if (q.grid(floor_index(w[i], q)) != w[i]) CHECK(up[i] == doctest::Approx(c[i]));
  }

  for (auto& v : st.v.data()) v = rng.uniform() < 0.5 ? -15.0f : 15.0f;
  const Tensorf conv = adaround_forward(w, q, st), f = quantize_floor(w, q);
  for (Index i = 0; i < w.size(); ++i) {
    const bool is_floor = std::fabs(conv[i] - f[i]) < 1e-6;
    const bool is_ceil = std::fabs(conv[i] - q.grid(q.clip(floor_index(w[i], q) + 1))) < 1e-6;
    CHECK((is_floor || is_ceil));
  }
  CHECK_THROWS_AS(adaround_forward(scalar(0.1f), q, st), ShapeError);
}

TEST_CASE("rounder names") {
  for (Rounder r : {Rounder::nearest, Rounder::floor, Rounder::ceil, Rounder::stochastic, Rounder::adaround,
                    Rounder::attention})
    CHECK(parse_rounder(rounder_name(r)) == r);
  CHECK_THROWS_AS(parse_rounder("banker"), ConfigError);
}
