#include "aquant/quantizers.hpp"

#include <algorithm>
#include <limits>
#include <numbers>

#include "aquant/special.hpp"

namespace aquant {

namespace {

// Keeps w / s representable as int64 for pathological inputs.
double grid_coord(float w, const QuantSpec& spec) {
  return std::clamp(static_cast<double>(w) / spec.scale, -1e15, 1e15);
}

void require_same_shape(const Tensorf& a, const Tensorf& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

QuantSpec QuantSpec::make(int bits, double scale, bool is_signed, double tau) {
  QuantSpec q;
  q.bits = bits;
  q.scale = scale;
  q.is_signed = is_signed;
  q.tau = tau;
  if (bits < 2 || bits > 32) throw DomainError("quantizer bits must be in [2, 32], got " + std::to_string(bits));
  if (is_signed) {
    q.lo = -(std::int64_t{1} << (bits - 1));
    q.hi = (std::int64_t{1} << (bits - 1)) - 1;
  } else {
    q.lo = 0;
    q.hi = (std::int64_t{1} << bits) - 1;
  }
  q.validate();
  return q;
}

void QuantSpec::validate() const {
  if (bits < 2 || bits > 32) throw DomainError("quantizer bits must be in [2, 32]");
  const std::int64_t want_lo = is_signed ? -(std::int64_t{1} << (bits - 1)) : 0;
  const std::int64_t want_hi = is_signed ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
  if (lo != want_lo || hi != want_hi) throw DomainError("quantizer clip bounds inconsistent with bits/signedness");
  if (!(scale > 0.0) || !std::isfinite(scale)) throw DomainError("quantizer scale must be positive and finite");
  if (!(tau > 0.0)) throw DomainError("quantizer tau must be positive");
}

std::int64_t floor_index(float w, const QuantSpec& spec) {
  auto k = static_cast<std::int64_t>(std::floor(grid_coord(w, spec)));
  while (spec.grid(k + 1) <= w) ++k;
  while (spec.grid(k) > w) --k;
  return k;
}

std::int64_t ceil_index(float w, const QuantSpec& spec) {
  auto k = static_cast<std::int64_t>(std::ceil(grid_coord(w, spec)));
  while (spec.grid(k - 1) >= w) --k;
  while (spec.grid(k) < w) ++k;
  return k;
}

Tensorf quantize_nearest(const Tensorf& w, const QuantSpec& spec) {
  return map_to_grid(w, spec, [&](float v, Index) { return round_even(grid_coord(v, spec)); });
}

Tensorf quantize_floor(const Tensorf& w, const QuantSpec& spec) {
  return map_to_grid(w, spec, [&](float v, Index) { return floor_index(v, spec); });
}

Tensorf quantize_ceil(const Tensorf& w, const QuantSpec& spec) {
  return map_to_grid(w, spec, [&](float v, Index) { return ceil_index(v, spec); });
}

Tensorf quantize_stochastic(const Tensorf& w, const QuantSpec& spec, Rng& rng) {
  return map_to_grid(w, spec, [&](float v, Index) {
    const std::int64_t down = floor_index(v, spec);
    if (spec.grid(down) == v) return down;
    const double frac = grid_coord(v, spec) - static_cast<double>(down);
    return rng.uniform() < frac ? down + 1 : down;
  });
}

// ---------------------------------------------------------------------------

AlphaState attention_init(const Shape& weight_shape, const QuantSpec& spec, Rng& rng) {
  spec.validate();
  AlphaState st;
  st.alpha = rng_normal(rng, 0.0, spec.tau / spec.scale, weight_shape);
  st.adam_m = Tensorf(weight_shape);
  st.adam_v = Tensorf(weight_shape);
  return st;
}

Tensorf attention_forward(const Tensorf& w, const QuantSpec& spec, const AlphaState& state) {
  require_same_shape(w, state.alpha, "attention_forward");
  return map_to_grid(w, spec, [&](float v, Index i) {
    return round_even(grid_coord(v, spec) + static_cast<double>(state.alpha[i]));
  });
}

double attention_grad_gate(double alpha, double tau, double scale, double loss_grad) {
  if (!(tau > 0.0) || !(scale > 0.0)) throw DomainError("attention_grad_gate needs tau > 0 and s > 0");
  const double e = erf(alpha / (std::numbers::sqrt2 * (tau / scale)));
  return loss_grad > 0.0 ? 0.5 + 0.5 * e : 0.5 - 0.5 * e;
}

double attention_map_probability(double w, const QuantSpec& spec, std::int64_t k) {
  spec.validate();
  if (k < spec.lo || k > spec.hi)
    throw DomainError("grid index " + std::to_string(k) + " outside [" + std::to_string(spec.lo) + ", " +
                      std::to_string(spec.hi) + "]");
  constexpr double inf = std::numeric_limits<double>::infinity();
  const double lower = k == spec.lo ? -inf : spec.scale * (static_cast<double>(k) - 0.5);
  const double upper = k == spec.hi ? inf : spec.scale * (static_cast<double>(k) + 0.5);
  return gaussian_cdf(upper, w, spec.tau) - gaussian_cdf(lower, w, spec.tau);
}

Tensorf attention_alpha_grad(const Tensorf& w, const QuantSpec& spec, const AlphaState& state,
                             const Tensorf& grad_wq) {
  require_same_shape(w, state.alpha, "attention_alpha_grad");
  require_same_shape(w, grad_wq, "attention_alpha_grad");
  Tensorf g(w.shape());
  for (Index i = 0; i < w.size(); ++i) {
    const double a = state.alpha[i];
    const std::int64_t k = round_even(grid_coord(w[i], spec) + a);
    if (k < spec.lo || k > spec.hi) continue;
    const double dz = grad_wq[i];
    g[i] = static_cast<float>(dz * spec.scale * attention_grad_gate(a, spec.tau, spec.scale, dz));
  }
  return g;
}

// ---------------------------------------------------------------------------

Tensorf adaround_rectifier(const Tensorf& v, double zeta, double gamma_r) {
  Tensorf h(v.shape());
  for (Index i = 0; i < v.size(); ++i)
    h[i] = static_cast<float>(std::clamp(sigmoid(v[i]) * (zeta - gamma_r) + gamma_r, 0.0, 1.0));
  return h;
}

double adaround_reg(const Tensorf& v, double beta, double zeta, double gamma_r) {
  const Tensorf h = adaround_rectifier(v, zeta, gamma_r);
  double acc = 0.0;
  for (float x : h.data()) acc += 1.0 - std::pow(std::fabs(2.0 * x - 1.0), beta);
  return acc;
}

AdaRoundState adaround_init(const Tensorf& w, const QuantSpec& spec, const AdaRoundParams& params) {
  spec.validate();
  AdaRoundState st;
  st.zeta = params.zeta;
  st.gamma_r = params.gamma;
  st.lambda = params.lambda;
  st.beta = params.beta_start;
  st.v = Tensorf(w.shape());
  for (Index i = 0; i < w.size(); ++i) {
    const double rest = grid_coord(w[i], spec) - static_cast<double>(floor_index(w[i], spec));
    const double p = std::clamp((rest - params.gamma) / (params.zeta - params.gamma), 1e-6, 1.0 - 1e-6);
    st.v[i] = static_cast<float>(std::log(p / (1.0 - p)));
  }
  st.adam_m = Tensorf(w.shape());
  st.adam_v = Tensorf(w.shape());
  return st;
}

Tensorf adaround_forward(const Tensorf& w, const QuantSpec& spec, const AdaRoundState& state) {
  require_same_shape(w, state.v, "adaround_forward");
  spec.validate();
  const Tensorf h = adaround_rectifier(state.v, state.zeta, state.gamma_r);
  Tensorf out(w.shape());
  for (Index i = 0; i < w.size(); ++i) {
    const double q = std::clamp(static_cast<double>(floor_index(w[i], spec)) + h[i], static_cast<double>(spec.lo),
                                static_cast<double>(spec.hi));
    out[i] = static_cast<float>(spec.scale * q);
  }
  return out;
}

Tensorf adaround_hard(const Tensorf& w, const QuantSpec& spec, const AdaRoundState& state) {
  require_same_shape(w, state.v, "adaround_hard");
  const Tensorf h = adaround_rectifier(state.v, state.zeta, state.gamma_r);
  return map_to_grid(w, spec, [&](float v, Index i) { return floor_index(v, spec) + (h[i] >= 0.5f ? 1 : 0); });
}

const char* rounder_name(Rounder r) {
  switch (r) {
    case Rounder::nearest: return "nearest";
    case Rounder::floor: return "floor";
    case Rounder::ceil: return "ceil";
    case Rounder::stochastic: return "stochastic";
    case Rounder::adaround: return "adaround";
    case Rounder::attention: return "attention";
  }
  return "?";
}

Rounder parse_rounder(const std::string& name) {
  for (Rounder r : {Rounder::nearest, Rounder::floor, Rounder::ceil, Rounder::stochastic, Rounder::adaround,
                    Rounder::attention})
    if (name == rounder_name(r)) return r;
  throw ConfigError("unknown rounder '" + name + "'");
}

}  // namespace aquant
