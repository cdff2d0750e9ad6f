#pragma once

#include <cmath>
#include <cstdint>

#include "aquant/rng.hpp"
#include "aquant/tensor.hpp"

namespace aquant {

/// Per-tensor uniform quantizer: grid {scale * k : lo <= k <= hi}.
///
/// `tau` is the standard deviation of the Attention Round perturbation in
/// weight units; in grid units the perturbation std is tau / scale.
struct QuantSpec {
  int bits = 8;
  double scale = 1.0;
  std::int64_t lo = -128;
  std::int64_t hi = 127;
  bool is_signed = true;
  double tau = 0.5;

  static QuantSpec make(int bits, double scale, bool is_signed, double tau = 0.5);

  /// Throws DomainError when an invariant is violated.
  void validate() const;

  /// Grid point k as stored in a float tensor.
  float grid(std::int64_t k) const { return static_cast<float>(scale * static_cast<double>(k)); }
  std::int64_t clip(std::int64_t k) const { return k < lo ? lo : (k > hi ? hi : k); }
  float min_value() const { return grid(lo); }
  float max_value() const { return grid(hi); }

  bool operator==(const QuantSpec&) const = default;
};

/// Round half to even in the default floating-point environment.
inline std::int64_t round_even(double v) { return static_cast<std::int64_t>(std::nearbyint(v)); }

/// Largest k with grid(k) <= w (unclipped). Computed against the float grid so
/// that values already on the grid are fixed points.
std::int64_t floor_index(float w, const QuantSpec& spec);

/// Smallest k with grid(k) >= w (unclipped).
std::int64_t ceil_index(float w, const QuantSpec& spec);

inline std::int64_t nearest_index(float w, const QuantSpec& spec) {
  return round_even(static_cast<double>(w) / spec.scale);
}

template <typename Fn>
Tensorf map_to_grid(const Tensorf& w, const QuantSpec& spec, Fn&& index_of) {
  spec.validate();
  Tensorf out(w.shape());
  for (Index i = 0; i < w.size(); ++i) out[i] = spec.grid(spec.clip(index_of(w[i], i)));
  return out;
}

/// s * clip(round(w / s), l, h), ties to even.
Tensorf quantize_nearest(const Tensorf& w, const QuantSpec& spec);
Tensorf quantize_floor(const Tensorf& w, const QuantSpec& spec);
Tensorf quantize_ceil(const Tensorf& w, const QuantSpec& spec);

/// Rounds up with probability frac(w / s), otherwise down; sampling happens before clipping.
Tensorf quantize_stochastic(const Tensorf& w, const QuantSpec& spec, Rng& rng);

// ---------------------------------------------------------------------------
// Attention Round

/// Trainable perturbation added to w / s before rounding, plus its Adam moments.
struct AlphaState {
  Tensorf alpha;
  Tensorf adam_m;
  Tensorf adam_v;
  std::int64_t step = 0;
};

/// alpha ~ N(0, (tau / s)^2) elementwise, moments zeroed.
AlphaState attention_init(const Shape& weight_shape, const QuantSpec& spec, Rng& rng);

/// s * clip(round(w / s + alpha), l, h), ties to even.
Tensorf attention_forward(const Tensorf& w, const QuantSpec& spec, const AlphaState& state);

/// Factor applied to dL/dz when back-propagating into alpha:
/// 0.5 + 0.5 erf(alpha / (sqrt(2) tau / s)) when dL/dz > 0, else 0.5 - 0.5 erf(...).
double attention_grad_gate(double alpha, double tau, double scale, double loss_grad);

/// Gaussian mass N(w, tau^2) of the bin around grid point k. The first and last
/// bins extend to -inf / +inf, so the masses over [lo, hi] sum to one.
double attention_map_probability(double w, const QuantSpec& spec, std::int64_t k);

/// dL/dalpha from dL/dz (z = quantized weight): straight through the rounding,
/// times s, zero where the clip saturates, times the erf gate.
Tensorf attention_alpha_grad(const Tensorf& w, const QuantSpec& spec, const AlphaState& state,
                             const Tensorf& grad_wq);

// ---------------------------------------------------------------------------
// AdaRound baseline

struct AdaRoundParams {
  double zeta = 1.1;
  double gamma = -0.1;
  double lambda = 0.01;
  double beta_start = 20.0;
  double beta_end = 2.0;
  double warmup = 0.2;  // fraction of iterations without the regularizer
  double lr = 1e-2;

  bool operator==(const AdaRoundParams&) const = default;
};

struct AdaRoundState {
  Tensorf v;
  double zeta = 1.1;
  double gamma_r = -0.1;
  double lambda = 0.01;
  double beta = 20.0;
  Tensorf adam_m;
  Tensorf adam_v;
  std::int64_t step = 0;
};

/// h(V) = clip(sigmoid(V) (zeta - gamma) + gamma, 0, 1).
Tensorf adaround_rectifier(const Tensorf& v, double zeta = 1.1, double gamma_r = -0.1);

/// f(V) = sum 1 - |2 h(V) - 1|^beta.
double adaround_reg(const Tensorf& v, double beta, double zeta = 1.1, double gamma_r = -0.1);

/// V initialised so that h(V) equals the fractional part of w / s.
AdaRoundState adaround_init(const Tensorf& w, const QuantSpec& spec, const AdaRoundParams& params);

/// s * clip(floor(w / s) + h(V), l, h) with the soft rectifier.
Tensorf adaround_forward(const Tensorf& w, const QuantSpec& spec, const AdaRoundState& state);

/// Same with h(V) hardened to {0, 1} at 0.5; always lands on the grid.
Tensorf adaround_hard(const Tensorf& w, const QuantSpec& spec, const AdaRoundState& state);

enum class Rounder { nearest, floor, ceil, stochastic, adaround, attention };

const char* rounder_name(Rounder r);
Rounder parse_rounder(const std::string& name);

}  // namespace aquant
