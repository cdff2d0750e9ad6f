#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "aquant/model.hpp"
#include "aquant/quantizers.hpp"

namespace aquant {

/// Calibration hyper-parameters. `tau` is measured in quantization steps: a
/// layer with scale s calibrates with QuantSpec::tau = tau * s, i.e. alpha is
/// initialised with standard deviation `tau` grid units.
struct HyperParams {
  double lr = 4e-4;
  std::int64_t iters = 2000;
  std::int64_t batch = 64;
  std::int64_t calib_size = 1024;
  double tau = 0.5;
  int first_last_bits = 8;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 100;  // best-snapshot evaluation period, in steps
  AdaRoundParams adaround;

  void validate() const;
  bool operator==(const HyperParams&) const = default;
};

/// Mean |delta alpha| per step, split by where alpha sat before the step.
struct GateStats {
  double near_mean = 0.0;      // |alpha| < tau / s
  std::int64_t near_count = 0;
  double far_away_mean = 0.0;  // |alpha| > 3 tau / s and the step moved alpha away from zero
  std::int64_t far_away_count = 0;
  double far_toward_mean = 0.0;
  std::int64_t far_toward_count = 0;
};

struct CalibRecord {
  std::string layer;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<std::pair<std::int64_t, double>> trajectory;  // (step, loss on the calibration set)
  std::int64_t best_step = 0;
  double seconds = 0.0;
  GateStats gate;  // first epoch only; attention calibration
};

/// Scale from a 100-point grid over [0.2 m, m], m = max|W| / max(|l|, h), that
/// minimises ||W - quantize_nearest(W)||^2. Returns 1 for an all-zero W.
double search_scale(const Tensorf& w, int bits, bool is_signed);

/// Squared reconstruction error ||W - quantize_nearest(W, s)||^2.
double nearest_round_error(const Tensorf& w, const QuantSpec& spec);

/// Layer output with the given weights: conv2d or linear, plus bias.
Tensorf layer_output(const LayerSpec& layer, const Tensorf& weight, const Tensorf* bias, const Tensorf& x);

/// Mean squared error between `layer_output(weight_q)` and `layer_output(weight)` over x.
double reconstruction_loss(const LayerSpec& layer, const Tensorf& weight, const Tensorf& weight_q,
                           const Tensorf* bias, const Tensorf& x);

/// Trains alpha by Adam on the layer-output MSE against the full-precision
/// layer, with the erf-gated gradient. Returns the best-evaluated alpha.
std::pair<AlphaState, CalibRecord> calibrate_layer(const LayerSpec& layer, const Tensorf& weight,
                                                   const Tensorf* bias, const Tensorf& x_cal,
                                                   const QuantSpec& spec, const HyperParams& hyper, Rng& rng,
                                                   std::optional<AlphaState> init = std::nullopt);

struct AdaRoundResult {
  Tensorf weight_q;  // hard-rounded, on the grid
  AdaRoundState state;
  CalibRecord record;
};

/// AdaRound baseline: Adam on reconstruction + lambda f(V) with beta annealing.
AdaRoundResult calibrate_adaround_layer(const LayerSpec& layer, const Tensorf& weight, const Tensorf* bias,
                                        const Tensorf& x_cal, const QuantSpec& spec, const HyperParams& hyper,
                                        Rng& rng);

/// Static per-tensor activation quantizers at every activation point, chosen by
/// the same grid search. Downstream statistics see upstream quantizers applied.
std::map<std::string, QuantSpec> calibrate_activations(const ModelGraph& model, const Tensorf& x_cal, int bits_act);

struct QuantizeOptions {
  Rounder rounder = Rounder::attention;
  std::optional<int> act_bits;  // none: activations stay in float
};

struct LayerReport {
  std::string layer;
  int bits_w = 0;
  int bits_a = 32;
  double scale = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double seconds = 0.0;
  CalibRecord record;
};

struct QuantizeResult {
  ModelGraph model;
  std::vector<LayerReport> layers;
};

/// Quantizes every weight layer in order, each calibrated on the outputs of the
/// already-quantized prefix. First and last weight layers use first_last_bits.
QuantizeResult quantize_model(const ModelGraph& model, const Tensorf& calib_images,
                              const std::map<std::string, int>& bit_assignment, const HyperParams& hyper,
                              const QuantizeOptions& options);

/// Total weight storage in bits: sum over weight layers of numel * bits.
std::int64_t weight_bit_budget(const ModelGraph& model, const std::map<std::string, int>& bits,
                               int first_last_bits);

/// Bits per layer after the first/last override.
std::map<std::string, int> effective_bits(const ModelGraph& model, const std::map<std::string, int>& bits,
                                          int first_last_bits);

}  // namespace aquant
