#include "aquant/calibration.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include <zlib.h>

namespace aquant {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Patch matrix (conv) or input matrix (linear) of one batch, shared by the
// forward product and the weight gradient of a calibration step.
class BatchOperand {
public:
  BatchOperand(const LayerSpec& layer, const Shape& w_shape, const Tensorf& x) : w_shape_(w_shape) {
    if (const auto* c = std::get_if<layer::Conv2d>(&layer.kind)) {
      conv_ = true;
      geom_ = conv_geometry<float>(x.shape(), w_shape, c->stride, c->pad);
      operand_ = im2col(x, geom_);
    } else if (std::holds_alternative<layer::Linear>(layer.kind)) {
      require_shape(x.rank() == 2 && x.dim(1) == w_shape[1], "linear calibration input mismatch");
      operand_ = x.matrix().cast<double>();
    } else {
      throw CapabilityError("layer '" + layer.name + "' has no quantizable weights");
    }
  }

  Tensorf forward(const Tensorf& wq, const Tensorf* bias) const {
    if (conv_) {
      RowMatrixd y = wq.matrix().cast<double>() * operand_;
      if (bias) y.colwise() += bias->flat().cast<double>().matrix();
      return channels_to_nchw<float>(y, geom_);
    }
    RowMatrixd y = operand_ * wq.matrix().cast<double>().transpose();
    if (bias) y.rowwise() += bias->flat().cast<double>().matrix().transpose();
    return Tensorf::from_matrix(y);
  }

  Tensorf weight_grad(const Tensorf& dy) const {
    if (conv_) return conv2d_weight_grad(operand_, dy, w_shape_);
    Tensorf g(w_shape_);
    g.matrix() = (dy.matrix().cast<double>().transpose() * operand_).cast<float>();
    return g;
  }

private:
  Shape w_shape_;
  bool conv_ = false;
  ConvGeometry geom_{};
  RowMatrixd operand_;
};

Index eval_chunk(const LayerSpec& layer, const Tensorf& x) {
  if (const auto* c = std::get_if<layer::Conv2d>(&layer.kind)) {
    const Index per = c->in_ch * c->kernel * c->kernel * x.dim(2) * x.dim(3);
    return std::max<Index>(1, Index{4} * 1024 * 1024 / std::max<Index>(1, per));
  }
  return 4096;
}

template <typename Fn>
void for_chunks(Index n, Index chunk, Fn&& fn) {
  for (Index s = 0; s < n; s += chunk) fn(s, std::min(chunk, n - s));
}

double mse_against(const LayerSpec& layer, const Tensorf& wq, const Tensorf* bias, const Tensorf& x,
                   const Tensorf& target) {
  double acc = 0.0;
  for_chunks(x.dim(0), eval_chunk(layer, x), [&](Index s, Index n) {
    const Tensorf y = BatchOperand(layer, wq.shape(), x.slice_rows(s, n)).forward(wq, bias);
    const Tensorf t = target.slice_rows(s, n);
    acc += (y.flat().cast<double>() - t.flat().cast<double>()).square().sum();
  });
  return acc / static_cast<double>(target.size());
}

struct Adam {
  double lr, b1, b2, eps;

  void step(Tensorf& param, Tensorf& m, Tensorf& v, std::int64_t t, const Tensorf& g) const {
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (Index i = 0; i < param.size(); ++i) {
      const double mi = b1 * m[i] + (1.0 - b1) * g[i];
      const double vi = b2 * v[i] + (1.0 - b2) * static_cast<double>(g[i]) * g[i];
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      param[i] = static_cast<float>(param[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
    }
  }
};

std::vector<Index> sample_batch(Rng& rng, Index n, Index batch) {
  std::vector<Index> idx(static_cast<std::size_t>(batch));
  for (auto& i : idx) i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
  return idx;
}

void check_calib_inputs(const LayerSpec& layer, const Tensorf& x_cal, const HyperParams& hyper) {
  hyper.validate();
  if (!layer.has_weights()) throw CapabilityError("layer '" + layer.name + "' has no quantizable weights");
  if (x_cal.empty() || x_cal.dim(0) < hyper.batch)
    throw ConfigError("layer '" + layer.name + "' needs at least " + std::to_string(hyper.batch) +
                      " calibration samples");
}

std::uint32_t crc_of(const Tensorf& t) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(t.data().data()), static_cast<uInt>(t.size() * sizeof(float))));
}

}  // namespace

void HyperParams::validate() const {
  if (!(lr >= 0.0) || iters < 0 || batch <= 0 || calib_size <= 0 || !(tau > 0.0) || first_last_bits < 2 ||
      eval_every <= 0)
    throw ConfigError("invalid calibration hyper-parameters");
}

double nearest_round_error(const Tensorf& w, const QuantSpec& spec) {
  const Tensorf q = quantize_nearest(w, spec);
  return (w.flat().cast<double>() - q.flat().cast<double>()).square().sum();
}

double search_scale(const Tensorf& w, int bits, bool is_signed) {
  if (w.empty()) throw SizeError("search_scale on an empty tensor");
  const QuantSpec proto = QuantSpec::make(bits, 1.0, is_signed);
  const double max_abs = w.flat().abs().maxCoeff();
  if (!(max_abs > 0.0)) return 1.0;
  if (!std::isfinite(max_abs)) throw DomainError("search_scale on non-finite weights");
  const double m = max_abs / static_cast<double>(std::max(-proto.lo, proto.hi));
  constexpr int points = 100;
  double best_s = m, best_err = std::numeric_limits<double>::infinity();
  for (int i = 0; i < points; ++i) {
    const double s = i == points - 1 ? m : m * (0.2 + 0.8 * static_cast<double>(i) / (points - 1));
    QuantSpec spec = proto;
    spec.scale = s;
    const double err = nearest_round_error(w, spec);
    if (err < best_err) {
      best_err = err;
      best_s = s;
    }
  }
  return best_s;
}

Tensorf layer_output(const LayerSpec& layer, const Tensorf& weight, const Tensorf* bias, const Tensorf& x) {
  const Index chunk = eval_chunk(layer, x);
  if (x.dim(0) <= chunk) return BatchOperand(layer, weight.shape(), x).forward(weight, bias);
  std::vector<Tensorf> parts;
  for_chunks(x.dim(0), chunk, [&](Index s, Index n) {
    parts.push_back(BatchOperand(layer, weight.shape(), x.slice_rows(s, n)).forward(weight, bias));
  });
  Shape shape = parts.front().shape();
  shape[0] = x.dim(0);
  Tensorf out(shape);
  Index off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
    off += p.size();
  }
  return out;
}

double reconstruction_loss(const LayerSpec& layer, const Tensorf& weight, const Tensorf& weight_q,
                           const Tensorf* bias, const Tensorf& x) {
  return mse_against(layer, weight_q, bias, x, layer_output(layer, weight, bias, x));
}

std::pair<AlphaState, CalibRecord> calibrate_layer(const LayerSpec& layer, const Tensorf& weight,
                                                   const Tensorf* bias, const Tensorf& x_cal,
                                                   const QuantSpec& spec, const HyperParams& hyper, Rng& rng,
                                                   std::optional<AlphaState> init) {
  const auto t0 = Clock::now();
  check_calib_inputs(layer, x_cal, hyper);
  spec.validate();
  const Tensorf target = layer_output(layer, weight, bias, x_cal);
  AlphaState state = init ? std::move(*init) : attention_init(weight.shape(), spec, rng);
  if (state.alpha.shape() != weight.shape()) throw ShapeError("alpha shape differs from weight shape");

  CalibRecord rec;
  rec.layer = layer.name;
  auto evaluate_alpha = [&](std::int64_t step) {
    const double loss = mse_against(layer, attention_forward(weight, spec, state), bias, x_cal, target);
    if (!std::isfinite(loss)) throw CalibrationError(layer.name, "non-finite loss at step " + std::to_string(step));
    rec.trajectory.emplace_back(step, loss);
    return loss;
  };
  rec.initial_loss = evaluate_alpha(0);
  double best_loss = rec.initial_loss;
  Tensorf best_alpha = state.alpha;

  const Adam adam{hyper.lr, hyper.adam_beta1, hyper.adam_beta2, hyper.adam_eps};
  const Index n = x_cal.dim(0);
  const std::int64_t epoch_steps = (n + hyper.batch - 1) / hyper.batch;
  const double unit = spec.tau / spec.scale;
  double near_sum = 0.0, away_sum = 0.0, toward_sum = 0.0;

  for (std::int64_t step = 1; step <= hyper.iters; ++step) {
    const auto idx = sample_batch(rng, n, hyper.batch);
    const Tensorf xb = x_cal.gather_rows(idx);
    const Tensorf yb = target.gather_rows(idx);
    const BatchOperand op(layer, weight.shape(), xb);
    const Tensorf y = op.forward(attention_forward(weight, spec, state), bias);

    Tensorf dy(y.shape());
    double loss = 0.0;
    const double norm = 2.0 / static_cast<double>(y.size());
    for (Index i = 0; i < y.size(); ++i) {
      const double d = static_cast<double>(y[i]) - yb[i];
      loss += d * d;
      dy[i] = static_cast<float>(norm * d);
    }
    if (!std::isfinite(loss)) throw CalibrationError(layer.name, "non-finite loss at step " + std::to_string(step));

    const Tensorf grad = attention_alpha_grad(weight, spec, state, op.weight_grad(dy));
    const bool track = step <= epoch_steps;
    const Tensorf before = track ? state.alpha : Tensorf();
    state.step += 1;
    adam.step(state.alpha, state.adam_m, state.adam_v, state.step, grad);

    if (track) {
      for (Index i = 0; i < before.size(); ++i) {
        const double a = before[i];
        const double delta = static_cast<double>(state.alpha[i]) - a;
        if (std::fabs(a) < unit) {
          near_sum += std::fabs(delta);
          ++rec.gate.near_count;
        } else if (std::fabs(a) > 3.0 * unit && delta != 0.0) {
          if ((delta > 0) == (a > 0)) {
            away_sum += std::fabs(delta);
            ++rec.gate.far_away_count;
          } else {
            toward_sum += std::fabs(delta);
            ++rec.gate.far_toward_count;
          }
        }
      }
    }

    if (step % hyper.eval_every == 0 || step == hyper.iters) {
      const double l = evaluate_alpha(step);
      if (l < best_loss) {
        best_loss = l;
        best_alpha = state.alpha;
        rec.best_step = step;
      }
    }
  }
  auto mean = [](double s, std::int64_t c) { return c ? s / static_cast<double>(c) : 0.0; };
  rec.gate.near_mean = mean(near_sum, rec.gate.near_count);
  rec.gate.far_away_mean = mean(away_sum, rec.gate.far_away_count);
  rec.gate.far_toward_mean = mean(toward_sum, rec.gate.far_toward_count);

  state.alpha = std::move(best_alpha);
  rec.final_loss = best_loss;
  rec.seconds = seconds_since(t0);
  return {std::move(state), std::move(rec)};
}

AdaRoundResult calibrate_adaround_layer(const LayerSpec& layer, const Tensorf& weight, const Tensorf* bias,
                                        const Tensorf& x_cal, const QuantSpec& spec, const HyperParams& hyper,
                                        Rng& rng) {
  const auto t0 = Clock::now();
  check_calib_inputs(layer, x_cal, hyper);
  spec.validate();
  const AdaRoundParams& p = hyper.adaround;
  const Tensorf target = layer_output(layer, weight, bias, x_cal);
  AdaRoundState state = adaround_init(weight, spec, p);
  const AdaRoundState initial = state;

  CalibRecord rec;
  rec.layer = layer.name;
  auto evaluate_hard = [&](const AdaRoundState& st, std::int64_t step) {
    const double loss = mse_against(layer, adaround_hard(weight, spec, st), bias, x_cal, target);
    if (!std::isfinite(loss)) throw CalibrationError(layer.name, "non-finite loss at step " + std::to_string(step));
    rec.trajectory.emplace_back(step, loss);
    return loss;
  };
  rec.initial_loss = evaluate_hard(state, 0);

  const Adam adam{p.lr, hyper.adam_beta1, hyper.adam_beta2, hyper.adam_eps};
  const Index n = x_cal.dim(0);
  const auto warmup = static_cast<std::int64_t>(p.warmup * static_cast<double>(hyper.iters));
  const double width = state.zeta - state.gamma_r;

  std::vector<std::int64_t> floors(static_cast<std::size_t>(weight.size()));
  for (Index i = 0; i < weight.size(); ++i) floors[i] = floor_index(weight[i], spec);

  for (std::int64_t step = 1; step <= hyper.iters; ++step) {
    const bool regularize = step > warmup;
    if (regularize) {
      const double rel = static_cast<double>(step - warmup) / static_cast<double>(std::max<std::int64_t>(1, hyper.iters - warmup));
      state.beta = p.beta_end + (p.beta_start - p.beta_end) * (1.0 - rel);
    }
    const auto idx = sample_batch(rng, n, hyper.batch);
    const Tensorf xb = x_cal.gather_rows(idx);
    const Tensorf yb = target.gather_rows(idx);
    const BatchOperand op(layer, weight.shape(), xb);
    const Tensorf y = op.forward(adaround_forward(weight, spec, state), bias);

    // Per-sample squared norm averaged over the batch, so lambda keeps its usual weight.
    Tensorf dy(y.shape());
    double loss = 0.0;
    const double norm = 2.0 / static_cast<double>(hyper.batch);
    for (Index i = 0; i < y.size(); ++i) {
      const double d = static_cast<double>(y[i]) - yb[i];
      loss += d * d;
      dy[i] = static_cast<float>(norm * d);
    }
    if (!std::isfinite(loss)) throw CalibrationError(layer.name, "non-finite loss at step " + std::to_string(step));
    const Tensorf dwq = op.weight_grad(dy);

    Tensorf grad(weight.shape());
    for (Index i = 0; i < weight.size(); ++i) {
      const double sg = 1.0 / (1.0 + std::exp(-static_cast<double>(state.v[i])));
      const double raw = sg * width + state.gamma_r;
      if (raw <= 0.0 || raw >= 1.0) continue;
      const double h = raw;
      const double dh_dv = sg * (1.0 - sg) * width;
      const double q = static_cast<double>(floors[i]) + h;
      double g = 0.0;
      if (q >= static_cast<double>(spec.lo) && q <= static_cast<double>(spec.hi)) g = dwq[i] * spec.scale;
      if (regularize) {
        const double u = 2.0 * h - 1.0;
        const double au = std::fabs(u);
        if (au > 0.0) g += state.lambda * (-state.beta * std::pow(au, state.beta - 1.0) * (u > 0 ? 2.0 : -2.0));
      }
      grad[i] = static_cast<float>(g * dh_dv);
    }
    state.step += 1;
    adam.step(state.v, state.adam_m, state.adam_v, state.step, grad);

    if (step % hyper.eval_every == 0 && step != hyper.iters) evaluate_hard(state, step);
  }

  // The annealing schedule is only complete at the last step, so the candidates
  // are the initial and the final state.
  const double final_loss = hyper.iters > 0 ? evaluate_hard(state, hyper.iters) : rec.initial_loss;
  if (final_loss <= rec.initial_loss) {
    rec.final_loss = final_loss;
    rec.best_step = hyper.iters;
  } else {
    state = initial;
    rec.final_loss = rec.initial_loss;
    rec.best_step = 0;
  }
  AdaRoundResult out{adaround_hard(weight, spec, state), std::move(state), std::move(rec)};
  out.record.seconds = seconds_since(t0);
  return out;
}

std::map<std::string, QuantSpec> calibrate_activations(const ModelGraph& model, const Tensorf& x_cal, int bits_act) {
  if (x_cal.empty()) throw SizeError("activation calibration needs samples");
  std::map<std::string, bool> points;
  for (const auto& [name, post_relu] : activation_points(model)) points[name] = post_relu;
  std::map<std::string, QuantSpec> specs;
  Tensorf cur = x_cal;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    cur = apply_layer(model, i, cur);
    auto it = points.find(model.layers[i].name);
    if (it == points.end()) continue;
    const bool is_signed = !it->second;
    const QuantSpec spec = QuantSpec::make(bits_act, search_scale(cur, bits_act, is_signed), is_signed);
    cur = quantize_nearest(cur, spec);
    specs[it->first] = spec;
  }
  return specs;
}

std::map<std::string, int> effective_bits(const ModelGraph& model, const std::map<std::string, int>& bits,
                                          int first_last_bits) {
  const auto names = model.weight_layers();
  std::map<std::string, int> out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto it = bits.find(names[i]);
    if (it == bits.end()) throw ConfigError("bit assignment has no entry for layer '" + names[i] + "'");
    out[names[i]] = (i == 0 || i + 1 == names.size()) ? first_last_bits : it->second;
  }
  return out;
}

std::int64_t weight_bit_budget(const ModelGraph& model, const std::map<std::string, int>& bits,
                               int first_last_bits) {
  std::int64_t total = 0;
  for (const auto& [name, b] : effective_bits(model, bits, first_last_bits))
    total += model.param(name + ".weight").size() * b;
  return total;
}

QuantizeResult quantize_model(const ModelGraph& model, const Tensorf& calib_images,
                              const std::map<std::string, int>& bit_assignment, const HyperParams& hyper,
                              const QuantizeOptions& options) {
  hyper.validate();
  for (const auto& l : model.layers)
    if (std::holds_alternative<layer::BatchNorm>(l.kind))
      throw StructureError("quantize_model expects a BN-fused model; found '" + l.name + "'");
  if (calib_images.empty() || calib_images.dim(0) < hyper.calib_size)
    throw SizeError("need " + std::to_string(hyper.calib_size) + " calibration samples");
  const auto bits = effective_bits(model, bit_assignment, hyper.first_last_bits);

  std::map<std::string, bool> act_points;
  for (const auto& [name, post_relu] : activation_points(model)) act_points[name] = post_relu;

  QuantizeResult result{model, {}};
  ModelGraph& qm = result.model;
  qm.quant = QuantMetadata{};
  qm.quant.rounder = rounder_name(options.rounder);
  qm.quant.bit_assignment = bits;
  const Rng base(hyper.seed);
  Tensorf cur = calib_images.slice_rows(0, hyper.calib_size);

  for (std::size_t i = 0; i < qm.layers.size(); ++i) {
    const LayerSpec& l = qm.layers[i];
    if (l.has_weights()) {
      const auto t0 = Clock::now();
      const Tensorf w = model.param(l.name + ".weight");
      const Tensorf* bias = qm.has_param(l.name + ".bias") ? &qm.param(l.name + ".bias") : nullptr;
      const int b = bits.at(l.name);
      const double s = search_scale(w, b, true);
      const QuantSpec spec = QuantSpec::make(b, s, true, hyper.tau * s);
      Rng rng = base.split(i);

      Tensorf wq;
      CalibRecord rec;
      switch (options.rounder) {
        case Rounder::nearest: wq = quantize_nearest(w, spec); break;
        case Rounder::floor: wq = quantize_floor(w, spec); break;
        case Rounder::ceil: wq = quantize_ceil(w, spec); break;
        case Rounder::stochastic: wq = quantize_stochastic(w, spec, rng); break;
        case Rounder::adaround: {
          auto r = calibrate_adaround_layer(l, w, bias, cur, spec, hyper, rng);
          wq = std::move(r.weight_q);
          rec = std::move(r.record);
          break;
        }
        case Rounder::attention: {
          auto [st, r] = calibrate_layer(l, w, bias, cur, spec, hyper, rng);
          wq = attention_forward(w, spec, st);
          qm.quant.alpha_crc32[l.name] = crc_of(st.alpha);
          rec = std::move(r);
          break;
        }
      }
      if (options.rounder != Rounder::adaround && options.rounder != Rounder::attention) {
        rec.layer = l.name;
        rec.initial_loss = rec.final_loss = reconstruction_loss(l, w, wq, bias, cur);
        rec.trajectory = {{0, rec.initial_loss}};
      }
      qm.param(l.name + ".weight") = std::move(wq);
      qm.quant.weights[l.name] = spec;

      LayerReport rep;
      rep.layer = l.name;
      rep.bits_w = b;
      rep.scale = s;
      rep.initial_loss = rec.initial_loss;
      rep.final_loss = rec.final_loss;
      rep.record = std::move(rec);
      rep.seconds = seconds_since(t0);
      result.layers.push_back(std::move(rep));
    }
    cur = apply_layer(qm, i, cur);
    auto ap = act_points.find(l.name);
    if (options.act_bits && ap != act_points.end()) {
      const bool is_signed = !ap->second;
      const QuantSpec a = QuantSpec::make(*options.act_bits, search_scale(cur, *options.act_bits, is_signed), is_signed);
      cur = quantize_nearest(cur, a);
      qm.quant.activations[l.name] = a;
    }
  }

  // Activation bits of the point that follows each weight layer.
  const auto pts = activation_points(qm);
  for (std::size_t k = 0; k < result.layers.size() && k < pts.size(); ++k) {
    auto it = qm.quant.activations.find(pts[k].first);
    if (it != qm.quant.activations.end()) result.layers[k].bits_a = it->second.bits;
  }
  return result;
}

}  // namespace aquant
