#include "aquant/model.hpp"

#include <cmath>
#include <set>

namespace aquant {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

// Spatial extent per channel for N x C (x H x W) tensors.
Index spatial_size(const Tensorf& x) {
  Index p = 1;
  for (Index a = 2; a < x.rank(); ++a) p *= x.dim(a);
  return p;
}

// Keeps each im2col buffer around 32 MB.
Index conv_chunk(const Tensorf& x, const layer::Conv2d& c) {
  const Index per_sample = c.in_ch * c.kernel * c.kernel * x.dim(2) * x.dim(3) / (c.stride * c.stride);
  return std::max<Index>(1, Index{4} * 1024 * 1024 / std::max<Index>(1, per_sample));
}

Tensorf concat_rows(const std::vector<Tensorf>& parts) {
  Shape s = parts.front().shape();
  s[0] = 0;
  for (const auto& p : parts) s[0] += p.dim(0);
  Tensorf out(s);
  Index off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
    off += p.size();
  }
  return out;
}

Tensorf linear_forward(const Tensorf& x, const Tensorf& w, const Tensorf* b) {
  require_shape(x.rank() == 2 && x.dim(1) == w.dim(1),
                "linear input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  RowMatrixd y = x.matrix().cast<double>() * w.matrix().cast<double>().transpose();
  if (b) y.rowwise() += b->flat().cast<double>().matrix().transpose();
  return Tensorf::from_matrix(y);
}

Tensorf conv_forward(const Tensorf& x, const Tensorf& w, const Tensorf* b, const layer::Conv2d& c) {
  require_shape(x.rank() == 4, "conv2d input must be NCHW, got " + shape_str(x.shape()));
  const Index chunk = conv_chunk(x, c);
  Tensorf y;
  if (x.dim(0) <= chunk) {
    y = conv2d(x, w, c.stride, c.pad);
  } else {
    std::vector<Tensorf> parts;
    for (Index s = 0; s < x.dim(0); s += chunk)
      parts.push_back(conv2d(x.slice_rows(s, std::min(chunk, x.dim(0) - s)), w, c.stride, c.pad));
    y = concat_rows(parts);
  }
  if (b) {
    const Index p = spatial_size(y), ch = y.dim(1);
    for (Index n = 0; n < y.dim(0); ++n)
      for (Index o = 0; o < ch; ++o)
        for (Index i = 0; i < p; ++i) y[(n * ch + o) * p + i] += (*b)[o];
  }
  return y;
}

struct BnStats {
  std::vector<double> mean, var;  // var is the biased batch variance
};

BnStats batch_stats(const Tensorf& x) {
  const Index n = x.dim(0), ch = x.dim(1), p = spatial_size(x);
  BnStats st{std::vector<double>(ch, 0.0), std::vector<double>(ch, 0.0)};
  const double count = static_cast<double>(n * p);
  for (Index c = 0; c < ch; ++c) {
    double s = 0.0;
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < p; ++j) s += x[(i * ch + c) * p + j];
    const double m = s / count;
    double v = 0.0;
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < p; ++j) {
        const double d = x[(i * ch + c) * p + j] - m;
        v += d * d;
      }
    st.mean[c] = m;
    st.var[c] = v / count;
  }
  return st;
}

Tensorf bn_apply(const Tensorf& x, const std::vector<double>& mean, const std::vector<double>& var,
                 const Tensorf& gamma, const Tensorf& beta, double eps) {
  const Index n = x.dim(0), ch = x.dim(1), p = spatial_size(x);
  Tensorf y(x.shape());
  for (Index c = 0; c < ch; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + eps);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < p; ++j) {
        const Index k = (i * ch + c) * p + j;
        y[k] = static_cast<float>(gamma[c] * (x[k] - mean[c]) * inv + beta[c]);
      }
  }
  return y;
}

std::vector<double> as_doubles(const Tensorf& t) { return {t.data().begin(), t.data().end()}; }

Tensorf avgpool_forward(const Tensorf& x, Index k) {
  require_shape(x.rank() == 4, "avgpool input must be NCHW");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / k, ow = w / k;
  require_shape(oh > 0 && ow > 0, "avgpool window larger than input");
  Tensorf y({n, c, oh, ow});
  const double norm = 1.0 / static_cast<double>(k * k);
  for (Index plane = 0; plane < n * c; ++plane)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (Index dy = 0; dy < k; ++dy)
          for (Index dx = 0; dx < k; ++dx) s += x[(plane * h + oy * k + dy) * w + ox * k + dx];
        y[(plane * oh + oy) * ow + ox] = static_cast<float>(s * norm);
      }
  return y;
}

// Activations recorded by a forward pass, enough to run the backward pass.
struct Tape {
  std::vector<Tensorf> inputs;              // input of layer i
  std::vector<std::optional<BnStats>> bn;   // batch statistics in train mode
  std::vector<std::optional<Tensorf>> prequant;  // layer output before its activation quantizer
  Tensorf output;
};

Tensorf apply_layer_mode(const ModelGraph& model, std::size_t index, const Tensorf& x, Mode mode,
                         std::optional<BnStats>* stats_out) {
  const LayerSpec& spec = model.layers.at(index);
  const std::string& nm = spec.name;
  return std::visit(
      overloaded{
          [&](const layer::Linear& l) {
            return linear_forward(x, model.param(nm + ".weight"), l.bias ? &model.param(nm + ".bias") : nullptr);
          },
          [&](const layer::Conv2d& c) {
            return conv_forward(x, model.param(nm + ".weight"), c.bias ? &model.param(nm + ".bias") : nullptr, c);
          },
          [&](const layer::BatchNorm& b) {
            require_shape(x.rank() >= 2 && x.dim(1) == b.ch, "batch norm channel mismatch at '" + nm + "'");
            if (mode == Mode::train) {
              BnStats st = batch_stats(x);
              Tensorf y = bn_apply(x, st.mean, st.var, model.param(nm + ".gamma"), model.param(nm + ".beta"), b.eps);
              if (stats_out) *stats_out = std::move(st);
              return y;
            }
            return bn_apply(x, as_doubles(model.param(nm + ".running_mean")),
                            as_doubles(model.param(nm + ".running_var")), model.param(nm + ".gamma"),
                            model.param(nm + ".beta"), b.eps);
          },
          [&](const layer::ReLU&) {
            Tensorf y = x;
            y.flat() = y.flat().max(0.0f);
            return y;
          },
          [&](const layer::AvgPool& p) { return avgpool_forward(x, p.k); },
          [&](const layer::Flatten&) {
            require_shape(x.rank() >= 2, "flatten needs a batch axis");
            return x.reshaped({x.dim(0), x.size() / x.dim(0)});
          },
      },
      spec.kind);
}

Tape forward_tape(const ModelGraph& model, const Tensorf& x, Mode mode) {
  Tape tape;
  const std::size_t n = model.layers.size();
  tape.inputs.reserve(n);
  tape.bn.resize(n);
  tape.prequant.resize(n);
  Tensorf cur = x;
  for (std::size_t i = 0; i < n; ++i) {
    tape.inputs.push_back(cur);
    cur = apply_layer_mode(model, i, cur, mode, &tape.bn[i]);
    auto q = model.quant.activations.find(model.layers[i].name);
    if (q != model.quant.activations.end()) {
      tape.prequant[i] = cur;
      cur = quantize_nearest(cur, q->second);
    }
  }
  tape.output = std::move(cur);
  return tape;
}

Gradients backward_from_tape(const ModelGraph& model, const Tape& tape, const Tensorf& grad_out, Mode mode) {
  require_shape(grad_out.shape() == tape.output.shape(),
                "grad_out shape " + shape_str(grad_out.shape()) + " differs from output " +
                    shape_str(tape.output.shape()));
  Gradients grads;
  Tensorf g = grad_out;
  for (std::size_t ri = model.layers.size(); ri-- > 0;) {
    const LayerSpec& spec = model.layers[ri];
    const std::string& nm = spec.name;
    const Tensorf& x = tape.inputs[ri];
    if (tape.prequant[ri]) {
      // Straight-through the activation quantizer, zero where it clips.
      const QuantSpec& q = model.quant.activations.at(nm);
      const Tensorf& pre = *tape.prequant[ri];
      for (Index i = 0; i < g.size(); ++i)
        if (pre[i] < q.min_value() || pre[i] > q.max_value()) g[i] = 0.0f;
    }
    g = std::visit(
        overloaded{
            [&](const layer::Linear& l) {
              const Tensorf& w = model.param(nm + ".weight");
              const RowMatrixd dy = g.matrix().cast<double>();
              grads[nm + ".weight"] = Tensorf::from_matrix(dy.transpose() * x.matrix().cast<double>());
              if (l.bias) grads[nm + ".bias"] = Tensorf::from_matrix(dy.colwise().sum().transpose());
              return Tensorf::from_matrix(dy * w.matrix().cast<double>());
            },
            [&](const layer::Conv2d& c) {
              const Tensorf& w = model.param(nm + ".weight");
              auto [dx, dw] = conv2d_backward(x, w, g, c.stride, c.pad);
              grads[nm + ".weight"] = std::move(dw);
              if (c.bias) {
                const Index ch = g.dim(1), p = spatial_size(g);
                Tensorf db({ch});
                for (Index o = 0; o < ch; ++o) {
                  double s = 0.0;
                  for (Index n = 0; n < g.dim(0); ++n)
                    for (Index i = 0; i < p; ++i) s += g[(n * ch + o) * p + i];
                  db[o] = static_cast<float>(s);
                }
                grads[nm + ".bias"] = std::move(db);
              }
              return std::move(dx);
            },
            [&](const layer::BatchNorm& b) {
              const Index n = x.dim(0), ch = x.dim(1), p = spatial_size(x);
              const Tensorf& gamma = model.param(nm + ".gamma");
              const bool train = mode == Mode::train;
              const std::vector<double> mean = train ? tape.bn[ri]->mean : as_doubles(model.param(nm + ".running_mean"));
              const std::vector<double> var = train ? tape.bn[ri]->var : as_doubles(model.param(nm + ".running_var"));
              Tensorf dgamma({ch}), dbeta({ch}), dx(x.shape());
              const double count = static_cast<double>(n * p);
              for (Index c = 0; c < ch; ++c) {
                const double inv = 1.0 / std::sqrt(var[c] + b.eps);
                double sg = 0.0, sgx = 0.0;
                for (Index i = 0; i < n; ++i)
                  for (Index j = 0; j < p; ++j) {
                    const Index k = (i * ch + c) * p + j;
                    sg += g[k];
                    sgx += g[k] * (x[k] - mean[c]) * inv;
                  }
                dgamma[c] = static_cast<float>(sgx);
                dbeta[c] = static_cast<float>(sg);
                for (Index i = 0; i < n; ++i)
                  for (Index j = 0; j < p; ++j) {
                    const Index k = (i * ch + c) * p + j;
                    double d = g[k];
                    if (train) d -= (sg + (x[k] - mean[c]) * inv * sgx) / count;
                    dx[k] = static_cast<float>(gamma[c] * inv * d);
                  }
              }
              grads[nm + ".gamma"] = std::move(dgamma);
              grads[nm + ".beta"] = std::move(dbeta);
              return dx;
            },
            [&](const layer::ReLU&) {
              Tensorf dx = g;
              for (Index i = 0; i < dx.size(); ++i)
                if (!(x[i] > 0.0f)) dx[i] = 0.0f;
              return dx;
            },
            [&](const layer::AvgPool& pool) {
              const Index k = pool.k, h = x.dim(2), w = x.dim(3), oh = g.dim(2), ow = g.dim(3);
              Tensorf dx(x.shape());
              const float norm = 1.0f / static_cast<float>(k * k);
              for (Index plane = 0; plane < x.dim(0) * x.dim(1); ++plane)
                for (Index oy = 0; oy < oh; ++oy)
                  for (Index ox = 0; ox < ow; ++ox) {
                    const float v = g[(plane * oh + oy) * ow + ox] * norm;
                    for (Index dy = 0; dy < k; ++dy)
                      for (Index dxx = 0; dxx < k; ++dxx) dx[(plane * h + oy * k + dy) * w + ox * k + dxx] = v;
                  }
              return dx;
            },
            [&](const layer::Flatten&) { return g.reshaped(x.shape()); },
        },
        spec.kind);
  }
  grads["input"] = std::move(g);
  return grads;
}

}  // namespace

std::string kind_name(const LayerKind& kind) {
  return std::visit(overloaded{[](const layer::Linear&) { return "linear"; },
                               [](const layer::Conv2d&) { return "conv2d"; },
                               [](const layer::BatchNorm&) { return "batchnorm"; },
                               [](const layer::ReLU&) { return "relu"; },
                               [](const layer::AvgPool&) { return "avgpool"; },
                               [](const layer::Flatten&) { return "flatten"; }},
                    kind);
}

ModelGraph& ModelGraph::add(std::string name, LayerKind kind) {
  for (const auto& l : layers)
    if (l.name == name) throw StructureError("duplicate layer name '" + name + "'");
  std::visit(overloaded{
                 [&](const layer::Linear& l) {
                   params[name + ".weight"] = Tensorf({l.out, l.in});
                   if (l.bias) params[name + ".bias"] = Tensorf({l.out});
                 },
                 [&](const layer::Conv2d& c) {
                   params[name + ".weight"] = Tensorf({c.out_ch, c.in_ch, c.kernel, c.kernel});
                   if (c.bias) params[name + ".bias"] = Tensorf({c.out_ch});
                 },
                 [&](const layer::BatchNorm& b) {
                   params[name + ".gamma"] = Tensorf({b.ch}, 1.0f);
                   params[name + ".beta"] = Tensorf({b.ch});
                   params[name + ".running_mean"] = Tensorf({b.ch});
                   params[name + ".running_var"] = Tensorf({b.ch}, 1.0f);
                 },
                 [](const auto&) {},
             },
             kind);
  layers.push_back({std::move(name), std::move(kind)});
  return *this;
}

std::size_t ModelGraph::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].name == name) return i;
  throw LookupError("no layer named '" + std::string(name) + "'");
}

std::vector<std::string> ModelGraph::weight_layers() const {
  std::vector<std::string> out;
  for (const auto& l : layers)
    if (l.has_weights()) out.push_back(l.name);
  return out;
}

Tensorf& ModelGraph::param(const std::string& key) {
  auto it = params.find(key);
  if (it == params.end()) throw LookupError("no parameter '" + key + "'");
  return it->second;
}

const Tensorf& ModelGraph::param(const std::string& key) const {
  auto it = params.find(key);
  if (it == params.end()) throw LookupError("no parameter '" + key + "'");
  return it->second;
}

Shape ModelGraph::validate() const {
  std::set<std::string> names;
  Shape s = input_shape;
  if (s.empty()) throw StructureError("model input shape is unset");
  auto expect_param = [&](const std::string& key, const Shape& shape) {
    auto it = params.find(key);
    if (it == params.end()) throw StructureError("missing parameter '" + key + "'");
    if (it->second.shape() != shape)
      throw StructureError("parameter '" + key + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                           shape_str(shape));
  };
  for (const auto& l : layers) {
    if (!names.insert(l.name).second) throw StructureError("duplicate layer name '" + l.name + "'");
    const std::string& nm = l.name;
    std::visit(overloaded{
                   [&](const layer::Linear& li) {
                     if (s.size() != 1 || s[0] != li.in)
                       throw StructureError("layer '" + nm + "' expects [" + std::to_string(li.in) + "], got " +
                                            shape_str(s));
                     expect_param(nm + ".weight", {li.out, li.in});
                     if (li.bias) expect_param(nm + ".bias", {li.out});
                     s = {li.out};
                   },
                   [&](const layer::Conv2d& c) {
                     if (s.size() != 3 || s[0] != c.in_ch)
                       throw StructureError("layer '" + nm + "' expects " + std::to_string(c.in_ch) +
                                            " input channels, got " + shape_str(s));
                     expect_param(nm + ".weight", {c.out_ch, c.in_ch, c.kernel, c.kernel});
                     if (c.bias) expect_param(nm + ".bias", {c.out_ch});
                     const Index oh = (s[1] + 2 * c.pad - c.kernel) / c.stride + 1;
                     const Index ow = (s[2] + 2 * c.pad - c.kernel) / c.stride + 1;
                     if (s[1] + 2 * c.pad < c.kernel || oh <= 0 || ow <= 0)
                       throw StructureError("layer '" + nm + "' output extents not positive");
                     s = {c.out_ch, oh, ow};
                   },
                   [&](const layer::BatchNorm& b) {
                     if (s.empty() || s[0] != b.ch)
                       throw StructureError("batch norm '" + nm + "' expects " + std::to_string(b.ch) + " channels");
                     for (const char* p : {".gamma", ".beta", ".running_mean", ".running_var"})
                       expect_param(nm + p, {b.ch});
                   },
                   [&](const layer::ReLU&) {},
                   [&](const layer::AvgPool& p) {
                     if (s.size() != 3 || s[1] / p.k <= 0 || s[2] / p.k <= 0)
                       throw StructureError("avgpool '" + nm + "' does not fit " + shape_str(s));
                     s = {s[0], s[1] / p.k, s[2] / p.k};
                   },
                   [&](const layer::Flatten&) { s = {shape_numel(s)}; },
               },
               l.kind);
  }
  return s;
}

void init_params(ModelGraph& model, Rng& rng) {
  for (const auto& l : model.layers) {
    Index fan_in = 0;
    if (auto* li = std::get_if<layer::Linear>(&l.kind)) fan_in = li->in;
    if (auto* c = std::get_if<layer::Conv2d>(&l.kind)) fan_in = c->in_ch * c->kernel * c->kernel;
    if (fan_in == 0) continue;
    Tensorf& w = model.param(l.name + ".weight");
    w = rng_normal(rng, 0.0, std::sqrt(2.0 / static_cast<double>(fan_in)), w.shape());
  }
}

ModelGraph make_toy_cnn(Index in_ch, Index height, Index width, int classes) {
  ModelGraph m;
  m.input_shape = {in_ch, height, width};
  m.add("conv1", layer::Conv2d{in_ch, 8, 3, 1, 1, false})
      .add("bn1", layer::BatchNorm{8})
      .add("relu1", layer::ReLU{})
      .add("pool1", layer::AvgPool{2})
      .add("conv2", layer::Conv2d{8, 16, 3, 1, 1, false})
      .add("bn2", layer::BatchNorm{16})
      .add("relu2", layer::ReLU{})
      .add("pool2", layer::AvgPool{2})
      .add("flatten", layer::Flatten{})
      .add("fc1", layer::Linear{16 * (height / 4) * (width / 4), 64, true})
      .add("relu3", layer::ReLU{})
      .add("fc2", layer::Linear{64, classes, true});
  return m;
}

Tensorf apply_layer(const ModelGraph& model, std::size_t index, const Tensorf& x) {
  return apply_layer_mode(model, index, x, Mode::eval, nullptr);
}

namespace {

void check_input(const ModelGraph& model, const Tensorf& x) {
  const bool ok = x.rank() == static_cast<Index>(model.input_shape.size()) + 1 &&
                  std::equal(model.input_shape.begin(), model.input_shape.end(), x.shape().begin() + 1);
  require_shape(ok, "input " + shape_str(x.shape()) + " does not match model input " + shape_str(model.input_shape));
}

}  // namespace

Tensorf forward(const ModelGraph& model, const Tensorf& x, std::optional<std::string_view> tap) {
  check_input(model, x);
  std::size_t stop = model.layers.size();
  if (tap) stop = model.index_of(*tap) + 1;
  Tensorf cur = x;
  for (std::size_t i = 0; i < stop; ++i) {
    cur = apply_layer(model, i, cur);
    auto q = model.quant.activations.find(model.layers[i].name);
    if (q != model.quant.activations.end()) cur = quantize_nearest(cur, q->second);
  }
  return cur;
}

Tensorf forward_train(const ModelGraph& model, const Tensorf& x) {
  check_input(model, x);
  return forward_tape(model, x, Mode::train).output;
}

Gradients backward(const ModelGraph& model, const Tensorf& x, const Tensorf& grad_out, Mode mode) {
  check_input(model, x);
  return backward_from_tape(model, forward_tape(model, x, mode), grad_out, mode);
}

ModelGraph fuse_bn(const ModelGraph& model) {
  ModelGraph out;
  out.input_shape = model.input_shape;
  out.quant = model.quant;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& l = model.layers[i];
    const auto* bn = std::get_if<layer::BatchNorm>(&l.kind);
    if (!bn) {
      out.layers.push_back(l);
      for (const auto& [key, t] : model.params)
        if (key.rfind(l.name + ".", 0) == 0) out.params[key] = t;
      continue;
    }
    if (out.layers.empty() || !out.layers.back().has_weights())
      throw StructureError("batch norm '" + l.name + "' does not follow a Linear or Conv2d layer");
    LayerSpec& prev = out.layers.back();
    Index out_ch = 0;
    if (auto* li = std::get_if<layer::Linear>(&prev.kind)) {
      out_ch = li->out;
      li->bias = true;
    } else {
      auto& c = std::get<layer::Conv2d>(prev.kind);
      out_ch = c.out_ch;
      c.bias = true;
    }
    if (out_ch != bn->ch)
      throw StructureError("batch norm '" + l.name + "' has " + std::to_string(bn->ch) + " channels but '" +
                           prev.name + "' produces " + std::to_string(out_ch));
    Tensorf& w = out.param(prev.name + ".weight");
    const std::string bias_key = prev.name + ".bias";
    if (!out.has_param(bias_key)) out.params[bias_key] = Tensorf({out_ch});
    Tensorf& b = out.param(bias_key);
    const Tensorf& gamma = model.param(l.name + ".gamma");
    const Tensorf& beta = model.param(l.name + ".beta");
    const Tensorf& mean = model.param(l.name + ".running_mean");
    const Tensorf& var = model.param(l.name + ".running_var");
    const Index per_out = w.size() / out_ch;
    for (Index o = 0; o < out_ch; ++o) {
      const double factor = static_cast<double>(gamma[o]) / std::sqrt(static_cast<double>(var[o]) + bn->eps);
      for (Index j = 0; j < per_out; ++j) w[o * per_out + j] = static_cast<float>(w[o * per_out + j] * factor);
      b[o] = static_cast<float>(beta[o] + factor * (static_cast<double>(b[o]) - mean[o]));
    }
  }
  return out;
}

double cross_entropy(const Tensorf& logits, std::span<const int> labels, Tensorf* grad) {
  require_shape(logits.rank() == 2 && logits.dim(0) == static_cast<Index>(labels.size()),
                "cross_entropy expects N x classes logits matching the label count");
  const Index n = logits.dim(0), c = logits.dim(1);
  if (grad) *grad = Tensorf(logits.shape());
  double loss = 0.0;
  for (Index i = 0; i < n; ++i) {
    const float* row = logits.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (Index j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw DomainError("label out of range");
    loss += log_z - row[y];
    if (grad)
      for (Index j = 0; j < c; ++j)
        (*grad)[i * c + j] = static_cast<float>((std::exp(row[j] - log_z) - (j == y ? 1.0 : 0.0)) / n);
  }
  return loss / static_cast<double>(n);
}

TrainResult train_baseline(const ModelGraph& model, const Dataset& train, const Dataset& test,
                           const TrainOptions& options, Rng& rng) {
  if (train.size() == 0) throw SizeError("training set is empty");
  if (options.batch <= 0 || options.epochs < 0 || options.lr < 0.0)
    throw ConfigError("invalid training options");
  model.validate();
  TrainResult result{model};
  ModelGraph& m = result.model;
  ModelGraph last_good = m;
  std::map<std::string, Tensorf> velocity;

  const Index n = train.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    for (Index i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
    double epoch_loss = 0.0;
    Index batches = 0;
    for (Index start = 0; start < n; start += options.batch) {
      const Index count = std::min(options.batch, n - start);
      std::span<const Index> idx(order.data() + start, static_cast<std::size_t>(count));
      const Tensorf xb = train.images.gather_rows(idx);
      std::vector<int> yb(static_cast<std::size_t>(count));
      for (Index k = 0; k < count; ++k) yb[k] = train.labels[idx[k]];

      const Tape tape = forward_tape(m, xb, Mode::train);
      Tensorf dlogits;
      const double loss = cross_entropy(tape.output, yb, &dlogits);
      if (!std::isfinite(loss))
        throw TrainingError("training diverged in epoch " + std::to_string(epoch + 1), last_good);
      epoch_loss += loss;
      ++batches;
      const Gradients grads = backward_from_tape(m, tape, dlogits, Mode::train);

      for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const auto* bn = std::get_if<layer::BatchNorm>(&m.layers[li].kind);
        if (!bn || !tape.bn[li]) continue;
        const std::string& nm = m.layers[li].name;
        Tensorf& rm = m.param(nm + ".running_mean");
        Tensorf& rv = m.param(nm + ".running_var");
        const double count_elems = static_cast<double>(tape.inputs[li].size() / bn->ch);
        const double unbias = count_elems > 1 ? count_elems / (count_elems - 1) : 1.0;
        for (Index c = 0; c < bn->ch; ++c) {
          rm[c] = static_cast<float>((1 - bn->momentum) * rm[c] + bn->momentum * tape.bn[li]->mean[c]);
          rv[c] = static_cast<float>((1 - bn->momentum) * rv[c] + bn->momentum * tape.bn[li]->var[c] * unbias);
        }
      }
      for (const auto& [key, g] : grads) {
        if (key == "input") continue;
        auto [it, fresh] = velocity.try_emplace(key, g.shape());
        Tensorf& v = it->second;
        v.flat() = static_cast<float>(options.momentum) * v.flat() + g.flat();
        m.param(key).flat() -= static_cast<float>(options.lr) * v.flat();
      }
    }
    result.final_loss = epoch_loss / static_cast<double>(std::max<Index>(1, batches));
    last_good = m;
  }
  result.train_accuracy = evaluate(m, train).top1;
  result.test_accuracy = test.size() > 0 ? evaluate(m, test).top1 : 0.0;
  return result;
}

Accuracy evaluate(const ModelGraph& model, const Dataset& data, Index batch) {
  if (data.size() == 0) throw SizeError("cannot evaluate on an empty dataset");
  if (data.sample_shape() != model.input_shape)
    throw ShapeError("dataset samples " + shape_str(data.sample_shape()) + " do not match model input " +
                     shape_str(model.input_shape));
  const int classes = std::max(data.classes, 1);
  Accuracy acc;
  std::vector<Index> hits(static_cast<std::size_t>(classes), 0);
  acc.per_class_count.assign(static_cast<std::size_t>(classes), 0);
  Index correct = 0;
  for (Index start = 0; start < data.size(); start += batch) {
    const Index count = std::min(batch, data.size() - start);
    const Tensorf logits = forward(model, data.images.slice_rows(start, count));
    const Index c = logits.dim(1);
    for (Index i = 0; i < count; ++i) {
      const float* row = logits.data().data() + i * c;
      const int pred = static_cast<int>(std::max_element(row, row + c) - row);
      const int y = data.labels[static_cast<std::size_t>(start + i)];
      if (y < 0 || y >= classes) throw DomainError("label out of range");
      ++acc.per_class_count[y];
      if (pred == y) {
        ++correct;
        ++hits[y];
      }
    }
  }
  acc.top1 = static_cast<double>(correct) / static_cast<double>(data.size());
  for (int k = 0; k < classes; ++k)
    acc.per_class.push_back(acc.per_class_count[k] ? static_cast<double>(hits[k]) / acc.per_class_count[k] : 0.0);
  return acc;
}

std::vector<std::pair<std::string, bool>> activation_points(const ModelGraph& model) {
  std::vector<std::pair<std::string, bool>> pts;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (!model.layers[i].has_weights()) continue;
    if (i + 1 < model.layers.size() && std::holds_alternative<layer::ReLU>(model.layers[i + 1].kind))
      pts.emplace_back(model.layers[i + 1].name, true);
    else
      pts.emplace_back(model.layers[i].name, false);
  }
  return pts;
}

}  // namespace aquant
