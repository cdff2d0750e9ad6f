#include "aquant/model_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <zlib.h>

namespace aquant {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 5> kBlobMagic{'Q', 'T', 'N', 'S', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
}

std::uint32_t get_u32_be(const std::uint8_t* p) {
  return std::uint32_t{p[0]} << 24 | std::uint32_t{p[1]} << 16 | std::uint32_t{p[2]} << 8 | std::uint32_t{p[3]};
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

// Reads a whole file through zlib, which passes non-gzip files through unchanged.
std::vector<std::uint8_t> read_maybe_gz(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf{};
  int n;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.insert(out.end(), buf.begin(), buf.begin() + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw FormatError("corrupt compressed stream in '" + path.string() + "'");
  return out;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw FormatError(where + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key)) throw FormatError(where + ": unknown field '" + key + "'");
}

json layer_to_json(const LayerSpec& l) {
  json j{{"name", l.name}, {"kind", kind_name(l.kind)}};
  if (auto* li = std::get_if<layer::Linear>(&l.kind)) {
    j["in"] = li->in;
    j["out"] = li->out;
    j["bias"] = li->bias;
  } else if (auto* c = std::get_if<layer::Conv2d>(&l.kind)) {
    j["in_ch"] = c->in_ch;
    j["out_ch"] = c->out_ch;
    j["kernel"] = c->kernel;
    j["stride"] = c->stride;
    j["pad"] = c->pad;
    j["bias"] = c->bias;
  } else if (auto* b = std::get_if<layer::BatchNorm>(&l.kind)) {
    j["ch"] = b->ch;
    j["eps"] = b->eps;
    j["momentum"] = b->momentum;
  } else if (auto* p = std::get_if<layer::AvgPool>(&l.kind)) {
    j["k"] = p->k;
  }
  return j;
}

LayerSpec layer_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  const std::string where = "layer '" + j.at("name").get<std::string>() + "'";
  LayerSpec l{j.at("name").get<std::string>(), layer::ReLU{}};
  if (kind == "linear") {
    check_keys(j, {"name", "kind", "in", "out", "bias"}, where);
    l.kind = layer::Linear{j.at("in").get<Index>(), j.at("out").get<Index>(), j.at("bias").get<bool>()};
  } else if (kind == "conv2d") {
    check_keys(j, {"name", "kind", "in_ch", "out_ch", "kernel", "stride", "pad", "bias"}, where);
    l.kind = layer::Conv2d{j.at("in_ch").get<Index>(), j.at("out_ch").get<Index>(), j.at("kernel").get<Index>(),
                           j.at("stride").get<Index>(),  j.at("pad").get<Index>(),    j.at("bias").get<bool>()};
  } else if (kind == "batchnorm") {
    check_keys(j, {"name", "kind", "ch", "eps", "momentum"}, where);
    l.kind = layer::BatchNorm{j.at("ch").get<Index>(), j.at("eps").get<double>(), j.at("momentum").get<double>()};
  } else if (kind == "relu") {
    check_keys(j, {"name", "kind"}, where);
  } else if (kind == "avgpool") {
    check_keys(j, {"name", "kind", "k"}, where);
    l.kind = layer::AvgPool{j.at("k").get<Index>()};
  } else if (kind == "flatten") {
    check_keys(j, {"name", "kind"}, where);
    l.kind = layer::Flatten{};
  } else {
    throw FormatError(where + ": unknown kind '" + kind + "'");
  }
  return l;
}

std::string blob_name(const std::string& key) { return "tensors/" + key + ".qtns"; }

}  // namespace

std::uint32_t crc32_of(const void* data, std::size_t size) {
  return static_cast<std::uint32_t>(crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(size)));
}

std::vector<std::uint8_t> encode_tensor(const Tensorf& t) {
  if (t.empty()) throw ShapeError("cannot encode an empty tensor");
  std::vector<std::uint8_t> out(kBlobMagic.begin(), kBlobMagic.end());
  out.push_back(0);
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (Index d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (float v : t.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_u32(out, bits);
  }
  put_u32(out, crc32_of(out.data(), out.size()));
  return out;
}

Tensorf decode_tensor(const std::vector<std::uint8_t>& b, const std::string& what) {
  if (b.size() < kBlobMagic.size() + 2 + 4 || !std::equal(kBlobMagic.begin(), kBlobMagic.end(), b.begin()))
    throw FormatError(what + ": bad magic");
  const std::size_t payload_end = b.size() - 4;
  if (crc32_of(b.data(), payload_end) != get_u32(b.data() + payload_end))
    throw ChecksumError(what + ": checksum mismatch");
  if (b[5] != 0) throw FormatError(what + ": unsupported dtype code " + std::to_string(b[5]));
  const std::size_t rank = b[6];
  std::size_t off = 7;
  if (rank == 0 || off + 4 * rank > payload_end) throw FormatError(what + ": truncated header");
  Shape shape;
  for (std::size_t i = 0; i < rank; ++i, off += 4) shape.push_back(get_u32(b.data() + off));
  const Index n = shape_numel(shape);
  if (n <= 0 || off + 4 * static_cast<std::size_t>(n) != payload_end)
    throw FormatError(what + ": payload length does not match shape " + shape_str(shape));
  std::vector<float> data(static_cast<std::size_t>(n));
  for (auto& v : data) {
    const std::uint32_t bits = get_u32(b.data() + off);
    std::memcpy(&v, &bits, sizeof v);
    off += 4;
  }
  return Tensorf(std::move(shape), std::move(data));
}

json quant_spec_to_json(const QuantSpec& q) {
  return {{"bits", q.bits}, {"scale", q.scale}, {"lo", q.lo}, {"hi", q.hi}, {"signed", q.is_signed}, {"tau", q.tau}};
}

QuantSpec quant_spec_from_json(const json& j) {
  check_keys(j, {"bits", "scale", "lo", "hi", "signed", "tau"}, "quant spec");
  QuantSpec q;
  q.bits = j.at("bits").get<int>();
  q.scale = j.at("scale").get<double>();
  q.lo = j.at("lo").get<std::int64_t>();
  q.hi = j.at("hi").get<std::int64_t>();
  q.is_signed = j.at("signed").get<bool>();
  q.tau = j.at("tau").get<double>();
  try {
    q.validate();
  } catch (const DomainError& e) {
    throw FormatError(std::string("quant spec: ") + e.what());
  }
  return q;
}

void save_model(const ModelGraph& model, const fs::path& dir) {
  model.validate();
  std::error_code ec;
  fs::create_directories(dir / "tensors", ec);
  if (ec) throw IoError("cannot create '" + (dir / "tensors").string() + "': " + ec.message());

  json manifest{{"format", "aquant-model"},
                {"version", kManifestVersion},
                {"input_shape", model.input_shape},
                {"preprocessing", {{"pixel_scale", "1/255"}, {"normalization", "none"}}}};
  json layers = json::array();
  for (const auto& l : model.layers) layers.push_back(layer_to_json(l));
  manifest["layers"] = std::move(layers);

  json tensors = json::object();
  for (const auto& [key, t] : model.params) {
    const auto bytes = encode_tensor(t);
    write_file(dir / blob_name(key), std::string(bytes.begin(), bytes.end()));
    tensors[key] = {{"file", blob_name(key)}, {"shape", t.shape()}, {"crc32", get_u32(bytes.data() + bytes.size() - 4)}};
  }
  manifest["tensors"] = std::move(tensors);

  if (!model.quant.empty() || !model.quant.rounder.empty()) {
    json q{{"rounder", model.quant.rounder}, {"bit_assignment", model.quant.bit_assignment},
           {"alpha_crc32", model.quant.alpha_crc32}};
    json w = json::object(), a = json::object();
    for (const auto& [k, s] : model.quant.weights) w[k] = quant_spec_to_json(s);
    for (const auto& [k, s] : model.quant.activations) a[k] = quant_spec_to_json(s);
    q["weights"] = std::move(w);
    q["activations"] = std::move(a);
    manifest["quant"] = std::move(q);
  }
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

ModelGraph load_model(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  json m;
  try {
    const auto raw = read_file(mpath);
    m = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw FormatError("'" + mpath.string() + "' is not valid JSON: " + e.what());
  }
  ModelGraph model;
  try {
    check_keys(m, {"format", "version", "input_shape", "preprocessing", "layers", "tensors", "quant"}, "manifest");
    if (m.at("format") != "aquant-model") throw FormatError("manifest: unexpected format tag");
    const int version = m.at("version").get<int>();
    if (version != kManifestVersion)
      throw FormatError("manifest version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kManifestVersion) + ")");
    if (m.contains("preprocessing")) check_keys(m["preprocessing"], {"pixel_scale", "normalization"}, "preprocessing");
    model.input_shape = m.at("input_shape").get<Shape>();
    for (const auto& lj : m.at("layers")) model.layers.push_back(layer_from_json(lj));
    for (const auto& [key, tj] : m.at("tensors").items()) {
      check_keys(tj, {"file", "shape", "crc32"}, "tensor '" + key + "'");
      const fs::path blob = dir / tj.at("file").get<std::string>();
      if (!fs::exists(blob)) throw MissingBlobError("tensor '" + key + "': missing blob '" + blob.string() + "'");
      const auto bytes = read_file(blob);
      Tensorf t = decode_tensor(bytes, "tensor '" + key + "'");
      if (get_u32(bytes.data() + bytes.size() - 4) != tj.at("crc32").get<std::uint32_t>())
        throw ChecksumError("tensor '" + key + "': blob checksum differs from manifest");
      if (t.shape() != tj.at("shape").get<Shape>()) throw FormatError("tensor '" + key + "': shape differs from manifest");
      model.params[key] = std::move(t);
    }
    if (m.contains("quant")) {
      const json& q = m["quant"];
      check_keys(q, {"rounder", "bit_assignment", "alpha_crc32", "weights", "activations"}, "quant");
      model.quant.rounder = q.at("rounder").get<std::string>();
      model.quant.bit_assignment = q.at("bit_assignment").get<std::map<std::string, int>>();
      model.quant.alpha_crc32 = q.at("alpha_crc32").get<std::map<std::string, std::uint32_t>>();
      for (const auto& [k, s] : q.at("weights").items()) model.quant.weights[k] = quant_spec_from_json(s);
      for (const auto& [k, s] : q.at("activations").items()) model.quant.activations[k] = quant_spec_from_json(s);
    }
  } catch (const json::exception& e) {
    throw FormatError("manifest '" + mpath.string() + "': " + e.what());
  }
  try {
    model.validate();
  } catch (const StructureError& e) {
    throw FormatError(std::string("manifest describes an invalid model: ") + e.what());
  }
  return model;
}

Dataset load_idx(const fs::path& images, const fs::path& labels) {
  const auto ib = read_maybe_gz(images);
  const auto lb = read_maybe_gz(labels);
  if (ib.size() < 16 || get_u32_be(ib.data()) != 0x00000803)
    throw FormatError("'" + images.string() + "': not an IDX image file (magic 0x00000803)");
  if (lb.size() < 8 || get_u32_be(lb.data()) != 0x00000801)
    throw FormatError("'" + labels.string() + "': not an IDX label file (magic 0x00000801)");
  const Index n = get_u32_be(ib.data() + 4), rows = get_u32_be(ib.data() + 8), cols = get_u32_be(ib.data() + 12);
  const Index nl = get_u32_be(lb.data() + 4);
  if (static_cast<Index>(ib.size()) != 16 + n * rows * cols)
    throw FormatError("'" + images.string() + "': payload does not match dims");
  if (static_cast<Index>(lb.size()) != 8 + nl) throw FormatError("'" + labels.string() + "': payload does not match count");
  if (nl != n)
    throw FormatError("image/label count mismatch: " + std::to_string(n) + " images, " + std::to_string(nl) + " labels");
  Dataset ds;
  ds.labels.assign(lb.begin() + 8, lb.end());
  ds.classes = ds.labels.empty() ? 0 : *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  if (n > 0) {
    if (rows <= 0 || cols <= 0) throw FormatError("'" + images.string() + "': zero image extent");
    std::vector<float> px(static_cast<std::size_t>(n * rows * cols));
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(ib[16 + i]) / 255.0f;
    ds.images = Tensorf({n, 1, rows, cols}, std::move(px));
  }
  return ds;
}

void save_idx(const Dataset& ds, const fs::path& images, const fs::path& labels) {
  const Shape s = ds.sample_shape();
  if (ds.size() > 0 && (s.size() != 3 || s[0] != 1)) throw ShapeError("IDX stores single-channel images only");
  auto be = [](std::string& out, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>(v >> (8 * i)));
  };
  std::string ib, lb;
  be(ib, 0x00000803);
  be(ib, static_cast<std::uint32_t>(ds.size()));
  be(ib, static_cast<std::uint32_t>(ds.size() ? s[1] : 0));
  be(ib, static_cast<std::uint32_t>(ds.size() ? s[2] : 0));
  for (float v : ds.images.data()) ib.push_back(static_cast<char>(std::lround(255.0f * std::clamp(v, 0.0f, 1.0f))));
  be(lb, 0x00000801);
  be(lb, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) lb.push_back(static_cast<char>(y));
  write_file(images, ib);
  write_file(labels, lb);
}

Dataset synth_dataset(Rng& rng, Index n, int classes, const Shape& sample_shape) {
  if (n < 0 || classes <= 0) throw ConfigError("synth_dataset needs n >= 0 and classes > 0");
  Dataset ds;
  ds.classes = classes;
  if (n == 0) return ds;
  const Index px = shape_numel(sample_shape);
  std::vector<std::vector<float>> means(static_cast<std::size_t>(classes), std::vector<float>(px));
  for (auto& m : means)
    for (auto& v : m) v = rng.uniform() < 0.5 ? 0.25f : 0.75f;
  Shape shape{n};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  ds.images = Tensorf(shape);
  ds.labels.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
    ds.labels[i] = y;
    for (Index j = 0; j < px; ++j)
      ds.images[i * px + j] = std::clamp(static_cast<float>(means[y][j] + 0.1 * rng.normal()), 0.0f, 1.0f);
  }
  return ds;
}

Dataset dataset_slice(const Dataset& ds, Index begin, Index count) {
  Dataset out;
  out.classes = ds.classes;
  if (count == 0) return out;
  out.images = ds.images.slice_rows(begin, count);
  out.labels.assign(ds.labels.begin() + begin, ds.labels.begin() + begin + count);
  return out;
}

Dataset take_calibration(const Dataset& ds, Index k, Rng& rng) {
  if (k < 0 || k > ds.size())
    throw SizeError("calibration subset of " + std::to_string(k) + " from " + std::to_string(ds.size()) + " samples");
  std::vector<Index> idx(static_cast<std::size_t>(ds.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  for (Index i = 0; i < k; ++i) {
    const Index j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(ds.size() - i)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(static_cast<std::size_t>(k));
  Dataset out;
  out.classes = ds.classes;
  if (k == 0) return out;
  out.images = ds.images.gather_rows(idx);
  for (Index i : idx) out.labels.push_back(ds.labels[i]);
  return out;
}

}  // namespace aquant
