#include "aquant/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "aquant/model_io.hpp"

namespace aquant::cli {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::array kRounders{Rounder::nearest, Rounder::floor,      Rounder::ceil,
                               Rounder::stochastic, Rounder::adaround, Rounder::attention};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

double train_lr(const RunConfig& cfg) { return cfg.lr.value_or(TrainOptions{}.lr); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

void require_path(const fs::path& p, const char* flag) {
  if (p.empty()) throw ConfigError(std::string(flag) + " is required for this command");
}

Dataset load_pair(const fs::path& images, const fs::path& labels, const char* flag) {
  require_path(images, flag);
  if (labels.empty()) throw ConfigError(std::string("labels file missing for ") + flag);
  return load_idx(images, labels);
}

Dataset load_train(const RunConfig& cfg) { return load_pair(cfg.data_images, cfg.data_labels, "--data-images"); }

Dataset load_test(const RunConfig& cfg) {
  if (!cfg.test_images.empty()) return load_pair(cfg.test_images, cfg.test_labels, "--test-images");
  return load_train(cfg);
}

ModelGraph load_required_model(const RunConfig& cfg) {
  require_path(cfg.model, "--model");
  if (!fs::exists(cfg.model / "manifest.json"))
    throw IoError("no model at '" + cfg.model.string() + "' (manifest.json not found)");
  return load_model(cfg.model);
}

std::string csv_row(std::initializer_list<std::string> cells) {
  std::string row;
  for (const auto& c : cells) row += (row.empty() ? "" : ",") + c;
  return row + "\n";
}

}  // namespace

HyperParams RunConfig::hyper() const {
  HyperParams h;
  if (lr) h.lr = *lr;
  if (iters) h.iters = *iters;
  if (batch) h.batch = *batch;
  if (calib_size) h.calib_size = *calib_size;
  if (tau) h.tau = *tau;
  h.seed = seed;
  h.validate();
  return h;
}

CodingConfig RunConfig::coding() const {
  CodingConfig c;
  if (epsilon) c.epsilon = *epsilon;
  if (prefactor) c.prefactor = parse_prefactor(*prefactor);
  if (!(c.epsilon > 0.0)) throw ConfigError("--epsilon must be positive");
  return c;
}

nlohmann::json RunConfig::canonical() const {
  auto name = [](const fs::path& p) { return p.filename().string(); };
  nlohmann::json j{{"command", command},
                   {"inputs",
                    {{"model", name(model)},
                     {"data_images", name(data_images)},
                     {"data_labels", name(data_labels)},
                     {"test_images", name(test_images)},
                     {"test_labels", name(test_labels)},
                     {"baseline", name(baseline)}}},
                   {"seed", seed}};
  if (command == "train") {
    j["epochs"] = epochs.value_or(TrainOptions{}.epochs);
    j["lr"] = train_lr(*this);
    j["batch"] = batch.value_or(TrainOptions{}.batch);
    return j;
  }
  const HyperParams h = hyper();
  const CodingConfig c = coding();
  j["rounder"] = rounder;
  j["wbits"] = wbits ? nlohmann::json(*wbits) : nlohmann::json();
  j["bit_list"] = bit_list ? nlohmann::json(*bit_list) : nlohmann::json();
  j["abits"] = abits ? nlohmann::json(*abits) : nlohmann::json();
  j["hyper"] = {{"lr", h.lr},
                {"iters", h.iters},
                {"batch", h.batch},
                {"calib_size", h.calib_size},
                {"tau", h.tau},
                {"first_last_bits", h.first_last_bits},
                {"eval_every", h.eval_every},
                {"adaround_lr", h.adaround.lr}};
  j["coding"] = {{"epsilon", c.epsilon}, {"prefactor", prefactor_name(c.prefactor)}, {"center", c.center}};
  j["repeats"] = repeats;
  j["sweep_iters"] = sweep_iters.value_or(h.iters);
  return j;
}

std::uint32_t RunConfig::hash() const {
  const std::string s = canonical().dump();
  return crc32_of(s.data(), s.size());
}

std::string config_hash(const RunConfig& cfg) { return hex32(cfg.hash()); }

ModelGraph model_for(const Dataset& ds) {
  const Shape s = ds.sample_shape();
  if (s.size() != 3) throw ShapeError("expected C x H x W samples, got " + shape_str(s));
  return make_toy_cnn(s[0], s[1], s[2], std::max(ds.classes, 2));
}

std::map<std::string, int> uniform_bits(const ModelGraph& model, int bits) {
  std::map<std::string, int> out;
  for (const auto& name : model.weight_layers()) out[name] = bits;
  return out;
}

RunOutcome quantize_and_evaluate(const ModelGraph& fp_model, const Dataset& calib_pool, const Dataset& test,
                                 const std::map<std::string, int>& bits, const HyperParams& hyper,
                                 const QuantizeOptions& options) {
  const auto t0 = Clock::now();
  const ModelGraph fused = fuse_bn(fp_model);
  Rng pick = Rng(hyper.seed).split(0xCA11B);
  const Dataset calib = take_calibration(calib_pool, hyper.calib_size, pick);
  RunOutcome out{quantize_model(fused, calib.images, bits, hyper, options)};
  out.accuracy = evaluate(out.result.model, test).top1;
  out.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return out;
}

int cmd_train(const RunConfig& cfg) {
  const Dataset train = load_train(cfg);
  const Dataset test = load_test(cfg);
  TrainOptions opt;
  if (cfg.epochs) opt.epochs = *cfg.epochs;
  if (cfg.batch) opt.batch = *cfg.batch;
  opt.lr = train_lr(cfg);

  Rng rng(cfg.seed);
  ModelGraph model = model_for(train);
  init_params(model, rng);
  const TrainResult r = train_baseline(model, train, test, opt, rng);

  ensure_dir(cfg.out);
  save_model(r.model, cfg.out / "model");
  const nlohmann::json metrics{{"accuracy", r.test_accuracy},
                               {"train_accuracy", r.train_accuracy},
                               {"final_loss", r.final_loss},
                               {"epochs", opt.epochs},
                               {"lr", opt.lr},
                               {"seed", cfg.seed},
                               {"config_hash", config_hash(cfg)}};
  write_text(cfg.out / "metrics.json", metrics.dump(2) + "\n");
  std::cout << "accuracy " << num(r.test_accuracy) << "\n";
  return 0;
}

int cmd_assign_bits(const RunConfig& cfg) {
  if (!cfg.bit_list) throw ConfigError("assign-bits needs --bit-list");
  const ModelGraph model = fuse_bn(load_required_model(cfg));
  const BitAssignment a = assign_bits(model, *cfg.bit_list, cfg.coding());

  ensure_dir(cfg.out);
  nlohmann::json j = to_json(a);
  j["seed"] = cfg.seed;
  j["config_hash"] = config_hash(cfg);
  write_text(cfg.out / "bit_assignment.json", j.dump(2) + "\n");

  std::string csv = csv_row({"layer", "coding_length", "bits", "config_hash"});
  for (const auto& name : model.weight_layers())
    csv += csv_row({name, num(a.coding_lengths.at(name)), std::to_string(a.bits.at(name)), config_hash(cfg)});
  write_text(cfg.out / "bits.csv", csv);
  for (const auto& name : a.order) std::cout << name << " " << num(a.coding_lengths.at(name)) << " -> " << a.bits.at(name) << "\n";
  return 0;
}

int cmd_quantize(const RunConfig& cfg) {
  if (cfg.wbits.has_value() == cfg.bit_list.has_value())
    throw ConfigError("quantize needs exactly one of --wbits and --bit-list");
  const ModelGraph fp = load_required_model(cfg);
  const Dataset pool = load_train(cfg);
  const HyperParams hyper = cfg.hyper();
  QuantizeOptions opt{parse_rounder(cfg.rounder), cfg.abits};

  std::map<std::string, int> bits;
  if (cfg.wbits) {
    bits = uniform_bits(fp, *cfg.wbits);
  } else {
    bits = assign_bits(fuse_bn(fp), *cfg.bit_list, cfg.coding()).bits;
  }

  const Dataset test = cfg.test_images.empty() ? Dataset{} : load_test(cfg);
  const ModelGraph fused = fuse_bn(fp);
  Rng pick = Rng(hyper.seed).split(0xCA11B);
  const Dataset calib = take_calibration(pool, hyper.calib_size, pick);
  const QuantizeResult q = quantize_model(fused, calib.images, bits, hyper, opt);

  ensure_dir(cfg.out);
  save_model(q.model, cfg.out / "model");
  const std::string h = config_hash(cfg);
  std::string csv = csv_row({"layer", "bits_w", "bits_a", "scale", "init_loss", "final_loss", "seconds", "config_hash"});
  for (const auto& r : q.layers)
    csv += csv_row({r.layer, std::to_string(r.bits_w), std::to_string(r.bits_a), num(r.scale), num(r.initial_loss),
                    num(r.final_loss), num(r.seconds), h});
  write_text(cfg.out / "report.csv", csv);

  nlohmann::json summary{{"rounder", cfg.rounder},
                         {"weight_bits", weight_bit_budget(fused, bits, hyper.first_last_bits)},
                         {"seed", cfg.seed},
                         {"config_hash", h}};
  if (test.size() > 0) {
    summary["accuracy"] = evaluate(q.model, test).top1;
    std::cout << "accuracy " << num(summary["accuracy"].get<double>()) << "\n";
  }
  write_text(cfg.out / "quantize.json", summary.dump(2) + "\n");
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  const ModelGraph model = load_required_model(cfg);
  const Dataset test = load_test(cfg);
  if (test.size() == 0) throw SizeError("evaluation set is empty");
  const Accuracy acc = evaluate(model, test);
  const std::string h = config_hash(cfg);

  ensure_dir(cfg.out);
  std::string csv = csv_row({"class", "count", "accuracy", "config_hash"});
  for (std::size_t c = 0; c < acc.per_class.size(); ++c)
    csv += csv_row({std::to_string(c), std::to_string(acc.per_class_count[c]), num(acc.per_class[c]), h});
  write_text(cfg.out / "eval.csv", csv);

  nlohmann::json summary{{"top1", acc.top1}, {"samples", test.size()}, {"seed", cfg.seed}, {"config_hash", h}};
  std::cout << "top1 " << num(acc.top1) << "\n";
  if (!cfg.baseline.empty()) {
    RunConfig base = cfg;
    base.model = cfg.baseline;
    const double b = evaluate(load_required_model(base), test).top1;
    summary["baseline_top1"] = b;
    summary["delta"] = acc.top1 - b;
    std::cout << "baseline " << num(b) << "\n" << "delta " << num(acc.top1 - b) << "\n";
  }
  write_text(cfg.out / "eval.json", summary.dump(2) + "\n");
  return 0;
}

int cmd_compare(const RunConfig& cfg) {
  if (cfg.repeats < 1) throw ConfigError("--repeats must be at least 1");
  const ModelGraph fp = load_required_model(cfg);
  const Dataset pool = load_train(cfg);
  const Dataset test = load_test(cfg);
  const double fp_acc = evaluate(fp, test).top1;
  const HyperParams hyper = cfg.hyper();
  const int wbits = cfg.wbits.value_or(4);
  const auto bits = uniform_bits(fp, wbits);
  const std::string h = config_hash(cfg);
  const std::string abits = cfg.abits ? std::to_string(*cfg.abits) : "32";

  const std::string header = csv_row({"rounder", "tau", "wbits", "abits", "iters", "seeds", "accuracy", "fp_accuracy",
                                      "seconds", "config_hash"});
  auto run_row = [&](Rounder r, HyperParams hp) {
    double acc = 0.0, secs = 0.0;
    for (int k = 0; k < cfg.repeats; ++k) {
      hp.seed = cfg.seed + static_cast<std::uint64_t>(k);
      const RunOutcome o = quantize_and_evaluate(fp, pool, test, bits, hp, {r, cfg.abits});
      acc += o.accuracy;
      secs += o.seconds;
    }
    acc /= cfg.repeats;
    std::cout << rounder_name(r) << " tau=" << num(hp.tau) << " accuracy " << num(acc) << "\n" << std::flush;
    return csv_row({rounder_name(r), num(hp.tau), std::to_string(wbits), abits, std::to_string(hp.iters),
                    std::to_string(cfg.repeats), num(acc), num(fp_acc), num(secs), h});
  };

  ensure_dir(cfg.out);
  std::string rounders = header;
  for (Rounder r : kRounders) rounders += run_row(r, hyper);
  write_text(cfg.out / "rounders.csv", rounders);

  std::string sweep = header;
  for (int k = 1; k <= 10; ++k) {
    HyperParams hp = hyper;
    hp.tau = k / 10.0;
    hp.iters = cfg.sweep_iters.value_or(hyper.iters);
    sweep += run_row(Rounder::attention, hp);
  }
  write_text(cfg.out / "tau_sweep.csv", sweep);
  return 0;
}

int dispatch(const RunConfig& cfg) {
  if (cfg.command == "train") return cmd_train(cfg);
  if (cfg.command == "assign-bits") return cmd_assign_bits(cfg);
  if (cfg.command == "quantize") return cmd_quantize(cfg);
  if (cfg.command == "eval") return cmd_eval(cfg);
  if (cfg.command == "compare") return cmd_compare(cfg);
  throw ConfigError("unknown command '" + cfg.command + "'");
}

int main(int argc, char** argv) {
  CLI::App app{"Post-training weight quantization with Attention Round"};
  app.require_subcommand(1);
  RunConfig cfg;
  std::string model, data_images, data_labels, test_images, test_labels, baseline, out = ".";
  std::vector<int> bit_list;
  std::uint64_t seed = 0;

  app.add_option("--model", model, "Model directory");
  app.add_option("--data-images", data_images, "Training / calibration images (IDX)");
  app.add_option("--data-labels", data_labels, "Training / calibration labels (IDX)");
  app.add_option("--test-images", test_images, "Test images (IDX)");
  app.add_option("--test-labels", test_labels, "Test labels (IDX)");
  app.add_option("--baseline", baseline, "FP model directory for the eval delta");
  app.add_option("--rounder", cfg.rounder, "nearest|floor|ceil|stochastic|adaround|attention");
  app.add_option("--wbits", cfg.wbits, "Weight bits for every layer");
  app.add_option("--bit-list", bit_list, "Candidate bit widths, ascending")->delimiter(',');
  app.add_option("--abits", cfg.abits, "Activation bits (default: float activations)");
  app.add_option("--tau", cfg.tau, "Attention Round tau, in quantization steps");
  app.add_option("--iters", cfg.iters, "Calibration iterations per layer");
  app.add_option("--sweep-iters", cfg.sweep_iters, "compare: iterations for the tau sweep");
  app.add_option("--lr", cfg.lr, "Learning rate (calibration; SGD for train)");
  app.add_option("--batch", cfg.batch, "Batch size");
  app.add_option("--calib-size", cfg.calib_size, "Calibration images");
  app.add_option("--epsilon", cfg.epsilon, "Coding-length distortion");
  app.add_option("--prefactor", cfg.prefactor, "Coding-length prefactor: full|half");
  app.add_option("--epochs", cfg.epochs, "Training epochs");
  app.add_option("--repeats", cfg.repeats, "compare: seeds averaged per row");
  auto* seed_opt = app.add_option("--seed", seed, "Seed (falls back to QUANT_SEED, then 0)");
  app.add_option("--out", out, "Output directory");

  for (const char* name : {"train", "assign-bits", "quantize", "eval", "compare"})
    app.add_subcommand(name)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    cfg.command = app.get_subcommands().front()->get_name();
    cfg.model = model;
    cfg.data_images = data_images;
    cfg.data_labels = data_labels;
    cfg.test_images = test_images;
    cfg.test_labels = test_labels;
    cfg.baseline = baseline;
    cfg.out = out;
    if (app.count("--bit-list")) cfg.bit_list = bit_list;
    if (seed_opt->count()) {
      cfg.seed = seed;
    } else if (const char* env = std::getenv("QUANT_SEED"); env && *env) {
      char* end = nullptr;
      cfg.seed = std::strtoull(env, &end, 10);
      if (*end != '\0') throw ConfigError(std::string("QUANT_SEED is not an unsigned integer: '") + env + "'");
    }
    return dispatch(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace aquant::cli
