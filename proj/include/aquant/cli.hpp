#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aquant/bit_allocator.hpp"
#include "aquant/calibration.hpp"
#include "aquant/model.hpp"

namespace aquant::cli {

namespace fs = std::filesystem;

struct RunConfig {
  std::string command;
  fs::path model;
  fs::path data_images, data_labels;  // training / calibration source
  fs::path test_images, test_labels;
  fs::path baseline;                  // eval: FP model for the accuracy delta
  fs::path out = ".";

  std::string rounder = "attention";
  std::optional<int> wbits;
  std::optional<std::vector<int>> bit_list;
  std::optional<int> abits;

  std::optional<double> tau, lr, epsilon;
  std::optional<std::int64_t> iters, batch, calib_size;
  std::optional<std::int64_t> sweep_iters;  // compare: iterations of the tau sweep rows
  std::optional<std::string> prefactor;
  std::optional<int> epochs;
  int repeats = 1;  // compare: seeds seed, seed + 1, ... averaged per row
  std::uint64_t seed = 0;

  HyperParams hyper() const;
  CodingConfig coding() const;

  /// Every setting that influences results, with defaults resolved. Paths are
  /// recorded by file name only so the hash does not depend on the working directory.
  nlohmann::json canonical() const;
  std::uint32_t hash() const;
};

/// Hex form of RunConfig::hash(), as written to CSV config_hash columns.
std::string config_hash(const RunConfig& cfg);

/// Baseline FP architecture for a dataset: the toy CNN sized to its samples.
ModelGraph model_for(const Dataset& ds);

/// Attention/AdaRound/... accuracy of one quantization run.
struct RunOutcome {
  QuantizeResult result;
  double accuracy = 0.0;
  double seconds = 0.0;
};

/// Fuses BN, draws the calibration subset with `hyper.seed`, quantizes, evaluates.
RunOutcome quantize_and_evaluate(const ModelGraph& fp_model, const Dataset& calib_pool, const Dataset& test,
                                 const std::map<std::string, int>& bits, const HyperParams& hyper,
                                 const QuantizeOptions& options);

/// Uniform bit map over the weight layers.
std::map<std::string, int> uniform_bits(const ModelGraph& model, int bits);

int cmd_train(const RunConfig& cfg);
int cmd_assign_bits(const RunConfig& cfg);
int cmd_quantize(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg);
int cmd_compare(const RunConfig& cfg);

int dispatch(const RunConfig& cfg);

/// Parses argv (CLI11), applies the QUANT_SEED fallback, runs the command.
/// Operational failures print to stderr and return nonzero.
int main(int argc, char** argv);

}  // namespace aquant::cli
