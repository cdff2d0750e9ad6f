#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aquant/dataset.hpp"
#include "aquant/model.hpp"
#include "aquant/rng.hpp"

namespace aquant {

inline constexpr int kManifestVersion = 1;

/// Tensor blob: "QTNS1", u8 dtype (0 = f32), u8 rank, rank x u32 LE dims,
/// LE f32 payload, then a CRC32 of all preceding bytes as u32 LE.
std::vector<std::uint8_t> encode_tensor(const Tensorf& t);
Tensorf decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& what = "tensor blob");

std::uint32_t crc32_of(const void* data, std::size_t size);

/// Writes `dir/manifest.json` and one `dir/tensors/<key>.qtns` per parameter.
void save_model(const ModelGraph& model, const std::filesystem::path& dir);
ModelGraph load_model(const std::filesystem::path& dir);

nlohmann::json quant_spec_to_json(const QuantSpec& q);
QuantSpec quant_spec_from_json(const nlohmann::json& j);

/// Reads an IDX image/label pair (optionally gzip-compressed); pixels scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Writes an IDX pair; pixels are stored as round(255 * clamp(v, 0, 1)).
void save_idx(const Dataset& ds, const std::filesystem::path& images, const std::filesystem::path& labels);

/// Class-conditional Gaussian blobs around well-separated class mean images.
Dataset synth_dataset(Rng& rng, Index n, int classes, const Shape& sample_shape = {1, 8, 8});

/// k samples drawn uniformly without replacement.
Dataset take_calibration(const Dataset& ds, Index k, Rng& rng);

/// Rows [begin, begin + count) of a dataset.
Dataset dataset_slice(const Dataset& ds, Index begin, Index count);

}  // namespace aquant
