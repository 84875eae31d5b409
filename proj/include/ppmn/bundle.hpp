#pragma once

// Tensor bundle: a directory holding `manifest.json` and one raw
// little-endian row-major payload file per tensor.
//
//   {
//     "version": 1,
//     "tensors": [{"name": ..., "dtype": "f32" | "u8", "shape": [...], "file": ...}, ...],
//     "annotations": [...],       // per-phrase records (samples)
//     ...                         // extra top-level blocks, e.g. "config" (checkpoints)
//   }
//
// Reading validates every entry (known dtype, unique name, payload length
// equal to product(shape) * dtype size) and reports the offending tensor.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ppmn/model.hpp"
#include "ppmn/scene.hpp"

namespace ppmn {

enum class DType { f32, u8 };

std::size_t dtype_size(DType d);
std::string dtype_name(DType d);

struct BundleTensor {
    std::string name;
    DType dtype = DType::f32;
    Shape shape;
    std::vector<std::uint8_t> bytes;  // little-endian payload

    static BundleTensor from_f32(std::string name, Shape shape, std::span<const float> values);
    static BundleTensor from_u8(std::string name, Shape shape, std::span<const std::uint8_t> values);
    std::vector<float> as_f32() const;
};

struct TensorBundle {
    std::vector<BundleTensor> tensors;
    nlohmann::json annotations = nlohmann::json::array();
    nlohmann::json extra = nlohmann::json::object();  // merged into the manifest top level

    const BundleTensor& get(const std::string& name) const;
};

inline constexpr const char* kManifestName = "manifest.json";

void write_bundle(const TensorBundle& bundle, const std::filesystem::path& dir);
TensorBundle read_bundle(const std::filesystem::path& dir);

TensorBundle sample_to_bundle(const Sample& s);
Sample sample_from_bundle(const TensorBundle& b);

// Every named parameter plus the model config under "config".
TensorBundle params_to_bundle(const ModelParams<float>& p);
ModelParams<float> params_from_bundle(const TensorBundle& b, bool requires_grad = true);

void write_sample(const Sample& s, const std::filesystem::path& dir);
Sample read_sample(const std::filesystem::path& dir);
void write_checkpoint(const ModelParams<float>& p, const std::filesystem::path& dir);
ModelParams<float> read_checkpoint(const std::filesystem::path& dir);

// Dataset: per-sample bundle directories plus `index.json`
// {"version": 1, "samples": [relative paths]}.
void write_dataset(std::span<const Sample> samples, const std::filesystem::path& dir);
std::vector<Sample> read_dataset(const std::filesystem::path& dir);

}  // namespace ppmn
