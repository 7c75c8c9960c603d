// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0
//
// safetensors checkpoints:
//
//   [u64 little-endian N][N bytes of UTF-8 JSON header][payload]
//
// The header maps tensor name -> {"dtype", "shape", "data_offsets"} with
// offsets relative to the payload start, plus an optional "__metadata__"
// string map. F32, F16 and BF16 are accepted on read (half types are widened
// to f32); only F32 is written.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mergeforge/error.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

struct WeightMap {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;

  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  friend bool operator==(const WeightMap&, const WeightMap&) = default;
};

// Metadata key set when half-precision payloads were widened on read. The
// value lists the source dtypes, e.g. "F16" or "BF16,F16".
inline constexpr const char* kWidenedMetadataKey = "mergeforge.widened_from";

class CheckpointError : public Error {
 public:
  enum class Kind {
    kIo,
    kMalformedHeader,
    kOffsetOverlap,
    kTruncatedPayload,
    kUnsupportedDtype,
  };

  CheckpointError(Kind kind, std::string tensor, const std::string& message);

  Kind kind() const { return kind_; }
  // Offending tensor, empty when the problem is not tied to one.
  const std::string& tensor() const { return tensor_; }

 private:
  Kind kind_;
  std::string tensor_;
};

std::vector<std::uint8_t> serialize_checkpoint(const WeightMap& weights);
WeightMap parse_checkpoint(std::span<const std::uint8_t> bytes);

WeightMap read_checkpoint(const std::filesystem::path& path);
void write_checkpoint(const WeightMap& weights, const std::filesystem::path& path);

struct ShapeMismatch {
  std::string name;
  std::size_t model = 0;  // index of the model that disagrees with model 0
  Shape expected;
  Shape actual;
};

struct MissingTensor {
  std::string name;
  std::size_t model = 0;  // model lacking the tensor
};

// Findings of comparing every model against model 0. Empty means mergeable.
struct CompatibilityReport {
  std::vector<MissingTensor> missing;
  std::vector<ShapeMismatch> shape_mismatches;

  bool empty() const { return missing.empty() && shape_mismatches.empty(); }
  std::string describe() const;
};

CompatibilityReport validate_compatible(std::span<const WeightMap> models);

// Throws IncompatibleModelsError carrying the report text if not mergeable.
void require_compatible(std::span<const WeightMap> models);

// IEEE half / bfloat16 to float.
float half_to_float(std::uint16_t bits);
float bfloat16_to_float(std::uint16_t bits);

}  // namespace mergeforge
