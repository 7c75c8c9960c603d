// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mergeforge {

using json = nlohmann::json;

namespace {

using Kind = CheckpointError::Kind;

const char* kind_label(Kind kind) {
  switch (kind) {
    case Kind::kIo: return "io";
    case Kind::kMalformedHeader: return "malformed header";
    case Kind::kOffsetOverlap: return "offset overlap";
    case Kind::kTruncatedPayload: return "truncated payload";
    case Kind::kUnsupportedDtype: return "unsupported dtype";
  }
  return "unknown";
}

std::uint64_t read_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void write_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  return 0;
}

struct Entry {
  std::string name;
  std::string dtype;
  Shape shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
};

std::uint64_t as_offset(const json& v, const std::string& name) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw CheckpointError(Kind::kMalformedHeader, name, "data_offsets must be non-negative integers");
  }
  return v.get<std::uint64_t>();
}

Entry parse_entry(const std::string& name, const json& rec) {
  if (!rec.is_object()) throw CheckpointError(Kind::kMalformedHeader, name, "entry is not an object");
  Entry e;
  e.name = name;
  if (!rec.contains("dtype") || !rec["dtype"].is_string())
    throw CheckpointError(Kind::kMalformedHeader, name, "missing dtype");
  e.dtype = rec["dtype"].get<std::string>();
  if (dtype_size(e.dtype) == 0) throw CheckpointError(Kind::kUnsupportedDtype, name, "dtype " + e.dtype);
  if (!rec.contains("shape") || !rec["shape"].is_array())
    throw CheckpointError(Kind::kMalformedHeader, name, "missing shape");
  for (const json& d : rec["shape"]) {
    if (!d.is_number_integer() || d.get<std::int64_t>() <= 0)
      throw CheckpointError(Kind::kMalformedHeader, name, "shape extents must be positive integers");
    e.shape.push_back(d.get<std::size_t>());
  }
  if (e.shape.empty()) e.shape.push_back(1);
  if (!rec.contains("data_offsets") || !rec["data_offsets"].is_array() || rec["data_offsets"].size() != 2)
    throw CheckpointError(Kind::kMalformedHeader, name, "data_offsets must be [begin, end]");
  e.begin = as_offset(rec["data_offsets"][0], name);
  e.end = as_offset(rec["data_offsets"][1], name);
  if (e.end < e.begin) throw CheckpointError(Kind::kMalformedHeader, name, "data_offsets end before begin");
  if (e.end - e.begin != shape_numel(e.shape) * dtype_size(e.dtype)) {
    throw CheckpointError(Kind::kMalformedHeader, name,
                          "byte range does not match shape " + shape_str(e.shape) + " of dtype " + e.dtype);
  }
  return e;
}

Tensor decode(const Entry& e, const std::uint8_t* p) {
  const std::size_t n = shape_numel(e.shape);
  std::vector<float> values(n);
  if (e.dtype == "F32") {
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t* b = p + 4 * i;
      const std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
                                 (std::uint32_t(b[3]) << 24);
      values[i] = std::bit_cast<float>(bits);
    }
  } else {
    const bool bf16 = e.dtype == "BF16";
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint16_t bits = std::uint16_t(p[2 * i] | (p[2 * i + 1] << 8));
      values[i] = bf16 ? bfloat16_to_float(bits) : half_to_float(bits);
    }
  }
  return Tensor(e.shape, std::move(values));
}

}  // namespace

CheckpointError::CheckpointError(Kind kind, std::string tensor, const std::string& message)
    : Error(std::string("checkpoint ") + kind_label(kind) + (tensor.empty() ? "" : " in tensor '" + tensor + "'") +
            ": " + message),
      kind_(kind),
      tensor_(std::move(tensor)) {}

const Tensor& WeightMap::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ShapeError("weight map has no tensor '" + name + "'");
  return it->second;
}

Tensor& WeightMap::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ShapeError("weight map has no tensor '" + name + "'");
  return it->second;
}

float half_to_float(std::uint16_t bits) {
  const std::uint32_t sign = std::uint32_t(bits & 0x8000u) << 16;
  std::uint32_t exp = (bits >> 10) & 0x1fu;
  std::uint32_t mant = bits & 0x3ffu;
  std::uint32_t out;
  if (exp == 0) {
    if (mant == 0) {
      out = sign;
    } else {
      // Subnormal: renormalize.
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      out = sign | (std::uint32_t(127 - 15 - e) << 23) | ((mant & 0x3ffu) << 13);
    }
  } else if (exp == 0x1f) {
    out = sign | 0x7f800000u | (mant << 13);
  } else {
    out = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(out);
}

float bfloat16_to_float(std::uint16_t bits) { return std::bit_cast<float>(std::uint32_t(bits) << 16); }

std::vector<std::uint8_t> serialize_checkpoint(const WeightMap& weights) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : weights.tensors) {
    if (name == "__metadata__") throw CheckpointError(Kind::kMalformedHeader, name, "reserved tensor name");
    const std::uint64_t bytes = tensor.size() * 4;
    header[name] = {{"dtype", "F32"}, {"shape", tensor.shape()}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!weights.metadata.empty()) header["__metadata__"] = weights.metadata;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + offset);
  write_u64_le(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, tensor] : weights.tensors) {
    for (float v : tensor.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
  }
  return out;
}

WeightMap parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw CheckpointError(Kind::kMalformedHeader, "", "file shorter than the 8-byte length prefix");
  const std::uint64_t header_len = read_u64_le(bytes.data());
  if (header_len > bytes.size() - 8) {
    throw CheckpointError(Kind::kMalformedHeader, "", "header length " + std::to_string(header_len) +
                                                          " exceeds file size " + std::to_string(bytes.size()));
  }
  const char* header_begin = reinterpret_cast<const char*>(bytes.data() + 8);
  json header;
  try {
    header = json::parse(header_begin, header_begin + header_len);
  } catch (const json::parse_error& e) {
    throw CheckpointError(Kind::kMalformedHeader, "", std::string("invalid JSON: ") + e.what());
  }
  if (!header.is_object()) throw CheckpointError(Kind::kMalformedHeader, "", "header is not a JSON object");

  WeightMap out;
  std::vector<Entry> entries;
  for (const auto& [name, rec] : header.items()) {
    if (name == "__metadata__") {
      if (!rec.is_object()) throw CheckpointError(Kind::kMalformedHeader, "", "__metadata__ must be an object");
      for (const auto& [k, v] : rec.items()) {
        if (!v.is_string()) throw CheckpointError(Kind::kMalformedHeader, "", "metadata value for '" + k + "' is not a string");
        out.metadata[k] = v.get<std::string>();
      }
      continue;
    }
    entries.push_back(parse_entry(name, rec));
  }

  const std::uint64_t payload_size = bytes.size() - 8 - header_len;
  const std::uint8_t* payload = bytes.data() + 8 + header_len;
  std::vector<const Entry*> by_offset;
  for (const Entry& e : entries) by_offset.push_back(&e);
  std::stable_sort(by_offset.begin(), by_offset.end(),
                   [](const Entry* a, const Entry* b) { return a->begin < b->begin; });
  std::uint64_t cursor = 0;
  for (const Entry* e : by_offset) {
    if (e->begin < cursor) throw CheckpointError(Kind::kOffsetOverlap, e->name, "byte range overlaps a previous tensor");
    if (e->begin > cursor) throw CheckpointError(Kind::kMalformedHeader, e->name, "gap before tensor data");
    if (e->end > payload_size) {
      throw CheckpointError(Kind::kTruncatedPayload, e->name,
                            "needs bytes up to " + std::to_string(e->end) + " but payload has " + std::to_string(payload_size));
    }
    cursor = e->end;
  }
  if (cursor != payload_size) {
    throw CheckpointError(Kind::kMalformedHeader, "", std::to_string(payload_size - cursor) + " trailing payload bytes");
  }

  std::set<std::string> widened;
  for (const Entry& e : entries) {
    if (e.dtype != "F32") widened.insert(e.dtype);
    out.tensors.emplace(e.name, decode(e, payload + e.begin));
  }
  if (!widened.empty()) {
    std::string list;
    for (const auto& d : widened) list += (list.empty() ? "" : ",") + d;
    out.metadata[kWidenedMetadataKey] = list;
  }
  return out;
}

WeightMap read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::kIo, "", "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

void write_checkpoint(const WeightMap& weights, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(weights);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(Kind::kIo, "", "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(Kind::kIo, "", "write failed for " + path.string());
}

std::string CompatibilityReport::describe() const {
  std::ostringstream os;
  for (const auto& m : missing) os << "model " << m.model << " is missing tensor '" << m.name << "'\n";
  for (const auto& s : shape_mismatches) {
    os << "tensor '" << s.name << "': model 0 has shape " << shape_str(s.expected) << ", model " << s.model
       << " has " << shape_str(s.actual) << "\n";
  }
  return os.str();
}

CompatibilityReport validate_compatible(std::span<const WeightMap> models) {
  CompatibilityReport report;
  if (models.size() < 2) return report;
  const WeightMap& ref = models[0];
  for (std::size_t m = 1; m < models.size(); ++m) {
    const WeightMap& other = models[m];
    for (const auto& [name, tensor] : ref.tensors) {
      auto it = other.tensors.find(name);
      if (it == other.tensors.end()) {
        report.missing.push_back({name, m});
      } else if (it->second.shape() != tensor.shape()) {
        report.shape_mismatches.push_back({name, m, tensor.shape(), it->second.shape()});
      }
    }
    for (const auto& [name, tensor] : other.tensors) {
      if (!ref.contains(name)) report.missing.push_back({name, 0});
    }
  }
  return report;
}

void require_compatible(std::span<const WeightMap> models) {
  const CompatibilityReport report = validate_compatible(models);
  if (!report.empty()) throw IncompatibleModelsError("models are not mergeable:\n" + report.describe());
}

}  // namespace mergeforge
