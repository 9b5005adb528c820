#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "saigformer/config.hpp"
#include "saigformer/network.hpp"

// Checkpoint container:
//   "SAIGCKPT" | u32 LE format version | u64 LE header length | header | payload
// The header is canonical JSON with keys config, dtype, format_version, manifest
// ([{name, offset, shape}], offsets relative to the payload start), meta and
// payload_bytes. The payload is the little-endian concatenation of all tensors.
namespace saig::ckpt {

inline constexpr char kMagic[8] = {'S', 'A', 'I', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kFormatVersion = 1;

enum class Dtype { f32, f64 };

struct Blob {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Document {
  Dtype dtype = Dtype::f32;
  ModelConfig config;
  /// Free-form JSON object text.
  std::string meta_json = "{}";
  std::vector<Blob> blobs;
};

struct EntryInfo {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
};

struct Info {
  std::uint32_t format_version = 0;
  Dtype dtype = Dtype::f32;
  ModelConfig config;
  std::string meta_json;
  std::vector<EntryInfo> manifest;
  std::uint64_t payload_bytes = 0;
};

std::string encode(const Document& doc);
/// Throws FormatError on a bad magic, unknown version, malformed header,
/// non-contiguous manifest, or truncated payload.
Document decode(const std::string& bytes);
Info decode_info(const std::string& bytes);

void write_file(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace saig::ckpt

namespace saig {

/// Writes the model as a 32-bit checkpoint.
template <typename T>
void save_checkpoint(const ModelWeights<T>& w, const std::string& path, const std::string& meta_json = "{}");

/// Loads a checkpoint (32- or 64-bit payload). With `expected`, a differing
/// configuration raises ConfigError naming every differing field.
template <typename T>
ModelWeights<T> load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

/// Model weights held by a container document, checked against the manifest
/// implied by the document's configuration.
template <typename T>
ModelWeights<T> weights_from_document(const ckpt::Document& doc, const std::string& prefix = "");

template <typename T>
std::vector<ckpt::Blob> weights_to_blobs(const ModelWeights<T>& w, const std::string& prefix = "");

}  // namespace saig
