#include "saigformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "saigformer/detail/json.hpp"
#include "saigformer/error.hpp"

namespace saig::ckpt {

using nlohmann::json;

namespace {

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::string& in, size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

int width(Dtype d) { return d == Dtype::f32 ? 4 : 8; }
const char* name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

json shape_json(const Shape& s) { return json::array({s.n, s.c, s.h, s.w}); }

Shape shape_from(const json& j, const std::string& entry) {
  if (!j.is_array() || j.size() != 4) throw FormatError("checkpoint manifest: entry '" + entry + "' has a malformed shape");
  std::array<int, 4> d{};
  for (size_t i = 0; i < 4; ++i) {
    if (!j[i].is_number_integer() || j[i].get<long long>() < 0 || j[i].get<long long>() > (1LL << 30)) {
      throw FormatError("checkpoint manifest: entry '" + entry + "' has a malformed shape");
    }
    d[i] = j[i].get<int>();
  }
  return {d[0], d[1], d[2], d[3]};
}

struct Parsed {
  Info info;
  size_t payload_start = 0;
};

Parsed parse(const std::string& bytes) {
  constexpr size_t fixed = sizeof(kMagic) + 4 + 8;
  if (bytes.size() < fixed || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic (not a checkpoint file)");
  }
  Parsed p;
  p.info.format_version = static_cast<std::uint32_t>(get_le(bytes, 8, 4));
  if (p.info.format_version != kFormatVersion) {
    throw FormatError("checkpoint: unknown format version " + std::to_string(p.info.format_version) + " (supported: " +
                      std::to_string(kFormatVersion) + ")");
  }
  const std::uint64_t header_len = get_le(bytes, 12, 8);
  if (header_len > bytes.size() - fixed) throw FormatError("checkpoint: truncated header");
  p.payload_start = fixed + static_cast<size_t>(header_len);

  json h;
  try {
    h = json::parse(bytes.begin() + fixed, bytes.begin() + static_cast<std::ptrdiff_t>(p.payload_start));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint: corrupt header: ") + e.what());
  }
  try {
    if (h.at("format_version").get<std::uint32_t>() != p.info.format_version) {
      throw FormatError("checkpoint: header format_version disagrees with the preamble");
    }
    const auto dtype = h.at("dtype").get<std::string>();
    if (dtype == "f32") {
      p.info.dtype = Dtype::f32;
    } else if (dtype == "f64") {
      p.info.dtype = Dtype::f64;
    } else {
      throw FormatError("checkpoint: unsupported dtype '" + dtype + "'");
    }
    p.info.config = detail::model_config_from_json(h.at("config"));
    p.info.meta_json = h.at("meta").dump();
    p.info.payload_bytes = h.at("payload_bytes").get<std::uint64_t>();
    std::uint64_t expected_offset = 0;
    for (const auto& e : h.at("manifest")) {
      EntryInfo entry;
      entry.name = e.at("name").get<std::string>();
      entry.shape = shape_from(e.at("shape"), entry.name);
      entry.offset = e.at("offset").get<std::uint64_t>();
      if (entry.offset != expected_offset) {
        throw FormatError("checkpoint manifest: entry '" + entry.name + "' offset " + std::to_string(entry.offset) +
                          ", expected " + std::to_string(expected_offset) + " (offsets must be contiguous)");
      }
      expected_offset += entry.shape.numel() * width(p.info.dtype);
      p.info.manifest.push_back(std::move(entry));
    }
    if (expected_offset != p.info.payload_bytes) {
      throw FormatError("checkpoint manifest: tensors cover " + std::to_string(expected_offset) +
                        " bytes but payload_bytes is " + std::to_string(p.info.payload_bytes));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: corrupt header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: corrupt header config: ") + e.what());
  }
  const size_t available = bytes.size() - p.payload_start;
  if (available < p.info.payload_bytes) {
    throw FormatError("checkpoint: truncated payload (" + std::to_string(available) + " of " +
                      std::to_string(p.info.payload_bytes) + " bytes)");
  }
  if (available > p.info.payload_bytes) throw FormatError("checkpoint: trailing bytes after payload");
  return p;
}

}  // namespace

std::string encode(const Document& doc) {
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& b : doc.blobs) {
    if (b.values.size() != b.shape.numel()) {
      throw ValueError("checkpoint: tensor '" + b.name + "' holds " + std::to_string(b.values.size()) +
                       " values for shape " + b.shape.str());
    }
    manifest.push_back({{"name", b.name}, {"shape", shape_json(b.shape)}, {"offset", offset}});
    offset += b.values.size() * width(doc.dtype);
  }
  json meta;
  try {
    meta = json::parse(doc.meta_json);
  } catch (const json::parse_error& e) {
    throw ValueError(std::string("checkpoint: meta is not valid JSON: ") + e.what());
  }
  const json header{{"format_version", kFormatVersion}, {"dtype", name(doc.dtype)},
                    {"config", detail::to_json(doc.config)}, {"manifest", manifest},
                    {"payload_bytes", offset}, {"meta", meta}};
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le(out, kFormatVersion, 4);
  put_le(out, text.size(), 8);
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& b : doc.blobs) {
    for (double v : b.values) {
      if (doc.dtype == Dtype::f32) {
        put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
      } else {
        put_le(out, std::bit_cast<std::uint64_t>(v), 8);
      }
    }
  }
  return out;
}

Info decode_info(const std::string& bytes) { return parse(bytes).info; }

Document decode(const std::string& bytes) {
  const Parsed p = parse(bytes);
  Document doc;
  doc.dtype = p.info.dtype;
  doc.config = p.info.config;
  doc.meta_json = p.info.meta_json;
  const int wbytes = width(doc.dtype);
  for (const auto& e : p.info.manifest) {
    Blob b{e.name, e.shape, std::vector<double>(e.shape.numel())};
    size_t pos = p.payload_start + e.offset;
    for (auto& v : b.values) {
      if (doc.dtype == Dtype::f32) {
        v = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(bytes, pos, 4)));
      } else {
        v = std::bit_cast<double>(get_le(bytes, pos, 8));
      }
      pos += wbytes;
    }
    doc.blobs.push_back(std::move(b));
  }
  return doc;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace saig::ckpt

namespace saig {

template <typename T>
std::vector<ckpt::Blob> weights_to_blobs(const ModelWeights<T>& w, const std::string& prefix) {
  std::vector<ckpt::Blob> out;
  for (const auto& p : w.parameters()) {
    const auto d = p.tensor.data();
    out.push_back({prefix + p.name, p.tensor.shape(), std::vector<double>(d.begin(), d.end())});
  }
  return out;
}

template <typename T>
ModelWeights<T> weights_from_document(const ckpt::Document& doc, const std::string& prefix) {
  auto w = init_model<T>(doc.config);
  auto params = w.parameters();
  std::vector<const ckpt::Blob*> found;
  for (const auto& b : doc.blobs) {
    if (b.name.rfind(prefix, 0) == 0) found.push_back(&b);
  }
  if (found.size() < params.size()) {
    throw FormatError("checkpoint: holds " + std::to_string(found.size()) + " model tensors, configuration needs " +
                      std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& b = *found[i];
    if (b.name != prefix + params[i].name || !(b.shape == params[i].tensor.shape())) {
      throw FormatError("checkpoint: tensor " + std::to_string(i) + " is '" + b.name + "' " + b.shape.str() +
                        ", configuration expects '" + prefix + params[i].name + "' " +
                        params[i].tensor.shape().str());
    }
    auto dst = params[i].tensor.mutable_data();
    for (size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(b.values[k]);
  }
  return w;
}

template <typename T>
void save_checkpoint(const ModelWeights<T>& w, const std::string& path, const std::string& meta_json) {
  ckpt::Document doc;
  doc.dtype = ckpt::Dtype::f32;
  doc.config = w.config;
  doc.meta_json = meta_json;
  doc.blobs = weights_to_blobs(w);
  ckpt::write_file(path, ckpt::encode(doc));
}

template <typename T>
ModelWeights<T> load_checkpoint(const std::string& path, const ModelConfig* expected) {
  const auto doc = ckpt::decode(ckpt::read_file(path));
  if (expected) {
    const auto diff = differing_fields(*expected, doc.config);
    if (!diff.empty()) throw ConfigError("checkpoint '" + path + "' was saved with a different configuration: ", diff);
  }
  return weights_from_document<T>(doc);
}

#define SAIG_INSTANTIATE_CHECKPOINT(T)                                                                 \
  template std::vector<ckpt::Blob> weights_to_blobs(const ModelWeights<T>&, const std::string&);       \
  template ModelWeights<T> weights_from_document<T>(const ckpt::Document&, const std::string&);        \
  template void save_checkpoint(const ModelWeights<T>&, const std::string&, const std::string&);       \
  template ModelWeights<T> load_checkpoint<T>(const std::string&, const ModelConfig*);

SAIG_INSTANTIATE_CHECKPOINT(float)
SAIG_INSTANTIATE_CHECKPOINT(double)

}  // namespace saig
