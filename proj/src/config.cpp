#include <fstream>
#include <set>
#include <sstream>

#include "saigformer/config.hpp"
#include "saigformer/detail/json.hpp"
#include "saigformer/error.hpp"

namespace saig {

using nlohmann::json;

ModelConfig ModelConfig::toy() {
  ModelConfig cfg;
  cfg.base_channels = 16;
  cfg.block_counts = {1, 1, 1, 2, 1, 1, 1, 1};
  return cfg;
}

int ModelConfig::ffn_hidden(int channels) const {
  return static_cast<int>(ffn_expansion * channels);
}

void ModelConfig::validate() const {
  std::vector<std::string> bad;
  if (base_channels < 1) bad.push_back("base_channels: must be >= 1");
  for (size_t i = 0; i < block_counts.size(); ++i) {
    if (block_counts[i] < 0) bad.push_back("block_counts[" + std::to_string(i) + "]: must be >= 0");
  }
  for (int level = 0; level < 4; ++level) {
    const int h = heads[level];
    if (h < 1) {
      bad.push_back("heads[" + std::to_string(level) + "]: must be >= 1");
    } else if (base_channels >= 1) {
      const int width = level_width(level);
      if (width % h != 0) {
        bad.push_back("heads[" + std::to_string(level) + "]: " + std::to_string(h) +
                      " does not divide level width " + std::to_string(width));
      }
      if (level == 0 && (2 * base_channels) % h != 0) {
        bad.push_back("heads[0]: does not divide the full-resolution decoder width");
      }
    }
  }
  if (!(ffn_expansion > 0.0) || (base_channels >= 1 && ffn_hidden(base_channels) < 1)) {
    bad.push_back("ffn_expansion: must give a hidden width >= 1");
  }
  if (estimator_hidden < 1) bad.push_back("estimator_hidden: must be >= 1");
  if (!bad.empty()) throw ConfigError("invalid model config: ", bad);
}

TrainConfig TrainConfig::paper() {
  TrainConfig cfg;
  cfg.iterations = 300000;
  cfg.batch_size = 8;
  cfg.crop = 128;
  cfg.snapshot_interval = 5000;
  return cfg;
}

TrainConfig TrainConfig::desk() {
  TrainConfig cfg;
  cfg.lr_start = 5e-4;
  return cfg;
}

void TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (iterations < 0) bad.push_back("iterations: must be >= 0");
  if (batch_size < 1) bad.push_back("batch_size: must be >= 1");
  if (crop < 8 || crop % 8 != 0) bad.push_back("crop: must be a positive multiple of 8");
  if (!(lr_start > 0.0)) bad.push_back("lr_start: must be > 0");
  if (!(lr_end >= 0.0) || lr_end > lr_start) bad.push_back("lr_end: must lie in [0, lr_start]");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) bad.push_back("beta1: must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) bad.push_back("beta2: must lie in [0, 1)");
  if (!(adam_eps > 0.0)) bad.push_back("adam_eps: must be > 0");
  if (!(lambda_l1 >= 0.0)) bad.push_back("lambda_l1: must be >= 0");
  if (!(lambda_ssim >= 0.0)) bad.push_back("lambda_ssim: must be >= 0");
  if (!(grad_clip >= 0.0)) bad.push_back("grad_clip: must be >= 0");
  if (snapshot_interval < 1) bad.push_back("snapshot_interval: must be >= 1");
  if (data.empty()) bad.push_back("data: must be 'synthetic' or a directory");
  if (synthetic_pairs < 1) bad.push_back("synthetic_pairs: must be >= 1");
  if (synthetic_size < 8 || synthetic_size % 8 != 0) bad.push_back("synthetic_size: must be a positive multiple of 8");
  if (data == "synthetic" && synthetic_size < crop) bad.push_back("crop: larger than synthetic_size");
  if (!bad.empty()) throw ConfigError("invalid train config: ", bad);
}

std::string to_string(blocks::HeadIllumMode mode) {
  return mode == blocks::HeadIllumMode::replicate ? "replicate" : "single";
}

std::string to_string(sai2e::Variant variant) {
  switch (variant) {
    case sai2e::Variant::adaptive: return "adaptive";
    case sai2e::Variant::avgpool2x2: return "avgpool2x2";
    case sai2e::Variant::no_modulation: return "no_modulation";
  }
  return "?";
}

std::string to_string(Precision precision) { return precision == Precision::f32 ? "f32" : "f64"; }

namespace detail {

namespace {

// Collects per-field problems while reading an object.
class Reader {
 public:
  Reader(const json& j, std::set<std::string> known, std::string scope)
      : j_(j), scope_(std::move(scope)) {
    if (!j.is_object()) {
      bad_.push_back(scope_ + ": expected a JSON object");
      return;
    }
    for (const auto& [key, _] : j.items()) {
      if (!known.count(key)) bad_.push_back(scope_ + "." + key + ": unknown key");
    }
  }

  template <typename V>
  void read(const std::string& key, V& out) {
    if (!j_.is_object() || !j_.contains(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<V, int>) {
        if (!v.is_number_integer()) throw std::runtime_error("expected an integer");
      } else if constexpr (std::is_same_v<V, std::uint64_t>) {
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
          throw std::runtime_error("expected a non-negative integer");
      } else if constexpr (std::is_same_v<V, double>) {
        if (!v.is_number()) throw std::runtime_error("expected a number");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw std::runtime_error("expected a string");
      }
      out = v.get<V>();
    } catch (const std::exception& e) {
      bad_.push_back(scope_ + "." + key + ": " + e.what());
    }
  }

  template <typename V, size_t N>
  void read_array(const std::string& key, std::array<V, N>& out) {
    if (!j_.is_object() || !j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array() || v.size() != N) {
      bad_.push_back(scope_ + "." + key + ": expected an array of " + std::to_string(N) + " integers");
      return;
    }
    for (size_t i = 0; i < N; ++i) {
      if (!v[i].is_number_integer()) {
        bad_.push_back(scope_ + "." + key + "[" + std::to_string(i) + "]: expected an integer");
        return;
      }
      out[i] = v[i].get<V>();
    }
  }

  template <typename E>
  void read_enum(const std::string& key, E& out, std::initializer_list<std::pair<const char*, E>> options) {
    if (!j_.is_object() || !j_.contains(key)) return;
    const json& v = j_.at(key);
    if (v.is_string()) {
      for (const auto& [name, value] : options) {
        if (v.get<std::string>() == name) {
          out = value;
          return;
        }
      }
    }
    std::string names;
    for (const auto& [name, _] : options) names += std::string(names.empty() ? "" : "|") + name;
    bad_.push_back(scope_ + "." + key + ": expected one of " + names);
  }

  std::vector<std::string>& problems() { return bad_; }

 private:
  const json& j_;
  std::string scope_;
  std::vector<std::string> bad_;
};

void append_validation(std::vector<std::string>& bad, const std::string& scope, auto&& validate) {
  try {
    validate();
  } catch (const ConfigError& e) {
    for (const auto& f : e.fields()) bad.push_back(scope + "." + f);
  }
}

}  // namespace

json to_json(const ModelConfig& cfg) {
  return json{{"base_channels", cfg.base_channels},
              {"block_counts", cfg.block_counts},
              {"heads", cfg.heads},
              {"ffn_expansion", cfg.ffn_expansion},
              {"head_illum_mode", to_string(cfg.head_illum_mode)},
              {"illumination", to_string(cfg.illumination)},
              {"estimator_hidden", cfg.estimator_hidden},
              {"precision", to_string(cfg.precision)},
              {"seed", cfg.seed}};
}

json to_json(const TrainConfig& cfg) {
  return json{{"iterations", cfg.iterations},   {"batch_size", cfg.batch_size},
              {"crop", cfg.crop},               {"lr_start", cfg.lr_start},
              {"lr_end", cfg.lr_end},           {"beta1", cfg.beta1},
              {"beta2", cfg.beta2},             {"adam_eps", cfg.adam_eps},
              {"lambda_l1", cfg.lambda_l1},     {"lambda_ssim", cfg.lambda_ssim},
              {"grad_clip", cfg.grad_clip},     {"seed", cfg.seed},
              {"snapshot_interval", cfg.snapshot_interval},
              {"data", cfg.data},               {"synthetic_pairs", cfg.synthetic_pairs},
              {"synthetic_size", cfg.synthetic_size}};
}

namespace {

ModelConfig read_model(const json& j, std::vector<std::string>& bad, const std::string& scope) {
  ModelConfig cfg;
  Reader r(j, {"base_channels", "block_counts", "heads", "ffn_expansion", "head_illum_mode", "illumination",
               "estimator_hidden", "precision", "seed"},
           scope);
  r.read("base_channels", cfg.base_channels);
  r.read_array("block_counts", cfg.block_counts);
  r.read_array("heads", cfg.heads);
  r.read("ffn_expansion", cfg.ffn_expansion);
  r.read_enum("head_illum_mode", cfg.head_illum_mode,
              {{"replicate", blocks::HeadIllumMode::replicate}, {"single", blocks::HeadIllumMode::single}});
  r.read_enum("illumination", cfg.illumination,
              {{"adaptive", sai2e::Variant::adaptive},
               {"avgpool2x2", sai2e::Variant::avgpool2x2},
               {"no_modulation", sai2e::Variant::no_modulation}});
  r.read("estimator_hidden", cfg.estimator_hidden);
  r.read_enum("precision", cfg.precision, {{"f32", Precision::f32}, {"f64", Precision::f64}});
  r.read("seed", cfg.seed);
  bad.insert(bad.end(), r.problems().begin(), r.problems().end());
  append_validation(bad, scope, [&] { cfg.validate(); });
  return cfg;
}

TrainConfig read_train(const json& j, std::vector<std::string>& bad, const std::string& scope) {
  TrainConfig cfg;
  Reader r(j, {"iterations", "batch_size", "crop", "lr_start", "lr_end", "beta1", "beta2", "adam_eps", "lambda_l1",
               "lambda_ssim", "grad_clip", "seed", "snapshot_interval", "data", "synthetic_pairs",
               "synthetic_size"},
           scope);
  r.read("iterations", cfg.iterations);
  r.read("batch_size", cfg.batch_size);
  r.read("crop", cfg.crop);
  r.read("lr_start", cfg.lr_start);
  r.read("lr_end", cfg.lr_end);
  r.read("beta1", cfg.beta1);
  r.read("beta2", cfg.beta2);
  r.read("adam_eps", cfg.adam_eps);
  r.read("lambda_l1", cfg.lambda_l1);
  r.read("lambda_ssim", cfg.lambda_ssim);
  r.read("grad_clip", cfg.grad_clip);
  r.read("seed", cfg.seed);
  r.read("snapshot_interval", cfg.snapshot_interval);
  r.read("data", cfg.data);
  r.read("synthetic_pairs", cfg.synthetic_pairs);
  r.read("synthetic_size", cfg.synthetic_size);
  bad.insert(bad.end(), r.problems().begin(), r.problems().end());
  append_validation(bad, scope, [&] { cfg.validate(); });
  return cfg;
}

json parse(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config: malformed JSON: ") + e.what());
  }
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  std::vector<std::string> bad;
  auto cfg = read_model(j, bad, "model");
  if (!bad.empty()) throw ConfigError("invalid model config: ", bad);
  return cfg;
}

TrainConfig train_config_from_json(const json& j) {
  std::vector<std::string> bad;
  auto cfg = read_train(j, bad, "train");
  if (!bad.empty()) throw ConfigError("invalid train config: ", bad);
  return cfg;
}

}  // namespace detail

std::string to_json_text(const ModelConfig& cfg) { return detail::to_json(cfg).dump(); }
std::string to_json_text(const TrainConfig& cfg) { return detail::to_json(cfg).dump(); }

ModelConfig model_config_from_json_text(const std::string& text) {
  return detail::model_config_from_json(detail::parse(text));
}

TrainConfig train_config_from_json_text(const std::string& text) {
  return detail::train_config_from_json(detail::parse(text));
}

std::vector<std::string> differing_fields(const ModelConfig& a, const ModelConfig& b) {
  const json ja = detail::to_json(a);
  const json jb = detail::to_json(b);
  std::vector<std::string> out;
  for (const auto& [key, value] : ja.items()) {
    if (value != jb.at(key)) out.push_back(key + " (" + value.dump() + " vs " + jb.at(key).dump() + ")");
  }
  return out;
}

std::string to_json_text(const ConfigFile& file) {
  json j{{"version", ConfigFile::kVersion}, {"model", detail::to_json(file.model)}, {"train", detail::to_json(file.train)}};
  return j.dump(2) + "\n";
}

ConfigFile config_file_from_json_text(const std::string& text) {
  const json j = detail::parse(text);
  std::vector<std::string> bad;
  ConfigFile file;
  if (!j.is_object()) throw ConfigError("invalid config file: ", {"<root>: expected a JSON object"});
  for (const auto& [key, _] : j.items()) {
    if (key != "version" && key != "model" && key != "train") bad.push_back(key + ": unknown key");
  }
  if (!j.contains("version")) {
    bad.push_back("version: missing");
  } else if (!j["version"].is_number_integer() || j["version"].get<int>() != ConfigFile::kVersion) {
    bad.push_back("version: unsupported (expected " + std::to_string(ConfigFile::kVersion) + ")");
  }
  if (j.contains("model")) file.model = detail::read_model(j["model"], bad, "model");
  if (j.contains("train")) file.train = detail::read_train(j["train"], bad, "train");
  if (!bad.empty()) throw ConfigError("invalid config file: ", bad);
  return file;
}

ConfigFile load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return config_file_from_json_text(ss.str());
}

void save_config_file(const ConfigFile& file, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config file '" + path + "'");
  out << to_json_text(file);
}

}  // namespace saig
