#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "saigformer/blocks.hpp"
#include "saigformer/sai2e.hpp"

namespace saig {

enum class Precision { f32, f64 };

/// Architecture hyperparameters. Levels 0..3 run at H, H/2, H/4, H/8 with
/// widths C, 2C, 4C, 8C; the full-resolution decoder and refinement stages run
/// at 2C after the skip concatenation.
struct ModelConfig {
  int base_channels = 32;
  /// enc0, enc1, enc2, bottleneck, dec2, dec1, dec0, refinement.
  std::array<int, 8> block_counts{4, 6, 6, 8, 6, 6, 4, 4};
  /// Attention heads at levels 0..3 (decoder mirrors the encoder).
  std::array<int, 4> heads{1, 2, 4, 8};
  double ffn_expansion = 2.66;
  blocks::HeadIllumMode head_illum_mode = blocks::HeadIllumMode::replicate;
  sai2e::Variant illumination = sai2e::Variant::adaptive;
  /// Hidden width of the offset and modulation sub-networks.
  int estimator_hidden = 16;
  Precision precision = Precision::f32;
  std::uint64_t seed = 0;

  /// Base 16, one block per stage except two in the bottleneck.
  static ModelConfig toy();

  /// Hidden width of a DG-FFN at the given channel width: floor(gamma * C).
  int ffn_hidden(int channels) const;
  int level_width(int level) const { return base_channels << level; }

  /// Throws ConfigError naming every invalid field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  int iterations = 2000;
  int batch_size = 8;
  int crop = 64;
  double lr_start = 2e-4;
  double lr_end = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_l1 = 1.0;
  double lambda_ssim = 1.0;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
  std::uint64_t seed = 0;
  int snapshot_interval = 200;
  /// "synthetic" or a directory holding low/ and normal/ PNG folders.
  std::string data = "synthetic";
  int synthetic_pairs = 8;
  int synthetic_size = 64;

  /// 300k iterations, batch 8, 128 crops.
  static TrainConfig paper();
  /// 2000 iterations on 8 synthetic 64x64 pairs, lr_start 5e-4.
  static TrainConfig desk();

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Canonical JSON text (sorted keys, fixed formatting).
std::string to_json_text(const ModelConfig& cfg);
std::string to_json_text(const TrainConfig& cfg);

/// Parses a config object; unknown keys and invalid values raise ConfigError
/// listing all offenders. Missing keys take the defaults.
ModelConfig model_config_from_json_text(const std::string& text);
TrainConfig train_config_from_json_text(const std::string& text);

/// Names of the fields whose values differ.
std::vector<std::string> differing_fields(const ModelConfig& a, const ModelConfig& b);

/// Versioned document {"version", "model", "train"} used by the CLI.
struct ConfigFile {
  static constexpr int kVersion = 1;
  ModelConfig model;
  TrainConfig train;
};

std::string to_json_text(const ConfigFile& file);
ConfigFile config_file_from_json_text(const std::string& text);
ConfigFile load_config_file(const std::string& path);
void save_config_file(const ConfigFile& file, const std::string& path);

std::string to_string(blocks::HeadIllumMode mode);
std::string to_string(sai2e::Variant variant);
std::string to_string(Precision precision);

}  // namespace saig
