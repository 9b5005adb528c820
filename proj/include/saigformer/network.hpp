#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "saigformer/blocks.hpp"
#include "saigformer/config.hpp"
#include "saigformer/sai2e.hpp"
#include "saigformer/tensor.hpp"

namespace saig {

inline constexpr int kNumLevels = 4;
inline constexpr int kNumStages = 8;

/// Stage names in execution order; the index matches ModelConfig::block_counts.
const std::array<const char*, kNumStages>& stage_names();

/// Resolution level (0 = full) a stage runs at.
int stage_level(int stage);

/// Feature width of a stage; the full-resolution decoder and refinement run at 2C.
int stage_width(const ModelConfig& cfg, int stage);

template <typename T>
struct Conv {
  Tensor<T> w, b;
};

/// Handle to a parameter; writes through `tensor.mutable_data()` reach the model.
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct ModelWeights {
  ModelConfig config;
  Conv<T> embed;                                            // 3x3, 3 -> C
  sai2e::EstimatorWeights<T> estimator;                     // empty parts per variant
  std::array<sai2e::DownsamplerWeights<T>, 3> illum_down;  // level k -> k + 1
  std::array<std::vector<blocks::BlockWeights<T>>, kNumStages> stages;
  std::array<Conv<T>, 3> down;  // after unshuffle, level k -> k + 1
  std::array<Conv<T>, 3> up;    // before shuffle, level k + 1 -> k
  std::array<Conv<T>, 2> fuse;  // skip fusion at levels 1 and 2 (index = level - 1)
  Conv<T> final;                // 3x3, 2C -> 3

  /// Every trainable tensor with its unique dotted name, in a fixed order.
  std::vector<NamedParam<T>> parameters() const;

  std::uint64_t allocated_count() const;
  void set_requires_grad(bool value) const;
  void zero_grad() const;
};

/// Closed-form parameter count; allocates nothing.
std::uint64_t param_count(const ModelConfig& cfg);

struct ManifestEntry {
  std::string name;
  Shape shape;
};

/// Names and shapes of init_model(cfg).parameters(), without allocating.
std::vector<ManifestEntry> parameter_manifest(const ModelConfig& cfg);

/// Deterministic initialization from cfg.seed. Convolutions draw weights and
/// biases uniformly from +-1/sqrt(fan_in); layer norms start at gain 1, bias 0
/// and attention temperatures at 1. With `zero_init_residual`, every block
/// output projection and the final conv start at zero so the network is the
/// identity map.
template <typename T>
ModelWeights<T> init_model(const ModelConfig& cfg, bool zero_init_residual = true);

template <typename T>
struct ForwardTrace {
  sai2e::Estimate<T> estimate;
  std::array<Tensor<T>, kNumLevels> pyramid;
  /// Input shape of each stage, by stage index.
  std::array<Shape, kNumStages> stage_shapes{};
  Tensor<T> residual;
  /// Attention maps of every block in execution order (when requested).
  bool capture_attention = false;
  std::vector<Tensor<T>> attention;
};

/// Enhances a N x 3 x H x W batch; H and W must be multiples of 8.
template <typename T>
Tensor<T> forward(const ModelWeights<T>& w, const Tensor<T>& image, ForwardTrace<T>* trace = nullptr);

/// Converts between precisions; the result does not require grad.
template <typename To, typename From>
ModelWeights<To> cast_model(const ModelWeights<From>& w);

}  // namespace saig
