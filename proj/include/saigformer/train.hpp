#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "saigformer/config.hpp"
#include "saigformer/network.hpp"
#include "saigformer/sai2e.hpp"
#include "saigformer/tensor.hpp"

namespace saig::train {

// ---------------------------------------------------------------------------
// Losses and metrics

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

/// Normalized 1-D Gaussian taps.
std::vector<double> gaussian_window(int size, double sigma);

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& x, const Tensor<T>& y);

/// Mean SSIM over channels and valid window positions (no padding).
template <typename T>
Tensor<T> ssim(const Tensor<T>& x, const Tensor<T>& y, const SsimOptions& opt = {});

/// 1 - ssim(x, y).
template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& x, const Tensor<T>& y, const SsimOptions& opt = {});

/// 10 log10(peak^2 / MSE); +infinity when the inputs are identical.
template <typename T>
double psnr(const Tensor<T>& x, const Tensor<T>& y, double peak = 1.0);

/// lr_end + (lr_start - lr_end)(1 + cos(pi t / T)) / 2.
double cosine_lr(int iter, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<std::string> names;
  std::vector<std::vector<T>> m, v;
};

template <typename T>
AdamState<T> adam_init(const std::vector<NamedParam<T>>& params);

/// One bias-corrected Adam update from the accumulated gradients. Parameters
/// without a gradient count as zero gradient.
template <typename T>
void adam_step(const std::vector<NamedParam<T>>& params, AdamState<T>& state, double lr, const TrainConfig& cfg);

/// Rescales all gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<NamedParam<T>>& params, double max_norm);

// ---------------------------------------------------------------------------
// Data

struct PairedSample {
  int height = 0;
  int width = 0;
  std::vector<float> low;     // 3 x H x W, planar
  std::vector<float> normal;  // 3 x H x W, planar
  std::string provenance;
};

/// Deterministic 64-bit mix of a seed and counters.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0);

/// Smooth gradient field with rectangles and disks as the reference; the
/// low-light view applies a smooth per-pixel gamma in [1.5, 3.5], a global
/// scale in [0.1, 0.4] and Gaussian noise (sigma in [0.01, 0.05], truncated at
/// 3 sigma), then clamps to [0, 1].
PairedSample synth_pair(std::uint64_t seed, int size);

/// cfg.synthetic_pairs pairs of size cfg.synthetic_size derived from cfg.seed.
std::vector<PairedSample> synthetic_dataset(const TrainConfig& cfg);

/// Noise level used by synth_pair for this seed.
double synth_noise_sigma(std::uint64_t seed);

/// Applies element `k` (0..7) of the dihedral group: k % 4 quarter turns
/// counter-clockwise after a horizontal flip when k >= 4.
PairedSample dihedral(const PairedSample& s, int k);

/// Random crop followed by a uniformly drawn dihedral transform, identical for
/// both images.
PairedSample augment(const PairedSample& s, int crop, std::uint64_t seed);

/// Loads dir/low/*.png and dir/normal/*.png matched by filename. Files without
/// a partner raise ValueError naming every orphan.
std::vector<PairedSample> load_paired_dir(const std::string& dir);

template <typename T>
Tensor<T> stack_low(const std::vector<PairedSample>& batch);
template <typename T>
Tensor<T> stack_normal(const std::vector<PairedSample>& batch);

// ---------------------------------------------------------------------------
// Training loop

struct MetricRow {
  int iter = 0;
  double lr = 0, loss = 0, l1 = 0, ssim_loss = 0, psnr_train = 0;
};

struct OffsetRow {
  int iter = 0;
  sai2e::OffsetStats stats;
};

struct FitOptions {
  /// Output directory for metrics.csv, offsets.csv and snapshots; empty
  /// disables all file output.
  std::string out_dir;
  /// Training-state snapshot to continue from.
  std::string resume_from;
  /// Stop after this many iterations have run in total (-1: run to the end).
  int stop_at = -1;
  std::function<void(const MetricRow&)> on_iteration;
};

struct FitResult {
  std::vector<MetricRow> metrics;
  std::vector<OffsetRow> offsets;
  int next_iter = 0;
};

template <typename T>
FitResult fit(ModelWeights<T>& model, const std::vector<PairedSample>& data, const TrainConfig& cfg,
              const FitOptions& options = {});

/// Batch contents of iteration `iter`: sample indices and augmentation seeds.
std::vector<PairedSample> training_batch(const std::vector<PairedSample>& data, const TrainConfig& cfg, int iter);

/// Mean PSNR of the model over the given (un-augmented) samples.
template <typename T>
double evaluate_psnr(const ModelWeights<T>& model, const std::vector<PairedSample>& data);

/// 64-bit training snapshot: weights, Adam moments and the next iteration.
template <typename T>
void save_training_state(const std::string& path, const ModelWeights<T>& model, const AdamState<T>& adam,
                         int next_iter, const TrainConfig& cfg);

template <typename T>
struct TrainingState {
  ModelWeights<T> model;
  AdamState<T> adam;
  int next_iter = 0;
  TrainConfig train;
};

template <typename T>
TrainingState<T> load_training_state(const std::string& path);

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::string& path);
void write_offsets_csv(const std::string& path, const std::vector<OffsetRow>& rows);
std::vector<OffsetRow> read_offsets_csv(const std::string& path);

}  // namespace saig::train
