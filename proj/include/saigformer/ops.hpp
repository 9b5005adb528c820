#pragma once

#include <optional>
#include <vector>

#include "saigformer/tensor.hpp"

namespace saig::ops {

enum class Activation { gelu, sigmoid, softplus };
enum class Resample { unshuffle, shuffle };

// Elementwise arithmetic. `b` may broadcast: each of its dimensions must equal
// the matching dimension of `a` or be 1.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T> Tensor<T> abs(const Tensor<T>& x);
template <typename T> Tensor<T> reciprocal(const Tensor<T>& x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// gelu uses the exact erf form.
template <typename T> Tensor<T> activation(const Tensor<T>& x, Activation kind);
template <typename T> Tensor<T> gelu(const Tensor<T>& x) { return activation(x, Activation::gelu); }
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Activation::sigmoid); }
template <typename T> Tensor<T> softplus(const Tensor<T>& x) { return activation(x, Activation::softplus); }

/// GELU(a) * b + sigmoid(b) * a, evaluated as one node.
template <typename T> Tensor<T> dual_gate(const Tensor<T>& a, const Tensor<T>& b);

/// Test hook: while set, newly built GELU nodes carry a wrong derivative.
void set_corrupt_gelu_backward(bool on);
bool corrupt_gelu_backward();

/// 2-D convolution, weight (outC, inC/groups, kH, kW), optional bias (outC).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 int stride = 1, int padding = 0, int groups = 1);

/// Normalizes over channels at every spatial location; gain/bias hold C values.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-6));

/// Softmax along axis 0..3 (N, C, H, W), max-subtracted.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);

/// Space-to-depth / depth-to-space. Unshuffle maps (N,C,H,W) to
/// (N,C*r*r,H/r,W/r); output channel c*r*r + dy*r + dx holds input pixel
/// (y*r+dy, x*r+dx) of channel c.
template <typename T> Tensor<T> pixel_resample(const Tensor<T>& x, int r, Resample direction);
template <typename T> Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) { return pixel_resample(x, r, Resample::unshuffle); }
template <typename T> Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) { return pixel_resample(x, r, Resample::shuffle); }

template <typename T> Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> slice_channels(const Tensor<T>& x, int begin, int count);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Batched matrix product over the (N, C) planes: each plane is an H x W
/// matrix. Result plane = op(a) * op(b).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false, bool transpose_b = false);

}  // namespace saig::ops
