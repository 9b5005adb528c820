#pragma once

#include <optional>
#include <vector>

#include "saigformer/sai2e.hpp"
#include "saigformer/tensor.hpp"

namespace saig::blocks {

/// How the three projected illumination channels enter a multi-head attention.
/// `replicate`: appended to every head's query, so the heads emit C + 3*heads
/// channels. `single`: per-head illumination outputs are averaged, giving C + 3.
enum class HeadIllumMode { replicate, single };

template <typename T>
struct AttentionWeights {
  int heads = 1;
  HeadIllumMode mode = HeadIllumMode::replicate;
  Tensor<T> qkv_w;            // (3C, C, 1, 1), no bias
  Tensor<T> qkv_dw;           // (3C, 1, 3, 3), no bias
  Tensor<T> illum_w, illum_b; // (3, 3, 1, 1), (3)
  Tensor<T> out_w, out_b;     // (C, C + 3*heads or C + 3, 1, 1), (C)
  Tensor<T> alpha;            // (1, heads, 1, 1)
  /// Only needed when the illumination arrives at twice the feature resolution.
  std::optional<sai2e::DownsamplerWeights<T>> illum_down;
};

template <typename T>
struct FfnWeights {
  Tensor<T> w1, b1;  // (hidden, C, 1, 1)
  Tensor<T> w2, b2;  // (hidden, C, 1, 1)
  Tensor<T> wo, bo;  // (C, hidden, 1, 1)
};

template <typename T>
struct BlockWeights {
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  AttentionWeights<T> attn;
  FfnWeights<T> ffn;
};

/// Width of the head outputs before the output projection.
int attention_output_channels(int channels, int heads, HeadIllumMode mode);

/// Illumination-guided channel attention. `features` is the layer-normalized
/// block input (N, C, H, W); `illumination` is (N, 3, H, W) or (N, 3, 2H, 2W).
/// When `attention` is given it receives the post-softmax affinity matrices,
/// shape (N, heads, C/heads, C/heads + 3); every column sums to one.
template <typename T>
Tensor<T> ig_msa(const Tensor<T>& features, const Tensor<T>& illumination, const AttentionWeights<T>& w,
                 Tensor<T>* attention = nullptr);

/// W_o(GELU(W_1 F) * W_2 F + Sigmoid(W_2 F) * W_1 F), all pointwise.
template <typename T>
Tensor<T> dg_ffn(const Tensor<T>& features, const FfnWeights<T>& w);

/// F' = F + IG-MSA(LN(F), I_L); F_next = F' + DG-FFN(LN(F')). The illumination
/// bypasses both layer norms.
template <typename T>
Tensor<T> saigt_block(const Tensor<T>& features, const Tensor<T>& illumination, const BlockWeights<T>& w,
                      Tensor<T>* attention = nullptr);

}  // namespace saig::blocks
