#include "saigformer/blocks.hpp"

#include <cmath>

namespace saig::blocks {

int attention_output_channels(int channels, int heads, HeadIllumMode mode) {
  return mode == HeadIllumMode::replicate ? channels + 3 * heads : channels + 3;
}

template <typename T>
Tensor<T> ig_msa(const Tensor<T>& features, const Tensor<T>& illumination, const AttentionWeights<T>& w,
                 Tensor<T>* attention) {
  const Shape fs = features.shape();
  const int C = fs.c;
  const int heads = w.heads;
  if (heads < 1 || C % heads != 0) throw ShapeError("ig_msa", "heads must divide C = " + std::to_string(C));

  Tensor<T> illum = illumination;
  const Shape is = illumination.shape();
  if (is.c != 3) throw ShapeError("ig_msa", "illumination channels", 3, is.c);
  if (is.n != fs.n) throw ShapeError("ig_msa", "N", fs.n, is.n);
  if (is.h == 2 * fs.h && is.w == 2 * fs.w) {
    if (!w.illum_down) throw ShapeError("ig_msa", "illumination at 2x resolution needs a downsampler");
    illum = sai2e::downsample_illumination(illumination, *w.illum_down);
  } else if (is.h != fs.h || is.w != fs.w) {
    throw ShapeError("ig_msa", "illumination " + is.str() + " does not match features " + fs.str() +
                                   " (same or one level finer required)");
  }

  const int d = C / heads;
  const int L = fs.h * fs.w;
  const std::optional<Tensor<T>> none;
  auto qkv = ops::conv2d(ops::conv2d(features, w.qkv_w, none), w.qkv_dw, none, 1, 1, 3 * C);
  auto q = ops::slice_channels(qkv, 0, C);
  auto k = ops::slice_channels(qkv, C, C);
  auto v = ops::slice_channels(qkv, 2 * C, C);
  auto il = ops::conv2d(illum, w.illum_w, std::optional{w.illum_b});

  std::vector<Tensor<T>> parts;
  parts.reserve(2 * heads);
  for (int h = 0; h < heads; ++h) {
    parts.push_back(heads == 1 ? q : ops::slice_channels(q, h * d, d));
    parts.push_back(il);
  }
  auto q_lg = ops::reshape(ops::concat_channels(parts), {fs.n, heads, d + 3, L});
  auto k_h = ops::reshape(k, {fs.n, heads, d, L});
  auto v_h = ops::reshape(v, {fs.n, heads, d, L});

  // (d x L)(L x (d+3)): channel affinities, normalized over the key channels.
  auto logits = ops::scale(ops::bmm(k_h, q_lg, false, true), static_cast<T>(1.0 / std::sqrt(double(L))));
  auto attn = ops::softmax(ops::div(logits, w.alpha), 2);
  if (attention) *attention = attn;
  auto mixed = ops::bmm(attn, v_h, true, false);  // (N, heads, d+3, L)
  auto heads_out = ops::reshape(mixed, {fs.n, heads * (d + 3), fs.h, fs.w});

  if (w.mode == HeadIllumMode::single && heads > 1) {
    std::vector<Tensor<T>> value_parts;
    Tensor<T> illum_sum;
    for (int h = 0; h < heads; ++h) {
      value_parts.push_back(ops::slice_channels(heads_out, h * (d + 3), d));
      auto ih = ops::slice_channels(heads_out, h * (d + 3) + d, 3);
      illum_sum = h == 0 ? ih : ops::add(illum_sum, ih);
    }
    value_parts.push_back(ops::scale(illum_sum, T(1) / static_cast<T>(heads)));
    heads_out = ops::concat_channels(value_parts);
  }
  return ops::conv2d(heads_out, w.out_w, std::optional{w.out_b});
}

template <typename T>
Tensor<T> dg_ffn(const Tensor<T>& features, const FfnWeights<T>& w) {
  auto u1 = ops::conv2d(features, w.w1, std::optional{w.b1});
  auto u2 = ops::conv2d(features, w.w2, std::optional{w.b2});
  return ops::conv2d(ops::dual_gate(u1, u2), w.wo, std::optional{w.bo});
}

template <typename T>
Tensor<T> saigt_block(const Tensor<T>& features, const Tensor<T>& illumination, const BlockWeights<T>& w,
                      Tensor<T>* attention) {
  constexpr T eps = T(1e-6);
  auto mid = ops::add(features, ig_msa(ops::layer_norm(features, w.ln1_g, w.ln1_b, eps), illumination, w.attn, attention));
  return ops::add(mid, dg_ffn(ops::layer_norm(mid, w.ln2_g, w.ln2_b, eps), w.ffn));
}

#define SAIG_INSTANTIATE_BLOCKS(T)                                                                        \
  template Tensor<T> ig_msa(const Tensor<T>&, const Tensor<T>&, const AttentionWeights<T>&, Tensor<T>*); \
  template Tensor<T> dg_ffn(const Tensor<T>&, const FfnWeights<T>&);                                     \
  template Tensor<T> saigt_block(const Tensor<T>&, const Tensor<T>&, const BlockWeights<T>&, Tensor<T>*);

SAIG_INSTANTIATE_BLOCKS(float)
SAIG_INSTANTIATE_BLOCKS(double)

}  // namespace saig::blocks
