#include "saigformer/network.hpp"

#include <cmath>
#include <random>

#include "saigformer/error.hpp"
#include "saigformer/ops.hpp"

namespace saig {

const std::array<const char*, kNumStages>& stage_names() {
  static const std::array<const char*, kNumStages> names{"enc0", "enc1", "enc2", "bottleneck",
                                                         "dec2", "dec1", "dec0", "refine"};
  return names;
}

int stage_level(int stage) {
  static constexpr std::array<int, kNumStages> levels{0, 1, 2, 3, 2, 1, 0, 0};
  return levels.at(static_cast<size_t>(stage));
}

int stage_width(const ModelConfig& cfg, int stage) {
  const int level = stage_level(stage);
  return stage >= 6 ? 2 * cfg.base_channels : cfg.level_width(level);
}

namespace {

enum class Init { uniform, ones, zeros, residual };

Shape vec(int n) { return {1, n, 1, 1}; }

// Visits every parameter slot in canonical order. `fn(name, shape, slot, init, fan_in)`.
template <typename T, typename Fn>
void walk(ModelWeights<T>& m, const ModelConfig& cfg, Fn&& fn) {
  auto conv = [&](const std::string& p, Conv<T>& c, int out, int in, int k, Init init = Init::uniform) {
    const int fan_in = in * k * k;
    fn(p + ".w", Shape{out, in, k, k}, c.w, init, fan_in);
    fn(p + ".b", vec(out), c.b, init, fan_in);
  };
  auto subnet = [&](const std::string& p, sai2e::SubNetWeights<T>& s, int out) {
    const int hid = cfg.estimator_hidden;
    fn(p + ".conv3.w", Shape{hid, 3, 3, 3}, s.conv3_w, Init::uniform, 27);
    fn(p + ".conv3.b", vec(hid), s.conv3_b, Init::uniform, 27);
    fn(p + ".conv1.w", Shape{out, hid, 1, 1}, s.conv1_w, Init::uniform, hid);
    fn(p + ".conv1.b", vec(out), s.conv1_b, Init::uniform, hid);
  };

  const int C = cfg.base_channels;
  conv("embed", m.embed, C, 3, 3);
  if (cfg.illumination != sai2e::Variant::avgpool2x2) subnet("sai2e.offset", m.estimator.offset, 4);
  if (cfg.illumination == sai2e::Variant::adaptive) subnet("sai2e.modulation", m.estimator.modulation, 3);
  for (int k = 0; k < 3; ++k) {
    const std::string p = "illum_down" + std::to_string(k);
    auto& d = m.illum_down[k];
    fn(p + ".dw.w", Shape{3, 1, 4, 4}, d.dw_w, Init::uniform, 16);
    fn(p + ".dw.b", vec(3), d.dw_b, Init::uniform, 16);
    fn(p + ".pw.w", Shape{3, 3, 1, 1}, d.pw_w, Init::uniform, 3);
    fn(p + ".pw.b", vec(3), d.pw_b, Init::uniform, 3);
  }

  auto stage = [&](int s) {
    const int width = stage_width(cfg, s);
    const int heads = cfg.heads[stage_level(s)];
    const int hidden = cfg.ffn_hidden(width);
    const int attn_out = blocks::attention_output_channels(width, heads, cfg.head_illum_mode);
    auto& list = m.stages[s];
    list.resize(static_cast<size_t>(cfg.block_counts[s]));
    for (size_t b = 0; b < list.size(); ++b) {
      const std::string p = std::string(stage_names()[s]) + ".block" + std::to_string(b);
      auto& bw = list[b];
      bw.attn.heads = heads;
      bw.attn.mode = cfg.head_illum_mode;
      fn(p + ".ln1.g", vec(width), bw.ln1_g, Init::ones, 0);
      fn(p + ".ln1.b", vec(width), bw.ln1_b, Init::zeros, 0);
      fn(p + ".attn.qkv.w", Shape{3 * width, width, 1, 1}, bw.attn.qkv_w, Init::uniform, width);
      fn(p + ".attn.qkv_dw.w", Shape{3 * width, 1, 3, 3}, bw.attn.qkv_dw, Init::uniform, 9);
      fn(p + ".attn.illum.w", Shape{3, 3, 1, 1}, bw.attn.illum_w, Init::uniform, 3);
      fn(p + ".attn.illum.b", vec(3), bw.attn.illum_b, Init::uniform, 3);
      fn(p + ".attn.alpha", vec(heads), bw.attn.alpha, Init::ones, 0);
      fn(p + ".attn.out.w", Shape{width, attn_out, 1, 1}, bw.attn.out_w, Init::residual, attn_out);
      fn(p + ".attn.out.b", vec(width), bw.attn.out_b, Init::residual, attn_out);
      fn(p + ".ln2.g", vec(width), bw.ln2_g, Init::ones, 0);
      fn(p + ".ln2.b", vec(width), bw.ln2_b, Init::zeros, 0);
      fn(p + ".ffn.w1.w", Shape{hidden, width, 1, 1}, bw.ffn.w1, Init::uniform, width);
      fn(p + ".ffn.w1.b", vec(hidden), bw.ffn.b1, Init::uniform, width);
      fn(p + ".ffn.w2.w", Shape{hidden, width, 1, 1}, bw.ffn.w2, Init::uniform, width);
      fn(p + ".ffn.w2.b", vec(hidden), bw.ffn.b2, Init::uniform, width);
      fn(p + ".ffn.wo.w", Shape{width, hidden, 1, 1}, bw.ffn.wo, Init::residual, hidden);
      fn(p + ".ffn.wo.b", vec(width), bw.ffn.bo, Init::residual, hidden);
    }
  };

  for (int level = 0; level < 3; ++level) {
    stage(level);
    const int w = cfg.level_width(level);
    conv("down" + std::to_string(level), m.down[level], 2 * w, 4 * w, 1);
  }
  stage(3);
  for (int level = 2; level >= 0; --level) {
    const int w = cfg.level_width(level);
    conv("up" + std::to_string(level), m.up[level], 4 * w, 2 * w, 1);
    if (level > 0) conv("fuse" + std::to_string(level), m.fuse[level - 1], w, 2 * w, 1);
    stage(level == 2 ? 4 : level == 1 ? 5 : 6);
  }
  stage(7);
  conv("final", m.final, 3, 2 * C, 3, Init::residual);
}

}  // namespace

template <typename T>
std::vector<NamedParam<T>> ModelWeights<T>::parameters() const {
  std::vector<NamedParam<T>> out;
  auto& self = const_cast<ModelWeights<T>&>(*this);
  // Only reads the slots; the block vectors are already sized.
  walk(self, config, [&](const std::string& name, const Shape&, Tensor<T>& slot, Init, int) {
    out.push_back({name, slot});
  });
  return out;
}

template <typename T>
std::uint64_t ModelWeights<T>::allocated_count() const {
  std::uint64_t total = 0;
  for (const auto& p : parameters()) total += p.tensor.defined() ? p.tensor.numel() : 0;
  return total;
}

template <typename T>
void ModelWeights<T>::set_requires_grad(bool value) const {
  for (auto& p : parameters()) p.tensor.set_requires_grad(value);
}

template <typename T>
void ModelWeights<T>::zero_grad() const {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

std::vector<ManifestEntry> parameter_manifest(const ModelConfig& cfg) {
  cfg.validate();
  ModelWeights<float> skeleton;
  skeleton.config = cfg;
  std::vector<ManifestEntry> out;
  walk(skeleton, cfg, [&](const std::string& name, const Shape& shape, Tensor<float>&, Init, int) {
    out.push_back({name, shape});
  });
  return out;
}

std::uint64_t param_count(const ModelConfig& cfg) {
  std::uint64_t total = 0;
  for (const auto& e : parameter_manifest(cfg)) total += e.shape.numel();
  return total;
}

template <typename T>
ModelWeights<T> init_model(const ModelConfig& cfg, bool zero_init_residual) {
  cfg.validate();
  ModelWeights<T> m;
  m.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  auto uniform = [&](double bound) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return (2.0 * u - 1.0) * bound;
  };
  walk(m, cfg, [&](const std::string&, const Shape& shape, Tensor<T>& slot, Init init, int fan_in) {
    std::vector<T> values(shape.numel(), T(0));
    if (init == Init::residual && !zero_init_residual) init = Init::uniform;
    if (init == Init::uniform) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& v : values) v = static_cast<T>(uniform(bound));
    } else if (init == Init::ones) {
      std::fill(values.begin(), values.end(), T(1));
    }
    slot = Tensor<T>::from(shape, std::move(values));
  });
  return m;
}

template <typename To, typename From>
ModelWeights<To> cast_model(const ModelWeights<From>& w) {
  ModelWeights<To> out;
  out.config = w.config;
  const auto src = w.parameters();
  size_t i = 0;
  walk(out, w.config, [&](const std::string& name, const Shape& shape, Tensor<To>& slot, Init, int) {
    if (i >= src.size() || src[i].name != name) throw InvariantError("cast_model: parameter order mismatch at " + name);
    const auto data = src[i++].tensor.data();
    slot = Tensor<To>::from(shape, std::vector<To>(data.begin(), data.end()));
  });
  return out;
}

template <typename T>
Tensor<T> forward(const ModelWeights<T>& w, const Tensor<T>& image, ForwardTrace<T>* trace) {
  const Shape s = image.shape();
  if (s.c != 3) throw ShapeError("forward", "input channels", 3, s.c);
  if (s.h % 8 != 0 || s.w % 8 != 0) {
    throw ShapeError("forward", "input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                                    " is not a multiple of 8; pad reflectively first (see pad_reflect)");
  }

  auto est = sai2e::estimate_illumination(image, w.estimator, w.config.illumination);
  std::array<Tensor<T>, kNumLevels> pyramid;
  pyramid[0] = est.illumination;
  for (int k = 0; k < 3; ++k) pyramid[k + 1] = sai2e::downsample_illumination(pyramid[k], w.illum_down[k]);

  auto run = [&](int stage, Tensor<T> x) {
    if (trace) trace->stage_shapes[stage] = x.shape();
    const auto& illum = pyramid[stage_level(stage)];
    for (const auto& block : w.stages[stage]) {
      if (trace && trace->capture_attention) {
        Tensor<T> attn;
        x = blocks::saigt_block(x, illum, block, &attn);
        trace->attention.push_back(attn);
      } else {
        x = blocks::saigt_block(x, illum, block);
      }
    }
    return x;
  };
  auto conv1 = [](const Tensor<T>& x, const Conv<T>& c) { return ops::conv2d(x, c.w, std::optional{c.b}); };

  std::array<Tensor<T>, 3> skips;
  Tensor<T> x = ops::conv2d(image, w.embed.w, std::optional{w.embed.b}, 1, 1);
  for (int level = 0; level < 3; ++level) {
    skips[level] = run(level, x);
    x = conv1(ops::pixel_unshuffle(skips[level], 2), w.down[level]);
  }
  x = run(3, x);
  for (int level = 2; level >= 0; --level) {
    x = ops::pixel_shuffle(conv1(x, w.up[level]), 2);
    x = ops::concat_channels(std::vector<Tensor<T>>{x, skips[level]});
    if (level > 0) x = conv1(x, w.fuse[level - 1]);
    x = run(level == 2 ? 4 : level == 1 ? 5 : 6, x);
  }
  x = run(7, x);
  auto residual = ops::conv2d(x, w.final.w, std::optional{w.final.b}, 1, 1);
  auto out = ops::add(image, residual);

  if (trace) {
    trace->estimate = est;
    trace->pyramid = pyramid;
    trace->residual = residual;
  }
  return out;
}

#define SAIG_INSTANTIATE_NETWORK(T)                                                       \
  template struct ModelWeights<T>;                                                        \
  template ModelWeights<T> init_model<T>(const ModelConfig&, bool);                       \
  template Tensor<T> forward(const ModelWeights<T>&, const Tensor<T>&, ForwardTrace<T>*);

SAIG_INSTANTIATE_NETWORK(float)
SAIG_INSTANTIATE_NETWORK(double)

template ModelWeights<float> cast_model(const ModelWeights<double>&);
template ModelWeights<double> cast_model(const ModelWeights<float>&);
template ModelWeights<float> cast_model(const ModelWeights<float>&);
template ModelWeights<double> cast_model(const ModelWeights<double>&);

}  // namespace saig
