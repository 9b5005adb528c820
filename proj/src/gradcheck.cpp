#include "saigformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "saigformer/blocks.hpp"
#include "saigformer/error.hpp"
#include "saigformer/network.hpp"
#include "saigformer/ops.hpp"
#include "saigformer/sai2e.hpp"
#include "saigformer/sat.hpp"
#include "saigformer/train.hpp"

namespace saig::gradcheck {

using T = double;
using Tn = Tensor<double>;

namespace {

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double objective(const Tn& out, const std::vector<double>& r) {
  const auto d = out.data();
  double acc = 0;
  for (size_t i = 0; i < d.size(); ++i) acc += d[i] * r[i];
  return acc;
}

void record(Result& res, double err) {
  res.max_rel_err = std::max(res.max_rel_err, err);
  res.checked += 1;
}

double rel_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

}  // namespace

Result check(const std::string& name, std::vector<Tn> leaves, const std::function<Tn()>& fn, const Options& opt) {
  std::mt19937_64 rng(opt.seed ^ name_hash(name));
  for (auto& l : leaves) {
    if (!l.is_leaf()) throw ValueError("gradcheck '" + name + "': every checked tensor must be a leaf");
    l.set_requires_grad(true);
    l.zero_grad();
  }
  const Tn out = fn();
  std::vector<double> r(out.numel());
  for (auto& v : r) v = 2.0 * unit(rng) - 1.0;
  const auto projection = Tn::from(out.shape(), r);
  backward(ops::sum(ops::mul(out, projection)));

  Result res{name, 0.0, 0, true};
  for (auto& leaf : leaves) {
    const auto analytic = leaf.grad();
    const size_t n = leaf.numel();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    if (n > opt.max_samples) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_samples);
    }
    std::vector<double> numeric(idx.size());
    auto data = leaf.mutable_data();
    for (size_t k = 0; k < idx.size(); ++k) {
      const double x = data[idx[k]];
      const double h = opt.step * std::max(1.0, std::abs(x));
      data[idx[k]] = x + h;
      const double fp = objective(fn(), r);
      data[idx[k]] = x - h;
      const double fm = objective(fn(), r);
      data[idx[k]] = x;
      numeric[k] = (fp - fm) / (2.0 * h);
    }
    double scale = 0;
    for (double v : numeric) scale = std::max(scale, std::abs(v));
    const double floor = std::max(1e-3 * scale, 1e-10);
    for (size_t k = 0; k < idx.size(); ++k) record(res, rel_error(analytic[idx[k]], numeric[k], floor));
    leaf.zero_grad();
  }
  res.passed = res.max_rel_err < opt.tolerance;
  return res;
}

void set_corrupt_backward(bool corrupt) { ops::set_corrupt_gelu_backward(corrupt); }
bool corrupt_backward() { return ops::corrupt_gelu_backward(); }

std::vector<std::string> modules() { return {"tensor", "sat", "sai2e", "blocks", "network", "train"}; }

namespace {

class Factory {
 public:
  explicit Factory(std::uint64_t seed) : rng_(seed) {}

  Tn uniform(Shape s, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(s.numel());
    for (auto& x : v) x = lo + (hi - lo) * unit(rng_);
    return Tn::from(s, std::move(v));
  }

  // Values bounded away from zero, for abs / div / reciprocal.
  Tn away_from_zero(Shape s, double lo, double hi) {
    auto t = uniform(s, lo, hi);
    for (auto& x : t.mutable_data()) x = unit(rng_) < 0.5 ? -x : x;
    return t;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

std::vector<Result> tensor_suite(const Options& o) {
  Factory f(o.seed);
  std::vector<Result> out;
  auto a = f.uniform({2, 3, 4, 5});
  auto b = f.uniform({2, 3, 4, 5});
  auto bc = f.uniform({1, 3, 1, 1});
  auto pos = f.uniform({2, 3, 4, 5}, 0.5, 2.0);
  auto nz = f.away_from_zero({2, 3, 4, 5}, 0.2, 1.0);
  out.push_back(check("tensor.add", {a, b}, [&] { return ops::add(a, b); }, o));
  out.push_back(check("tensor.add_broadcast", {a, bc}, [&] { return ops::add(a, bc); }, o));
  out.push_back(check("tensor.sub", {a, b}, [&] { return ops::sub(a, b); }, o));
  out.push_back(check("tensor.mul_broadcast", {a, bc}, [&] { return ops::mul(a, bc); }, o));
  out.push_back(check("tensor.div", {a, pos}, [&] { return ops::div(a, pos); }, o));
  out.push_back(check("tensor.scale", {a}, [&] { return ops::scale(a, 1.7); }, o));
  out.push_back(check("tensor.add_scalar", {a}, [&] { return ops::add_scalar(a, 0.3); }, o));
  out.push_back(check("tensor.abs", {nz}, [&] { return ops::abs(nz); }, o));
  out.push_back(check("tensor.reciprocal", {nz}, [&] { return ops::reciprocal(nz); }, o));
  out.push_back(check("tensor.sum", {a}, [&] { return ops::sum(a); }, o));
  out.push_back(check("tensor.mean", {a}, [&] { return ops::mean(a); }, o));
  out.push_back(check("tensor.gelu", {a}, [&] { return ops::gelu(a); }, o));
  out.push_back(check("tensor.sigmoid", {a}, [&] { return ops::sigmoid(a); }, o));
  out.push_back(check("tensor.softplus", {a}, [&] { return ops::softplus(a); }, o));
  out.push_back(check("tensor.dual_gate", {a, b}, [&] { return ops::dual_gate(a, b); }, o));

  auto x = f.uniform({2, 4, 6, 6});
  auto w1 = f.uniform({5, 4, 1, 1});
  auto w3 = f.uniform({5, 4, 3, 3});
  auto wg = f.uniform({6, 2, 3, 3});
  auto wd = f.uniform({4, 1, 3, 3});
  auto wd4 = f.uniform({4, 1, 4, 4});
  auto b5 = f.uniform({1, 5, 1, 1});
  auto b4 = f.uniform({1, 4, 1, 1});
  out.push_back(check("tensor.conv2d_1x1", {x, w1, b5}, [&] { return ops::conv2d(x, w1, std::optional{b5}); }, o));
  out.push_back(check("tensor.conv2d_3x3", {x, w3, b5}, [&] { return ops::conv2d(x, w3, std::optional{b5}, 1, 1); }, o));
  out.push_back(check("tensor.conv2d_3x3_stride2", {x, w3}, [&] { return ops::conv2d(x, w3, std::optional<Tn>{}, 2, 1); }, o));
  out.push_back(check("tensor.conv2d_grouped", {x, wg}, [&] { return ops::conv2d(x, wg, std::optional<Tn>{}, 1, 1, 2); }, o));
  out.push_back(check("tensor.conv2d_depthwise", {x, wd, b4}, [&] { return ops::conv2d(x, wd, std::optional{b4}, 1, 1, 4); }, o));
  out.push_back(check("tensor.conv2d_depthwise_4x4_s2", {x, wd4}, [&] { return ops::conv2d(x, wd4, std::optional<Tn>{}, 2, 1, 4); }, o));

  auto g = f.uniform({1, 4, 1, 1}, 0.5, 1.5);
  auto lb = f.uniform({1, 4, 1, 1});
  out.push_back(check("tensor.layer_norm", {x, g, lb}, [&] { return ops::layer_norm(x, g, lb, 1e-6); }, o));
  out.push_back(check("tensor.softmax_axis2", {x}, [&] { return ops::softmax(x, 2); }, o));
  out.push_back(check("tensor.softmax_axis3", {x}, [&] { return ops::softmax(x, 3); }, o));
  out.push_back(check("tensor.softmax_axis1", {x}, [&] { return ops::softmax(x, 1); }, o));
  out.push_back(check("tensor.pixel_unshuffle", {x}, [&] { return ops::pixel_unshuffle(x, 2); }, o));
  auto xs = f.uniform({1, 8, 3, 3});
  out.push_back(check("tensor.pixel_shuffle", {xs}, [&] { return ops::pixel_shuffle(xs, 2); }, o));
  auto y = f.uniform({2, 3, 6, 6});
  out.push_back(check("tensor.concat_channels", {x, y}, [&] { return ops::concat_channels(std::vector<Tn>{x, y}); }, o));
  out.push_back(check("tensor.slice_channels", {x}, [&] { return ops::slice_channels(x, 1, 2); }, o));
  out.push_back(check("tensor.reshape", {x}, [&] { return ops::reshape(x, {2, 2, 2, 36}); }, o));

  auto ma = f.uniform({2, 2, 3, 4});
  auto mb = f.uniform({2, 2, 4, 5});
  auto mc = f.uniform({2, 2, 5, 4});
  auto md = f.uniform({2, 2, 3, 5});
  out.push_back(check("tensor.bmm", {ma, mb}, [&] { return ops::bmm(ma, mb); }, o));
  out.push_back(check("tensor.bmm_tb", {ma, mc}, [&] { return ops::bmm(ma, mc, false, true); }, o));
  out.push_back(check("tensor.bmm_ta", {ma, md}, [&] { return ops::bmm(ma, md, true, false); }, o));
  out.push_back(check("tensor.bmm_ta_tb", {mc, md}, [&] { return ops::bmm(mc, md, true, true); }, o));
  return out;
}

// The table itself is not a graph node; its corner derivatives are checked
// directly against central differences of box_sum_fractional.
std::vector<Result> sat_suite(const Options& o) {
  std::mt19937_64 rng(o.seed ^ name_hash("sat"));
  Result res{"sat.box_sum_fractional_corners", 0.0, 0, true};
  const int H = 9, W = 7;
  std::vector<double> img(static_cast<size_t>(H) * W);
  for (auto& v : img) v = unit(rng);
  const auto table = sat::SummedAreaTable::build<double>(img, H, W);
  auto away_from_lattice = [&](double lo, double hi) {
    for (;;) {
      const double v = lo + (hi - lo) * unit(rng);
      if (std::abs(v - std::round(v)) > 0.01) return v;
    }
  };
  for (int trial = 0; trial < 64; ++trial) {
    double x0 = away_from_lattice(0.0, W / 2.0), x1 = away_from_lattice(W / 2.0 + 0.1, W);
    double y0 = away_from_lattice(0.0, H / 2.0), y1 = away_from_lattice(H / 2.0 + 0.1, H);
    sat::CornerGradient g;
    sat::box_sum_fractional(table, {x0, y0, x1, y1}, &g);
    const double analytic[4] = {g.dx0, g.dy0, g.dx1, g.dy1};
    double numeric[4];
    double* coords[4] = {&x0, &y0, &x1, &y1};
    for (int k = 0; k < 4; ++k) {
      const double v = *coords[k];
      const double h = o.step * std::max(1.0, std::abs(v));
      *coords[k] = v + h;
      const double fp = sat::box_sum_fractional(table, {x0, y0, x1, y1});
      *coords[k] = v - h;
      const double fm = sat::box_sum_fractional(table, {x0, y0, x1, y1});
      *coords[k] = v;
      numeric[k] = (fp - fm) / (2 * h);
    }
    double scale = 0;
    for (double v : numeric) scale = std::max(scale, std::abs(v));
    const double floor = std::max(1e-3 * scale, 1e-10);
    for (int k = 0; k < 4; ++k) record(res, rel_error(analytic[k], numeric[k], floor));
  }
  res.passed = res.max_rel_err < o.tolerance;
  return {res};
}

sai2e::SubNetWeights<T> subnet(Factory& f, int hidden, int out) {
  return {f.uniform({hidden, 3, 3, 3}, -0.5, 0.5), f.uniform({1, hidden, 1, 1}, -0.5, 0.5),
          f.uniform({out, hidden, 1, 1}, -0.5, 0.5), f.uniform({1, out, 1, 1}, -0.5, 0.5)};
}

sai2e::DownsamplerWeights<T> downsampler(Factory& f) {
  return {f.uniform({3, 1, 4, 4}, -0.5, 0.5), f.uniform({1, 3, 1, 1}, -0.5, 0.5), f.uniform({3, 3, 1, 1}, -0.5, 0.5),
          f.uniform({1, 3, 1, 1}, -0.5, 0.5)};
}

std::vector<Result> sai2e_suite(const Options& o) {
  Factory f(o.seed ^ name_hash("sai2e"));
  std::vector<Result> out;
  auto img = f.uniform({2, 3, 6, 8}, 0.0, 1.0);
  auto off = subnet(f, 5, 4);
  auto mod = subnet(f, 5, 3);
  out.push_back(check("sai2e.predict_offsets", {img, off.conv3_w, off.conv3_b, off.conv1_w, off.conv1_b},
                      [&] { return sai2e::predict_offsets(img, off); }, o));
  out.push_back(check("sai2e.predict_modulation", {img, mod.conv3_w, mod.conv3_b, mod.conv1_w, mod.conv1_b},
                      [&] { return sai2e::predict_modulation(img, mod); }, o));
  auto offsets = f.uniform({2, 4, 6, 8}, 0.05, 0.95);
  out.push_back(check("sai2e.offsets_to_extents", {offsets}, [&] { return sai2e::offsets_to_extents(offsets, 6, 8); }, o));
  auto extents = f.uniform({2, 4, 6, 8}, 0.3, 3.7);
  out.push_back(check("sai2e.dynamic_box_mean", {img, extents}, [&] { return sai2e::dynamic_box_mean(img, extents); }, o));
  sai2e::EstimatorWeights<T> est{off, mod};
  out.push_back(check("sai2e.estimate_adaptive", {img, off.conv3_w, off.conv1_w, off.conv1_b, mod.conv1_w, mod.conv1_b},
                      [&] { return sai2e::estimate_illumination(img, est, sai2e::Variant::adaptive).illumination; }, o));
  out.push_back(check("sai2e.estimate_no_modulation", {img, off.conv1_w},
                      [&] { return sai2e::estimate_illumination(img, est, sai2e::Variant::no_modulation).illumination; }, o));
  out.push_back(check("sai2e.estimate_avgpool2x2", {img},
                      [&] { return sai2e::estimate_illumination(img, est, sai2e::Variant::avgpool2x2).illumination; }, o));
  auto down = downsampler(f);
  auto level = f.uniform({2, 3, 6, 8});
  out.push_back(check("sai2e.downsample_illumination", {level, down.dw_w, down.dw_b, down.pw_w, down.pw_b},
                      [&] { return sai2e::downsample_illumination(level, down); }, o));
  return out;
}

blocks::AttentionWeights<T> attention(Factory& f, int C, int heads, blocks::HeadIllumMode mode) {
  blocks::AttentionWeights<T> w;
  w.heads = heads;
  w.mode = mode;
  const int out = blocks::attention_output_channels(C, heads, mode);
  w.qkv_w = f.uniform({3 * C, C, 1, 1}, -0.6, 0.6);
  w.qkv_dw = f.uniform({3 * C, 1, 3, 3}, -0.6, 0.6);
  w.illum_w = f.uniform({3, 3, 1, 1}, -0.6, 0.6);
  w.illum_b = f.uniform({1, 3, 1, 1}, -0.6, 0.6);
  w.out_w = f.uniform({C, out, 1, 1}, -0.6, 0.6);
  w.out_b = f.uniform({1, C, 1, 1}, -0.6, 0.6);
  w.alpha = f.uniform({1, heads, 1, 1}, 0.5, 1.5);
  return w;
}

blocks::FfnWeights<T> ffn(Factory& f, int C, int hidden) {
  return {f.uniform({hidden, C, 1, 1}, -0.6, 0.6), f.uniform({1, hidden, 1, 1}, -0.6, 0.6),
          f.uniform({hidden, C, 1, 1}, -0.6, 0.6), f.uniform({1, hidden, 1, 1}, -0.6, 0.6),
          f.uniform({C, hidden, 1, 1}, -0.6, 0.6), f.uniform({1, C, 1, 1}, -0.6, 0.6)};
}

std::vector<Result> blocks_suite(const Options& o) {
  Factory f(o.seed ^ name_hash("blocks"));
  std::vector<Result> out;
  const int C = 4;
  auto feat = f.uniform({2, C, 4, 4});
  auto illum = f.uniform({2, 3, 4, 4}, 0.0, 1.0);
  auto illum2x = f.uniform({2, 3, 8, 8}, 0.0, 1.0);
  for (auto mode : {blocks::HeadIllumMode::replicate, blocks::HeadIllumMode::single}) {
    for (int heads : {1, 2}) {
      auto w = attention(f, C, heads, mode);
      const std::string name = "blocks.ig_msa_" + std::string(mode == blocks::HeadIllumMode::replicate ? "replicate" : "single") +
                               "_h" + std::to_string(heads);
      out.push_back(check(name, {feat, illum, w.qkv_w, w.qkv_dw, w.illum_w, w.illum_b, w.out_w, w.out_b, w.alpha},
                          [&] { return blocks::ig_msa(feat, illum, w); }, o));
    }
  }
  auto wd = attention(f, C, 2, blocks::HeadIllumMode::replicate);
  wd.illum_down = downsampler(f);
  out.push_back(check("blocks.ig_msa_illum_downsampled", {feat, illum2x, wd.illum_down->dw_w, wd.illum_down->pw_w},
                      [&] { return blocks::ig_msa(feat, illum2x, wd); }, o));
  auto fw = ffn(f, C, 6);
  out.push_back(check("blocks.dg_ffn", {feat, fw.w1, fw.b1, fw.w2, fw.b2, fw.wo, fw.bo},
                      [&] { return blocks::dg_ffn(feat, fw); }, o));
  blocks::BlockWeights<T> bw{f.uniform({1, C, 1, 1}, 0.5, 1.5), f.uniform({1, C, 1, 1}, -0.5, 0.5),
                             f.uniform({1, C, 1, 1}, 0.5, 1.5), f.uniform({1, C, 1, 1}, -0.5, 0.5),
                             attention(f, C, 2, blocks::HeadIllumMode::replicate), ffn(f, C, 6)};
  out.push_back(check("blocks.saigt_block", {feat, illum, bw.ln1_g, bw.ln1_b, bw.ln2_g, bw.ln2_b, bw.attn.qkv_w,
                                             bw.attn.alpha, bw.ffn.w1, bw.ffn.wo},
                      [&] { return blocks::saigt_block(feat, illum, bw); }, o));
  return out;
}

std::vector<Result> network_suite(const Options& o) {
  auto cfg = ModelConfig::toy();
  cfg.seed = o.seed;
  // Zero-initialized projections would hide most of the graph from the check.
  auto model = init_model<T>(cfg, false);
  Factory f(o.seed ^ name_hash("network"));
  auto img = f.uniform({1, 3, 16, 16}, 0.0, 1.0);
  std::vector<Tn> leaves{img};
  for (const auto& p : model.parameters()) leaves.push_back(p.tensor);
  Options net = o;
  net.max_samples = std::min<size_t>(o.max_samples, 3);
  return {check("network.forward_toy", leaves, [&] { return forward(model, img); }, net)};
}

std::vector<Result> train_suite(const Options& o) {
  Factory f(o.seed ^ name_hash("train"));
  std::vector<Result> out;
  auto x = f.uniform({2, 3, 12, 13}, 0.0, 1.0);
  auto y = f.uniform({2, 3, 12, 13}, 0.0, 1.0);
  out.push_back(check("train.l1_loss", {x, y}, [&] { return train::l1_loss(x, y); }, o));
  out.push_back(check("train.ssim", {x, y}, [&] { return train::ssim(x, y); }, o));
  out.push_back(check("train.ssim_loss", {x, y}, [&] { return train::ssim_loss(x, y); }, o));
  return out;
}

}  // namespace

std::vector<Result> run(const std::string& module, const Options& options) {
  if (module == "all") {
    std::vector<Result> all;
    for (const auto& m : modules()) {
      auto part = run(m, options);
      all.insert(all.end(), part.begin(), part.end());
    }
    return all;
  }
  if (module == "tensor") return tensor_suite(options);
  if (module == "sat") return sat_suite(options);
  if (module == "sai2e") return sai2e_suite(options);
  if (module == "blocks") return blocks_suite(options);
  if (module == "network") return network_suite(options);
  if (module == "train") return train_suite(options);
  std::string known;
  for (const auto& m : modules()) known += " " + m;
  throw ValueError("gradcheck: unknown module '" + module + "' (known:" + known + " all)");
}

}  // namespace saig::gradcheck
