#include "saigformer/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "saigformer/checkpoint.hpp"
#include "saigformer/detail/json.hpp"
#include "saigformer/error.hpp"
#include "saigformer/imageio.hpp"
#include "saigformer/ops.hpp"

namespace saig::train {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Losses and metrics

std::vector<double> gaussian_window(int size, double sigma) {
  if (size < 1 || !(sigma > 0)) throw ValueError("gaussian_window: size must be >= 1 and sigma > 0");
  std::vector<double> g(static_cast<size_t>(size));
  const double center = (size - 1) / 2.0;
  double total = 0;
  for (int i = 0; i < size; ++i) {
    g[i] = std::exp(-(i - center) * (i - center) / (2 * sigma * sigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

namespace {

void check_same(const char* op, const Shape& a, const Shape& b) {
  if (!(a == b)) throw ShapeError(op, "shapes " + a.str() + " and " + b.str() + " differ");
}

}  // namespace

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& x, const Tensor<T>& y) {
  check_same("l1_loss", x.shape(), y.shape());
  return ops::mean(ops::abs(ops::sub(x, y)));
}

template <typename T>
Tensor<T> ssim(const Tensor<T>& x, const Tensor<T>& y, const SsimOptions& opt) {
  check_same("ssim", x.shape(), y.shape());
  const Shape s = x.shape();
  if (s.h < opt.window || s.w < opt.window) {
    throw ShapeError("ssim", "image " + std::to_string(s.h) + "x" + std::to_string(s.w) + " is smaller than the " +
                                 std::to_string(opt.window) + "x" + std::to_string(opt.window) + " window");
  }
  const auto g = gaussian_window(opt.window, opt.sigma);
  const int groups = 5 * s.c;
  std::vector<T> horizontal, vertical;
  for (int c = 0; c < groups; ++c)
    for (double v : g) horizontal.push_back(static_cast<T>(v));
  vertical = horizontal;
  const auto wh = Tensor<T>::from({groups, 1, 1, opt.window}, std::move(horizontal));
  const auto wv = Tensor<T>::from({groups, 1, opt.window, 1}, std::move(vertical));
  const std::optional<Tensor<T>> none;

  auto stacked = ops::concat_channels(std::vector<Tensor<T>>{x, y, ops::mul(x, x), ops::mul(y, y), ops::mul(x, y)});
  auto f = ops::conv2d(ops::conv2d(stacked, wh, none, 1, 0, groups), wv, none, 1, 0, groups);
  auto mx = ops::slice_channels(f, 0, s.c);
  auto my = ops::slice_channels(f, s.c, s.c);
  auto exx = ops::slice_channels(f, 2 * s.c, s.c);
  auto eyy = ops::slice_channels(f, 3 * s.c, s.c);
  auto exy = ops::slice_channels(f, 4 * s.c, s.c);

  const T c1 = static_cast<T>((opt.k1 * opt.data_range) * (opt.k1 * opt.data_range));
  const T c2 = static_cast<T>((opt.k2 * opt.data_range) * (opt.k2 * opt.data_range));
  auto mx2 = ops::mul(mx, mx);
  auto my2 = ops::mul(my, my);
  auto mxy = ops::mul(mx, my);
  auto sxx = ops::sub(exx, mx2);
  auto syy = ops::sub(eyy, my2);
  auto sxy = ops::sub(exy, mxy);
  auto num = ops::mul(ops::add_scalar(ops::scale(mxy, T(2)), c1), ops::add_scalar(ops::scale(sxy, T(2)), c2));
  auto den = ops::mul(ops::add_scalar(ops::add(mx2, my2), c1), ops::add_scalar(ops::add(sxx, syy), c2));
  return ops::mean(ops::div(num, den));
}

template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& x, const Tensor<T>& y, const SsimOptions& opt) {
  return ops::add_scalar(ops::scale(ssim(x, y, opt), T(-1)), T(1));
}

template <typename T>
double psnr(const Tensor<T>& x, const Tensor<T>& y, double peak) {
  check_same("psnr", x.shape(), y.shape());
  const auto a = x.data();
  const auto b = y.data();
  double se = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / (se / static_cast<double>(a.size())));
}

double cosine_lr(int iter, const TrainConfig& cfg) {
  if (iter < 0 || iter > cfg.iterations) {
    throw ValueError("cosine_lr: iteration " + std::to_string(iter) + " outside [0, " + std::to_string(cfg.iterations) + "]");
  }
  if (cfg.iterations == 0) return cfg.lr_start;
  const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * iter / cfg.iterations));
  return cfg.lr_start * w + cfg.lr_end * (1.0 - w);
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
AdamState<T> adam_init(const std::vector<NamedParam<T>>& params) {
  AdamState<T> st;
  for (const auto& p : params) {
    st.names.push_back(p.name);
    st.m.emplace_back(p.tensor.numel(), T(0));
    st.v.emplace_back(p.tensor.numel(), T(0));
  }
  return st;
}

template <typename T>
void adam_step(const std::vector<NamedParam<T>>& params, AdamState<T>& st, double lr, const TrainConfig& cfg) {
  if (st.names.size() != params.size()) {
    throw ValueError("adam_step: optimizer state holds " + std::to_string(st.names.size()) + " tensors, model has " +
                     std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (st.names[i] != params[i].name || st.m[i].size() != params[i].tensor.numel()) {
      throw ValueError("adam_step: optimizer state entry '" + st.names[i] + "' does not match parameter '" +
                       params[i].name + "'");
    }
  }
  st.step += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& t = params[i].tensor;
    const T* g = t.has_grad() ? t.node()->grad.data() : nullptr;
    auto w = params[i].tensor.mutable_data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (size_t k = 0; k < w.size(); ++k) {
      const double gk = g ? static_cast<double>(g[k]) : 0.0;
      const double mk = b1 * static_cast<double>(m[k]) + (1.0 - b1) * gk;
      const double vk = b2 * static_cast<double>(v[k]) + (1.0 - b2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + cfg.adam_eps);
      w[k] = static_cast<T>(static_cast<double>(w[k]) - update);
    }
  }
}

template <typename T>
double clip_grad_norm(const std::vector<NamedParam<T>>& params, double max_norm) {
  double total = 0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.node()->grad) total += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(total);
  if (max_norm > 0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T& g : p.tensor.node()->grad) g *= factor;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Data

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto splitmix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

namespace {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int below(int n) { return static_cast<int>(engine_() % static_cast<std::uint64_t>(n)); }
  // Box-Muller, redrawn until |z| <= limit.
  double normal(double limit) {
    for (;;) {
      const double u1 = 1.0 - uniform();
      const double u2 = uniform();
      const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
      if (std::abs(z) <= limit) return z;
    }
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace

double synth_noise_sigma(std::uint64_t seed) { return Rng(mix_seed(seed, 2)).uniform(0.01, 0.05); }

PairedSample synth_pair(std::uint64_t seed, int size) {
  if (size < 8 || size % 8 != 0) throw ValueError("synth_pair: size must be a positive multiple of 8");
  Rng rng(mix_seed(seed, 1));
  const size_t plane = static_cast<size_t>(size) * size;
  std::vector<double> normal(3 * plane);

  for (int c = 0; c < 3; ++c) {
    const double base = rng.uniform(0.25, 0.75);
    const double gx = rng.uniform(-0.3, 0.3);
    const double gy = rng.uniform(-0.3, 0.3);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        normal[c * plane + static_cast<size_t>(y) * size + x] =
            base + gx * ((x + 0.5) / size - 0.5) + gy * ((y + 0.5) / size - 0.5);
      }
  }
  const int shapes = 3 + rng.below(4);
  for (int k = 0; k < shapes; ++k) {
    const bool disk = rng.uniform() < 0.5;
    double color[3];
    for (double& v : color) v = rng.uniform(0.05, 0.95);
    const double cx = rng.uniform(0, size), cy = rng.uniform(0, size);
    const double rx = rng.uniform(size / 16.0, size / 4.0), ry = rng.uniform(size / 16.0, size / 4.0);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        const bool inside = disk ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        for (int c = 0; c < 3; ++c) normal[c * plane + static_cast<size_t>(y) * size + x] = color[c];
      }
  }
  for (auto& v : normal) v = std::clamp(v, 0.0, 1.0);

  double corners[4];
  for (double& g : corners) g = rng.uniform(1.5, 3.5);
  const double scale = rng.uniform(0.1, 0.4);
  const double sigma = synth_noise_sigma(seed);
  Rng noise(mix_seed(seed, 3));

  PairedSample s;
  s.height = s.width = size;
  s.low.resize(3 * plane);
  s.normal.resize(3 * plane);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double u = (x + 0.5) / size, v = (y + 0.5) / size;
        const double gamma = (1 - u) * (1 - v) * corners[0] + u * (1 - v) * corners[1] + (1 - u) * v * corners[2] +
                             u * v * corners[3];
        const size_t i = c * plane + static_cast<size_t>(y) * size + x;
        const double dark = scale * std::pow(normal[i], gamma) + sigma * noise.normal(3.0);
        s.normal[i] = static_cast<float>(normal[i]);
        s.low[i] = static_cast<float>(std::clamp(dark, 0.0, 1.0));
      }
  s.provenance = "synthetic:seed=" + std::to_string(seed);
  return s;
}

std::vector<PairedSample> synthetic_dataset(const TrainConfig& cfg) {
  std::vector<PairedSample> out;
  for (int i = 0; i < cfg.synthetic_pairs; ++i) {
    out.push_back(synth_pair(mix_seed(cfg.seed, 0x73796e74ULL, static_cast<std::uint64_t>(i)), cfg.synthetic_size));
  }
  return out;
}

namespace {

std::vector<float> flip_h(const std::vector<float>& img, int h, int w) {
  std::vector<float> out(img.size());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out[(static_cast<size_t>(c) * h + y) * w + x] = img[(static_cast<size_t>(c) * h + y) * w + (w - 1 - x)];
  return out;
}

// Quarter turn counter-clockwise: (h, w) -> (w, h).
std::vector<float> rot90(const std::vector<float>& img, int h, int w) {
  std::vector<float> out(img.size());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < w; ++y)
      for (int x = 0; x < h; ++x)
        out[(static_cast<size_t>(c) * w + y) * h + x] = img[(static_cast<size_t>(c) * h + x) * w + (w - 1 - y)];
  return out;
}

}  // namespace

PairedSample dihedral(const PairedSample& s, int k) {
  if (k < 0 || k > 7) throw ValueError("dihedral: element must lie in 0..7");
  PairedSample out = s;
  if (k >= 4) {
    out.low = flip_h(out.low, out.height, out.width);
    out.normal = flip_h(out.normal, out.height, out.width);
  }
  for (int r = 0; r < k % 4; ++r) {
    out.low = rot90(out.low, out.height, out.width);
    out.normal = rot90(out.normal, out.height, out.width);
    std::swap(out.height, out.width);
  }
  return out;
}

PairedSample augment(const PairedSample& s, int crop, std::uint64_t seed) {
  if (crop < 1 || crop > s.height || crop > s.width) {
    throw ValueError("augment: crop " + std::to_string(crop) + " exceeds image " + std::to_string(s.height) + "x" +
                     std::to_string(s.width));
  }
  Rng rng(seed);
  const int y0 = rng.below(s.height - crop + 1);
  const int x0 = rng.below(s.width - crop + 1);
  const int k = rng.below(8);
  PairedSample c;
  c.height = c.width = crop;
  c.provenance = s.provenance;
  c.low.resize(3 * static_cast<size_t>(crop) * crop);
  c.normal.resize(c.low.size());
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < crop; ++y)
      for (int x = 0; x < crop; ++x) {
        const size_t src = (static_cast<size_t>(ch) * s.height + y0 + y) * s.width + x0 + x;
        const size_t dst = (static_cast<size_t>(ch) * crop + y) * crop + x;
        c.low[dst] = s.low[src];
        c.normal[dst] = s.normal[src];
      }
  return dihedral(c, k);
}

std::vector<PairedSample> load_paired_dir(const std::string& dir) {
  const fs::path low_dir = fs::path(dir) / "low";
  const fs::path normal_dir = fs::path(dir) / "normal";
  for (const auto& d : {low_dir, normal_dir}) {
    if (!fs::is_directory(d)) throw IoError("paired dataset: missing directory '" + d.string() + "'");
  }
  auto list = [](const fs::path& d) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(d)) {
      if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
  };
  const auto lows = list(low_dir);
  const auto normals = list(normal_dir);
  std::vector<std::string> orphans;
  for (const auto& n : lows)
    if (!std::binary_search(normals.begin(), normals.end(), n)) orphans.push_back("low/" + n);
  for (const auto& n : normals)
    if (!std::binary_search(lows.begin(), lows.end(), n)) orphans.push_back("normal/" + n);
  if (!orphans.empty()) {
    std::string list_text;
    for (const auto& o : orphans) list_text += (list_text.empty() ? "" : ", ") + o;
    throw ValueError("paired dataset '" + dir + "': files without a partner: " + list_text);
  }
  if (lows.empty()) throw ValueError("paired dataset '" + dir + "': no PNG pairs found");

  std::vector<PairedSample> out;
  for (const auto& n : lows) {
    const auto a = image::load_png((low_dir / n).string());
    const auto b = image::load_png((normal_dir / n).string());
    if (a.width != b.width || a.height != b.height) {
      throw ValueError("paired dataset: '" + n + "' differs in size between low/ and normal/");
    }
    PairedSample s;
    s.height = a.height;
    s.width = a.width;
    const auto ta = image::to_tensor<float>(a).data();
    const auto tb = image::to_tensor<float>(b).data();
    s.low.assign(ta.begin(), ta.end());
    s.normal.assign(tb.begin(), tb.end());
    s.provenance = (low_dir / n).string() + "|" + (normal_dir / n).string();
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> stack(const std::vector<PairedSample>& batch, bool low) {
  if (batch.empty()) throw ValueError("stack: empty batch");
  const int h = batch[0].height, w = batch[0].width;
  std::vector<T> values;
  values.reserve(batch.size() * 3 * static_cast<size_t>(h) * w);
  for (const auto& s : batch) {
    if (s.height != h || s.width != w) throw ShapeError("stack", "batch samples differ in size");
    const auto& src = low ? s.low : s.normal;
    for (float v : src) values.push_back(static_cast<T>(v));
  }
  return Tensor<T>::from({static_cast<int>(batch.size()), 3, h, w}, std::move(values));
}

}  // namespace

template <typename T>
Tensor<T> stack_low(const std::vector<PairedSample>& batch) {
  return stack<T>(batch, true);
}

template <typename T>
Tensor<T> stack_normal(const std::vector<PairedSample>& batch) {
  return stack<T>(batch, false);
}

// ---------------------------------------------------------------------------
// Training loop

std::vector<PairedSample> training_batch(const std::vector<PairedSample>& data, const TrainConfig& cfg, int iter) {
  if (data.empty()) throw ValueError("training: empty dataset");
  const auto n = static_cast<std::uint64_t>(data.size());
  std::vector<PairedSample> batch;
  std::uint64_t cached_epoch = ~0ULL;
  std::vector<size_t> perm(data.size());
  for (int b = 0; b < cfg.batch_size; ++b) {
    const std::uint64_t pos = static_cast<std::uint64_t>(iter) * cfg.batch_size + b;
    const std::uint64_t epoch = pos / n;
    if (epoch != cached_epoch) {
      for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
      Rng rng(mix_seed(cfg.seed, 0x65706f6368ULL, epoch));
      for (size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[static_cast<size_t>(rng.below(static_cast<int>(i)))]);
      cached_epoch = epoch;
    }
    const auto& sample = data[perm[pos % n]];
    batch.push_back(augment(sample, cfg.crop, mix_seed(cfg.seed, 0x617567ULL, pos)));
  }
  return batch;
}

template <typename T>
double evaluate_psnr(const ModelWeights<T>& model, const std::vector<PairedSample>& data) {
  double total = 0;
  for (const auto& s : data) {
    const std::vector<PairedSample> one{s};
    const auto out = forward(model, stack_low<T>(one));
    total += psnr(out, stack_normal<T>(one));
  }
  return total / static_cast<double>(data.size());
}

template <typename T>
void save_training_state(const std::string& path, const ModelWeights<T>& model, const AdamState<T>& adam,
                         int next_iter, const TrainConfig& cfg) {
  ckpt::Document doc;
  doc.dtype = ckpt::Dtype::f64;
  doc.config = model.config;
  doc.meta_json = json{{"kind", "training_state"},
                       {"next_iter", next_iter},
                       {"adam_step", adam.step},
                       {"train", detail::to_json(cfg)}}
                      .dump();
  doc.blobs = weights_to_blobs(model, "model.");
  const auto params = model.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    const Shape s = params[i].tensor.shape();
    doc.blobs.push_back({"adam.m." + adam.names[i], s, std::vector<double>(adam.m[i].begin(), adam.m[i].end())});
    doc.blobs.push_back({"adam.v." + adam.names[i], s, std::vector<double>(adam.v[i].begin(), adam.v[i].end())});
  }
  ckpt::write_file(path, ckpt::encode(doc));
}

template <typename T>
TrainingState<T> load_training_state(const std::string& path) {
  const auto doc = ckpt::decode(ckpt::read_file(path));
  json meta = json::parse(doc.meta_json);
  if (!meta.is_object() || meta.value("kind", "") != "training_state") {
    throw FormatError("'" + path + "' is not a training-state snapshot");
  }
  TrainingState<T> st{weights_from_document<T>(doc, "model."), {}, 0, {}};
  try {
    st.next_iter = meta.at("next_iter").get<int>();
    st.adam = adam_init(st.model.parameters());
    st.adam.step = meta.at("adam_step").get<std::int64_t>();
    st.train = detail::train_config_from_json(meta.at("train"));
  } catch (const json::exception& e) {
    throw FormatError("'" + path + "': malformed training-state metadata: " + e.what());
  }
  std::map<std::string, const ckpt::Blob*> by_name;
  for (const auto& b : doc.blobs) by_name[b.name] = &b;
  for (size_t i = 0; i < st.adam.names.size(); ++i) {
    for (auto [prefix, target] : {std::pair{"adam.m.", &st.adam.m[i]}, std::pair{"adam.v.", &st.adam.v[i]}}) {
      auto it = by_name.find(prefix + st.adam.names[i]);
      if (it == by_name.end() || it->second->values.size() != target->size()) {
        throw FormatError("'" + path + "': missing or malformed optimizer tensor '" + prefix + st.adam.names[i] + "'");
      }
      for (size_t k = 0; k < target->size(); ++k) (*target)[k] = static_cast<T>(it->second->values[k]);
    }
  }
  return st;
}

namespace {

std::string fmt_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path, const std::string& header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != header) throw FormatError("'" + path + "': unexpected CSV header");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw FormatError("CSV: malformed number '" + s + "'");
  return v;
}

constexpr const char* kMetricsHeader = "iter,lr,loss,l1,ssim_loss,psnr_train";
constexpr const char* kOffsetsHeader = "iter,mean_w,std_w,mean_h,std_h";

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << kMetricsHeader << "\n";
  for (const auto& r : rows) {
    out << r.iter << ',' << fmt_double(r.lr) << ',' << fmt_double(r.loss) << ',' << fmt_double(r.l1) << ','
        << fmt_double(r.ssim_loss) << ',' << fmt_double(r.psnr_train) << "\n";
  }
}

std::vector<MetricRow> read_metrics_csv(const std::string& path) {
  std::vector<MetricRow> rows;
  for (const auto& c : read_csv(path, kMetricsHeader)) {
    if (c.size() != 6) throw FormatError("'" + path + "': expected 6 columns");
    rows.push_back({std::stoi(c[0]), parse_double(c[1]), parse_double(c[2]), parse_double(c[3]), parse_double(c[4]),
                    parse_double(c[5])});
  }
  return rows;
}

void write_offsets_csv(const std::string& path, const std::vector<OffsetRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << kOffsetsHeader << "\n";
  for (const auto& r : rows) {
    out << r.iter << ',' << fmt_double(r.stats.mean_w) << ',' << fmt_double(r.stats.std_w) << ','
        << fmt_double(r.stats.mean_h) << ',' << fmt_double(r.stats.std_h) << "\n";
  }
}

std::vector<OffsetRow> read_offsets_csv(const std::string& path) {
  std::vector<OffsetRow> rows;
  for (const auto& c : read_csv(path, kOffsetsHeader)) {
    if (c.size() != 5) throw FormatError("'" + path + "': expected 5 columns");
    rows.push_back({std::stoi(c[0]), {parse_double(c[1]), parse_double(c[2]), parse_double(c[3]), parse_double(c[4])}});
  }
  return rows;
}

namespace {

template <typename Row>
std::vector<Row> rows_before(std::vector<Row> rows, int iter) {
  rows.erase(std::remove_if(rows.begin(), rows.end(), [iter](const Row& r) { return r.iter >= iter; }), rows.end());
  return rows;
}

void dump_batch(const fs::path& dir, const std::vector<PairedSample>& batch, int iter, const MetricRow& row) {
  fs::create_directories(dir);
  json info{{"iter", iter}, {"loss", fmt_double(row.loss)}, {"l1", fmt_double(row.l1)},
            {"ssim_loss", fmt_double(row.ssim_loss)}, {"samples", json::array()}};
  for (size_t b = 0; b < batch.size(); ++b) {
    const std::vector<PairedSample> one{batch[b]};
    image::save_png(image::from_tensor(stack_low<float>(one)), (dir / ("low_" + std::to_string(b) + ".png")).string());
    image::save_png(image::from_tensor(stack_normal<float>(one)), (dir / ("normal_" + std::to_string(b) + ".png")).string());
    info["samples"].push_back(batch[b].provenance);
  }
  std::ofstream(dir / "batch.json") << info.dump(2) << "\n";
}

}  // namespace

template <typename T>
FitResult fit(ModelWeights<T>& model, const std::vector<PairedSample>& data, const TrainConfig& cfg,
              const FitOptions& options) {
  cfg.validate();
  if (data.empty()) throw ValueError("fit: empty dataset");
  const auto params = model.parameters();
  model.set_requires_grad(true);
  AdamState<T> adam = adam_init(params);
  int start = 0;
  if (!options.resume_from.empty()) {
    auto st = load_training_state<T>(options.resume_from);
    const auto diff = differing_fields(model.config, st.model.config);
    if (!diff.empty()) throw ConfigError("resume: snapshot was taken with a different model configuration: ", diff);
    const auto src = st.model.parameters();
    for (size_t i = 0; i < params.size(); ++i) {
      const auto d = src[i].tensor.data();
      std::copy(d.begin(), d.end(), params[i].tensor.mutable_data().begin());
    }
    adam = std::move(st.adam);
    start = st.next_iter;
  }

  const bool files = !options.out_dir.empty();
  const fs::path out_dir = options.out_dir;
  FitResult result;
  if (files) {
    fs::create_directories(out_dir);
    if (start > 0 && fs::exists(out_dir / "metrics.csv")) {
      result.metrics = rows_before(read_metrics_csv((out_dir / "metrics.csv").string()), start);
    }
    if (start > 0 && fs::exists(out_dir / "offsets.csv")) {
      result.offsets = rows_before(read_offsets_csv((out_dir / "offsets.csv").string()), start);
    }
  }
  auto snapshot = [&](int iter) {
    if (!files) return;
    char tag[32];
    std::snprintf(tag, sizeof(tag), "%06d", iter);
    save_checkpoint(model, (out_dir / (std::string("snapshot_") + tag + ".ckpt")).string(),
                    json{{"iter", iter}}.dump());
    save_training_state((out_dir / (std::string("state_") + tag + ".state")).string(), model, adam, iter, cfg);
    write_metrics_csv((out_dir / "metrics.csv").string(), result.metrics);
    write_offsets_csv((out_dir / "offsets.csv").string(), result.offsets);
  };

  const int end = options.stop_at >= 0 ? std::min(options.stop_at, cfg.iterations) : cfg.iterations;
  for (int t = start; t < end; ++t) {
    if (t % cfg.snapshot_interval == 0 && t != start) snapshot(t);
    if (t == 0) snapshot(0);
    const double lr = cosine_lr(t, cfg);
    const auto batch = training_batch(data, cfg, t);
    const auto low = stack_low<T>(batch);
    const auto normal = stack_normal<T>(batch);
    ForwardTrace<T> trace;
    const auto out = forward(model, low, &trace);
    const auto l1 = l1_loss(out, normal);
    const auto sl = ssim_loss(out, normal);
    const auto loss = ops::add(ops::scale(l1, static_cast<T>(cfg.lambda_l1)), ops::scale(sl, static_cast<T>(cfg.lambda_ssim)));
    MetricRow row{t, lr, static_cast<double>(loss.item()), static_cast<double>(l1.item()),
                  static_cast<double>(sl.item()), psnr(out, normal)};
    if (!std::isfinite(row.loss)) {
      std::string where = "(enable an output directory to dump it)";
      if (files) {
        const fs::path dump = out_dir / ("nan_batch_" + std::to_string(t));
        dump_batch(dump, batch, t, row);
        where = "dumped to '" + dump.string() + "'";
      }
      throw InvariantError("non-finite loss at iteration " + std::to_string(t) + "; offending batch " + where);
    }
    if (t % cfg.snapshot_interval == 0 && trace.estimate.offsets.defined()) {
      result.offsets.push_back({t, sai2e::offset_stats(trace.estimate.offsets, low.shape().h, low.shape().w)});
    }
    model.zero_grad();
    backward(loss);
    if (cfg.grad_clip > 0) clip_grad_norm(params, cfg.grad_clip);
    adam_step(params, adam, lr, cfg);
    result.metrics.push_back(row);
    if (options.on_iteration) options.on_iteration(row);
  }
  result.next_iter = std::max(start, end);
  if (files && result.next_iter != start) {
    snapshot(result.next_iter);
    if (result.next_iter == cfg.iterations) save_checkpoint(model, (out_dir / "final.ckpt").string());
  }
  model.zero_grad();
  return result;
}

#define SAIG_INSTANTIATE_TRAIN(T)                                                                                 \
  template Tensor<T> l1_loss(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> ssim(const Tensor<T>&, const Tensor<T>&, const SsimOptions&);                               \
  template Tensor<T> ssim_loss(const Tensor<T>&, const Tensor<T>&, const SsimOptions&);                          \
  template double psnr(const Tensor<T>&, const Tensor<T>&, double);                                              \
  template AdamState<T> adam_init(const std::vector<NamedParam<T>>&);                                            \
  template void adam_step(const std::vector<NamedParam<T>>&, AdamState<T>&, double, const TrainConfig&);         \
  template double clip_grad_norm(const std::vector<NamedParam<T>>&, double);                                     \
  template Tensor<T> stack_low<T>(const std::vector<PairedSample>&);                                             \
  template Tensor<T> stack_normal<T>(const std::vector<PairedSample>&);                                          \
  template FitResult fit(ModelWeights<T>&, const std::vector<PairedSample>&, const TrainConfig&, const FitOptions&); \
  template double evaluate_psnr(const ModelWeights<T>&, const std::vector<PairedSample>&);                       \
  template void save_training_state(const std::string&, const ModelWeights<T>&, const AdamState<T>&, int,        \
                                    const TrainConfig&);                                                          \
  template TrainingState<T> load_training_state<T>(const std::string&);

SAIG_INSTANTIATE_TRAIN(float)
SAIG_INSTANTIATE_TRAIN(double)

}  // namespace saig::train
