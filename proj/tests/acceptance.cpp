// Acceptance run: one PASS/FAIL line per criterion. Optional arguments select
// criteria by number, e.g. `acceptance 1 2 9`.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <malloc.h>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "saigformer/checkpoint.hpp"
#include "saigformer/imageio.hpp"
#include "saigformer/network.hpp"
#include "saigformer/sat.hpp"
#include "saigformer/train.hpp"
#include "support.hpp"

using namespace saig;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;

  void fail(const std::string& why) {
    if (pass) detail.clear();
    pass = false;
    detail += (detail.empty() ? "" : "; ") + why;
  }
};

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

int cli_run(std::vector<std::string> args, std::string* out = nullptr) {
  std::ostringstream o, e;
  args.insert(args.begin(), "saigformer");
  const int code = cli::run(args, o, e);
  if (out) *out = o.str() + e.str();
  return code;
}

std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
  return f;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream f(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) rows.push_back(csv_fields(line));
  return rows;
}

// 1 -------------------------------------------------------------------------
Outcome sat_oracle() {
  Outcome r;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  long boxes = 0;
  for (int img = 0; img < 100; ++img) {
    const int H = 1 + rng() % 32, W = 1 + rng() % 32;
    std::vector<int> bytes(static_cast<size_t>(H) * W);
    for (auto& b : bytes) b = static_cast<int>(rng() % 256);
    const std::vector<double> values(bytes.begin(), bytes.end());
    const auto t = sat::SummedAreaTable::build<double>(values, H, W);
    for (int i = 0; i < 200; ++i, ++boxes) {
      int x0 = rng() % (W + 1), x1 = rng() % (W + 1), y0 = rng() % (H + 1), y1 = rng() % (H + 1);
      if (x0 > x1) std::swap(x0, x1);
      if (y0 > y1) std::swap(y0, y1);
      const double got = sat::box_sum(t, {double(x0), double(y0), double(x1), double(y1)});
      const auto want = testing::oracle::box_sum(bytes, W, y0, x0, y1, x1);
      if (got != static_cast<double>(want)) {
        r.fail(fmt("image %d box %d differs", img, i));
        return r;
      }
    }
  }
  const double s = seconds_since(t0);
  r.detail = std::to_string(boxes) + " boxes exact, " + fmt("%.2f s", s);
  if (s >= 10) r.fail(fmt("runtime %.1f s", s));
  return r;
}

// 2 -------------------------------------------------------------------------
Outcome fractional_boxes() {
  Outcome r;
  std::mt19937_64 rng(202);
  double worst_lattice = 0, worst_real = 0;
  int integer_mismatch = 0, n = 0;
  for (int img = 0; img < 10; ++img) {
    const int H = 8 + rng() % 25, W = 8 + rng() % 25;
    std::vector<double> v(static_cast<size_t>(H) * W);
    for (auto& x : v) x = testing::unit(rng);
    const auto t = sat::SummedAreaTable::build<double>(v, H, W);
    for (int i = 0; i < 50; ++i, ++n) {
      auto lattice = [&](int m) { return static_cast<double>(rng() % (16 * m + 1)) / 16.0; };
      double x0 = lattice(W), x1 = lattice(W), y0 = lattice(H), y1 = lattice(H);
      if (x0 > x1) std::swap(x0, x1);
      if (y0 > y1) std::swap(y0, y1);
      if (x1 - x0 < 1.0 / 16 || y1 - y0 < 1.0 / 16) continue;
      const double ref = testing::oracle::supersampled_box(v, H, W, x0, y0, x1, y1);
      worst_lattice = std::max(worst_lattice, std::abs(sat::box_sum_fractional(t, {x0, y0, x1, y1}) - ref) / ref);

      double a = testing::unit(rng) * W, b = testing::unit(rng) * W, c = testing::unit(rng) * H, d = testing::unit(rng) * H;
      if (a > b) std::swap(a, b);
      if (c > d) std::swap(c, d);
      const double exact = testing::oracle::exact_box(v, H, W, a, c, b, d);
      if (exact > 1e-9) worst_real = std::max(worst_real, std::abs(sat::box_sum_fractional(t, {a, c, b, d}) - exact) / exact);

      int ix0 = rng() % (W + 1), ix1 = rng() % (W + 1), iy0 = rng() % (H + 1), iy1 = rng() % (H + 1);
      if (ix0 > ix1) std::swap(ix0, ix1);
      if (iy0 > iy1) std::swap(iy0, iy1);
      const sat::BoxQuery q{double(ix0), double(iy0), double(ix1), double(iy1)};
      integer_mismatch += sat::box_sum_fractional(t, q) != sat::box_sum(t, q);
    }
  }
  r.detail = std::to_string(n) + " boxes, max rel err " + fmt("%.2e vs 16x supersampling, %.2e vs exact coverage", worst_lattice, worst_real) +
             ", integer corners identical";
  if (n < 500) r.fail("too few boxes");
  if (worst_lattice >= 1e-3) r.fail(fmt("supersampling rel err %.2e", worst_lattice));
  if (worst_real >= 1e-3) r.fail(fmt("exact coverage rel err %.2e", worst_real));
  if (integer_mismatch) r.fail(std::to_string(integer_mismatch) + " integer-corner mismatches");
  return r;
}

// 3 -------------------------------------------------------------------------
Outcome avgpool_reduction() {
  Outcome r;
  auto cfg = ModelConfig::toy();
  cfg.illumination = sai2e::Variant::avgpool2x2;
  const auto model = init_model<double>(cfg, false);
  int mismatches = 0;
  size_t checked = 0;
  for (double divisor : {1.0, 256.0}) {
    std::mt19937_64 rng(303);
    const int N = 2, H = 16, W = 24;
    std::vector<double> v(static_cast<size_t>(N) * 3 * H * W);
    for (auto& x : v) x = static_cast<double>(rng() % 256) / divisor;
    const auto img = Tensor<double>::from({N, 3, H, W}, v);
    ForwardTrace<double> trace;
    forward(model, img, &trace);
    const auto il = trace.estimate.illumination.data();
    for (int p = 0; p < N * 3; ++p)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x, ++checked) {
          auto at = [&](int yy, int xx) { return v[(static_cast<size_t>(p) * H + yy) * W + xx]; };
          const int y0 = y / 2 * 2, x0 = x / 2 * 2;
          const double pool = (at(y0, x0) + at(y0, x0 + 1) + at(y0 + 1, x0) + at(y0 + 1, x0 + 1)) / 4.0;
          mismatches += il[(static_cast<size_t>(p) * H + y) * W + x] != pool;
        }
  }
  r.detail = std::to_string(checked) + " pixels of integer and /256 images equal 2x2 pooling bit for bit";
  if (mismatches) r.fail(std::to_string(mismatches) + " pixels differ");
  return r;
}

// 4 -------------------------------------------------------------------------
Outcome gradient_suite() {
  Outcome r;
  const auto t0 = Clock::now();
  std::string out;
  const int code = cli_run({"gradcheck", "--module", "all"}, &out);
  const double s = seconds_since(t0);
  int checks = 0;
  for (char c : out) checks += c == '\n';
  r.detail = std::to_string(checks) + " checks, exit " + std::to_string(code) + fmt(", %.0f s", s);
  if (code != 0) r.fail("gradcheck all exited " + std::to_string(code) + ": " + out.substr(out.rfind('\n', out.size() - 2) + 1));
  if (s >= 300) r.fail(fmt("runtime %.0f s", s));
  return r;
}

// 5 -------------------------------------------------------------------------
Outcome identity_at_init() {
  Outcome r;
  int cases = 0;
  for (const auto& cfg : {ModelConfig::toy(), ModelConfig{}}) {
    const auto mf = init_model<float>(cfg);
    const auto md = init_model<double>(cfg);
    for (Shape s : {Shape{1, 3, 16, 16}, Shape{2, 3, 32, 24}}) {
      const auto xf = testing::random_tensor<float>(s, s.h + s.w, 0, 1);
      const auto xd = testing::random_tensor<double>(s, s.h + s.w, 0, 1);
      const auto yf = forward(mf, xf);
      const auto yd = forward(md, xd);
      cases += 2;
      for (size_t i = 0; i < xf.numel(); ++i)
        if (yf.data()[i] != xf.data()[i] || yd.data()[i] != xd.data()[i]) {
          r.fail("output differs from input at base " + std::to_string(cfg.base_channels));
          return r;
        }
    }
  }
  r.detail = std::to_string(cases) + " forward passes (toy and default, f32 and f64) return the input exactly";
  return r;
}

// 6 -------------------------------------------------------------------------
Outcome attention_invariants() {
  Outcome r;
  double worst = 0;
  size_t columns = 0;
  for (const auto& cfg : {ModelConfig::toy(), ModelConfig{}}) {
    const auto model = init_model<double>(cfg, false);
    ForwardTrace<double> trace;
    trace.capture_attention = true;
    forward(model, testing::random_tensor<double>({1, 3, 16, 16}, 61, 0, 1), &trace);
    for (const auto& a : trace.attention) {
      const Shape s = a.shape();
      for (int p = 0; p < s.n * s.c; ++p)
        for (int j = 0; j < s.w; ++j, ++columns) {
          double sum = 0;
          for (int i = 0; i < s.h; ++i) sum += a.data()[(static_cast<size_t>(p) * s.h + i) * s.w + j];
          worst = std::max(worst, std::abs(sum - 1));
        }
    }
  }
  if (worst >= 1e-6) r.fail(fmt("column sum off by %.2e", worst));

  // Zeroed output projections in every block of a trained-looking model.
  int blocks = 0, broken = 0;
  const auto model = init_model<double>(ModelConfig{}, false);
  for (int s = 0; s < kNumStages; ++s)
    for (auto w : model.stages[s]) {
      for (auto* t : {&w.attn.out_w, &w.attn.out_b, &w.ffn.wo, &w.ffn.bo}) *t = Tensor<double>::zeros(t->shape());
      const int C = stage_width(model.config, s);
      const auto F = testing::random_tensor<double>({1, C, 8, 8}, 62 + blocks, -2, 2);
      const auto I = testing::random_tensor<double>({1, 3, 8, 8}, 63 + blocks, 0, 1);
      broken += testing::max_abs_diff(blocks::saigt_block(F, I, w).data(), F.data()) != 0.0;
      ++blocks;
    }
  r.detail += std::to_string(columns) + " columns, max |sum - 1| " + fmt("%.1e", worst) + "; " + std::to_string(blocks) +
              " zero-projection blocks are exact identities";
  if (broken) r.fail(std::to_string(broken) + " blocks are not identities");
  return r;
}

// 7 -------------------------------------------------------------------------
Outcome parameter_count() {
  Outcome r;
  std::string out;
  if (cli_run({"stats", "--search"}, &out) != 0) {
    r.fail("stats --search failed");
    return r;
  }
  const auto closest = out.find("closest,");
  if (closest == std::string::npos) {
    r.fail("no closest line");
    return r;
  }
  // closest,<ffn_expansion>,<head mode>,<params>,<relative gap>,<within_10pct>
  const auto f = csv_fields(out.substr(closest, out.find('\n', closest) - closest));
  r.detail = "gamma " + f.at(1) + " " + f.at(2) + ": " + f.at(3) + " params, gap " + f.at(4);
  auto cfg = ModelConfig{};
  cfg.ffn_expansion = std::stod(f.at(1));
  cfg.head_illum_mode = f.at(2) == "single" ? blocks::HeadIllumMode::single : blocks::HeadIllumMode::replicate;
  const double count = static_cast<double>(param_count(cfg));
  if (std::to_string(param_count(cfg)) != f.at(3)) r.fail("reported count does not match param_count");
  if (std::abs(count / 12.35e6 - 1) > 0.10) r.fail("outside +-10% of 12.35 M");
  return r;
}

// 8 -------------------------------------------------------------------------
Outcome desk_overfit() {
  Outcome r;
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
  const auto cfg = ModelConfig::toy();
  const auto tc = TrainConfig::desk();
  const auto data = train::synthetic_dataset(tc);
  auto model = init_model<float>(cfg);
  const auto t0 = Clock::now();
  const auto res = train::fit(model, data, tc);
  const double s = seconds_since(t0);
  const double eval = train::evaluate_psnr(model, data);
  double best = 0;
  for (const auto& m : res.metrics) best = std::max(best, m.psnr_train);
  bool decreasing = res.metrics.size() >= 10;
  for (size_t i = 1; i < 10 && i < res.metrics.size(); ++i) decreasing &= res.metrics[i].loss < res.metrics[i - 1].loss;
  r.detail = fmt("%d iterations in %.0f s; PSNR on the 8 training pairs %.2f dB", tc.iterations, s, eval) +
             fmt(", best batch %.2f dB, last batch %.2f dB", best, res.metrics.back().psnr_train);
  if (!decreasing) r.fail("loss not strictly decreasing over the first 10 iterations");
  if (eval <= 30) r.fail(fmt("training PSNR %.2f dB <= 30", eval));
  if (s >= 1800) r.fail(fmt("runtime %.0f s", s));
  return r;
}

// 9 -------------------------------------------------------------------------
Outcome schedule_endpoints() {
  Outcome r;
  const auto tc = TrainConfig::paper();
  const double a = train::cosine_lr(0, tc), b = train::cosine_lr(tc.iterations, tc);
  r.detail = fmt("lr(0) = %.17g, lr(T) = %.17g", a, b);
  if (a != 2e-4) r.fail("lr(0) != 2e-4");
  if (b != 1e-6) r.fail("lr(T) != 1e-6");
  return r;
}

// 10 ------------------------------------------------------------------------
Outcome ssim_psnr() {
  Outcome r;
  const auto x = testing::random_tensor<double>({2, 3, 24, 24}, 100, 0, 1);
  const double s_xx = train::ssim(x, x).item(), l_xx = train::ssim_loss(x, x).item();
  const double p = train::psnr(Tensor<double>::zeros({1, 3, 8, 8}), Tensor<double>::full({1, 3, 8, 8}, 0.1));
  auto y = ops::add(ops::scale(x, 0.7), testing::random_tensor<double>({2, 3, 24, 24}, 101, 0, 0.3));
  const double got = train::ssim(x, y).item();
  const double ref = testing::oracle::ssim(testing::to_vec(x), testing::to_vec(y), 2, 3, 24, 24);
  r.detail = fmt("ssim(x,x) = %.15f, psnr = %.12f dB, |ssim - literal| = %.1e", s_xx, p, std::abs(got - ref));
  if (std::abs(s_xx - 1) > 1e-12 || std::abs(l_xx) > 1e-12) r.fail("ssim(x,x) != 1");
  if (std::abs(p - 20) > 1e-9) r.fail("psnr of MSE 0.01 != 20 dB");
  if (std::abs(got - ref) >= 1e-4) r.fail("ssim differs from the literal oracle");
  return r;
}

// 11 ------------------------------------------------------------------------
Outcome persistence() {
  Outcome r;
  testing::TempDir dir("accept_persist");
  auto slurp = [](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  const auto model = init_model<float>(ModelConfig::toy(), false);
  save_checkpoint(model, dir / "a.ckpt");
  save_checkpoint(load_checkpoint<float>(dir / "a.ckpt"), dir / "b.ckpt");
  if (slurp(dir / "a.ckpt") != slurp(dir / "b.ckpt")) r.fail("checkpoint round-trip is not byte-identical");

  auto mcfg = ModelConfig::toy();
  mcfg.precision = Precision::f64;
  auto tc = TrainConfig::desk();
  tc.iterations = 6;
  tc.batch_size = 2;
  tc.crop = 32;
  tc.snapshot_interval = 3;
  const auto data = train::synthetic_dataset(tc);
  auto straight = init_model<double>(mcfg);
  train::fit(straight, data, tc, {dir / "straight"});
  auto first = init_model<double>(mcfg);
  train::FitOptions a{dir / "resumed"};
  a.stop_at = 3;
  train::fit(first, data, tc, a);
  auto second = init_model<double>(mcfg);
  train::FitOptions b{dir / "resumed"};
  b.resume_from = dir / "resumed/state_000003.state";
  train::fit(second, data, tc, b);
  const auto m1 = slurp(dir / "straight/metrics.csv"), m2 = slurp(dir / "resumed/metrics.csv");
  if (m1.empty() || m1 != m2) r.fail("resumed metric log differs");
  if (slurp(dir / "straight/final.ckpt") != slurp(dir / "resumed/final.ckpt")) r.fail("resumed weights differ");
  if (r.pass) r.detail = "checkpoint bytes identical; 6-iteration f64 run resumed at 3 matches metrics.csv and final.ckpt byte for byte";
  return r;
}

// 12 ------------------------------------------------------------------------
Outcome diagnostics() {
  Outcome r;
  testing::TempDir dir("accept_inspect");
  save_checkpoint(init_model<float>(ModelConfig::toy(), false), dir / "m.ckpt");
  const auto pair = train::synth_pair(12, 40);
  const auto img = image::from_tensor(train::stack_low<double>({pair}));
  const int h = 37, w = 35;
  image::RgbImage cropped{w, h, {}};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) cropped.pixels.push_back(img.at(y, x, c));
  image::save_png(cropped, dir / "in.png");
  std::string out;
  if (cli_run({"inspect", "--input", dir / "in.png", "--checkpoint", dir / "m.ckpt", "--out", dir / "o"}, &out) != 0) {
    r.fail("inspect failed: " + out);
    return r;
  }

  const auto model = cast_model<double>(load_checkpoint<float>(dir / "m.ckpt"));
  const auto padded = image::pad_reflect(image::to_tensor<double>(cropped), 8);
  ForwardTrace<double> trace;
  forward(model, padded.tensor, &trace);
  const auto& off = trace.estimate.offsets;
  const int H = padded.tensor.shape().h, W = padded.tensor.shape().w;
  const auto field = sai2e::corner_field(off, H, W);

  const auto rows = read_csv(dir / "o/area.csv");
  int area_mismatch = rows.size() != static_cast<size_t>(h) * w;
  std::vector<double> area;
  double lo = 1e300, hi = -1e300;
  for (const auto& row : rows) {
    const int y = std::stoi(row.at(0)), x = std::stoi(row.at(1));
    const double v = std::stod(row.at(2));
    area_mismatch += v != field.at(0, y, x).area;
    area.push_back(v);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  int pw = 0, ph = 0;
  const auto heat = image::load_gray_png(dir / "o/area.png", &pw, &ph);
  int heat_mismatch = pw != w || ph != h;
  for (size_t i = 0; i < heat.size() && i < area.size(); ++i) {
    const double t = hi > lo ? (area[i] - lo) / (hi - lo) : 0.5;
    heat_mismatch += heat[i] != static_cast<std::uint8_t>(std::lround(t * 255));
  }

  // Offset statistics recomputed from the raw offset map.
  const size_t L = static_cast<size_t>(H) * W;
  const auto o = off.data();
  double sw = 0, sh = 0;
  for (size_t p = 0; p < L; ++p) {
    sw += (o[L + p] + o[3 * L + p]) * W / 2.0;
    sh += (o[p] + o[2 * L + p]) * H / 2.0;
  }
  const double mw = sw / L, mh = sh / L;
  double vw = 0, vh = 0;
  for (size_t p = 0; p < L; ++p) {
    const double dw = (o[L + p] + o[3 * L + p]) * W / 2.0 - mw, dh = (o[p] + o[2 * L + p]) * H / 2.0 - mh;
    vw += dw * dw;
    vh += dh * dh;
  }
  const double expect[4] = {mw, std::sqrt(vw / L), mh, std::sqrt(vh / L)};
  const auto stats = read_csv(dir / "o/offsets.csv");
  int stats_mismatch = stats.size() != 1;
  for (int k = 0; k < 4 && !stats.empty(); ++k) stats_mismatch += std::stod(stats[0].at(k + 1)) != expect[k];

  r.detail = std::to_string(rows.size()) + " area values match corner_field, heatmap spans " + fmt("%.1f..%.1f px^2", lo, hi) +
             fmt(", mean window %.2f x %.2f px", mw, mh);
  if (area_mismatch) r.fail(std::to_string(area_mismatch) + " area values differ from corner_field");
  if (heat_mismatch) r.fail(std::to_string(heat_mismatch) + " heatmap pixels differ");
  if (stats_mismatch) r.fail("offset statistics differ from recomputation");
  if (hi <= lo) r.fail("flat area map");
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"SAT oracle equivalence", sat_oracle},
      {"fractional-box fidelity", fractional_boxes},
      {"avgpool 2x2 reduction", avgpool_reduction},
      {"gradient suite", gradient_suite},
      {"identity at init", identity_at_init},
      {"attention invariants", attention_invariants},
      {"parameter-count reproduction", parameter_count},
      {"desk overfit", desk_overfit},
      {"schedule endpoints", schedule_endpoints},
      {"SSIM/PSNR sanity", ssim_psnr},
      {"persistence", persistence},
      {"diagnostics", diagnostics},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.fail(std::string("exception: ") + e.what());
    }
    failed += !o.pass;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
