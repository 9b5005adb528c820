#include "cli.hpp"

#include <malloc.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "saigformer/checkpoint.hpp"
#include "saigformer/config.hpp"
#include "saigformer/error.hpp"
#include "saigformer/gradcheck.hpp"
#include "saigformer/imageio.hpp"
#include "saigformer/network.hpp"
#include "saigformer/sai2e.hpp"
#include "saigformer/train.hpp"

namespace saig::cli {

namespace fs = std::filesystem;

namespace {

constexpr double kPaperParams = 12.35e6;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

ModelConfig checkpoint_config(const std::string& path) {
  return ckpt::decode_info(ckpt::read_file(path)).config;
}

// ---------------------------------------------------------------------------
// enhance

struct EnhanceArgs {
  std::string input, checkpoint, output, config;
};

template <typename T>
void enhance_one(const ModelWeights<T>& model, const std::string& in, const std::string& out_path, std::ostream& out) {
  const auto img = image::load_png(in);
  const auto t0 = std::chrono::steady_clock::now();
  const auto padded = image::pad_reflect(image::to_tensor<T>(img), 8);
  const auto enhanced = image::crop_back(forward(model, padded.tensor), padded.height, padded.width);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  image::save_png(image::from_tensor(enhanced), out_path);
  out << in << " -> " << out_path << " (" << img.width << "x" << img.height << ") " << fmt("%.1f", ms) << " ms\n";
}

template <typename T>
int enhance_with(const EnhanceArgs& a, const ModelConfig* expected, std::ostream& out) {
  const auto model = load_checkpoint<T>(a.checkpoint, expected);
  if (fs::is_directory(a.input)) {
    fs::create_directories(a.output);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.input))
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ValueError("enhance: no .png files in '" + a.input + "'");
    for (const auto& f : files) enhance_one(model, f.string(), (fs::path(a.output) / f.filename()).string(), out);
  } else {
    if (!fs::exists(a.input)) throw IoError("enhance: input '" + a.input + "' does not exist");
    enhance_one(model, a.input, a.output, out);
  }
  return kOk;
}

int cmd_enhance(const EnhanceArgs& a, std::ostream& out) {
  std::optional<ModelConfig> expected;
  if (!a.config.empty()) expected = load_config_file(a.config).model;
  const auto cfg = checkpoint_config(a.checkpoint);
  const ModelConfig* exp = expected ? &*expected : nullptr;
  return cfg.precision == Precision::f64 ? enhance_with<double>(a, exp, out) : enhance_with<float>(a, exp, out);
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config, data, out, resume;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
  int stop_at = -1;
  bool quiet = false;
};

template <typename T>
int train_with(const ConfigFile& file, const TrainArgs& a, std::ostream& out) {
  const auto& tc = file.train;
  std::vector<train::PairedSample> data;
  if (tc.data == "synthetic") {
    data = train::synthetic_dataset(tc);
  } else {
    data = train::load_paired_dir(tc.data);
    if (data.empty()) throw ValueError("train: no image pairs under '" + tc.data + "'");
  }
  auto model = init_model<T>(file.model);
  out << "model: " << param_count(file.model) << " parameters, precision " << to_string(file.model.precision) << "\n";
  out << "data: " << data.size() << " pairs (" << tc.data << ")\n";

  train::FitOptions opt;
  opt.out_dir = a.out;
  opt.resume_from = a.resume;
  opt.stop_at = a.stop_at;
  const auto t0 = std::chrono::steady_clock::now();
  if (!a.quiet) {
    opt.on_iteration = [&](const train::MetricRow& r) {
      if (r.iter % tc.snapshot_interval != 0 && r.iter + 1 != tc.iterations) return;
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out << "iter " << r.iter << " lr " << fmt("%.3e", r.lr) << " loss " << fmt("%.5f", r.loss) << " psnr "
          << fmt("%.2f", r.psnr_train) << " elapsed " << fmt("%.0f", s) << " s\n";
      out.flush();
    };
  }
  const auto result = train::fit(model, data, tc, opt);
  if (result.next_iter == tc.iterations) {
    out << "final eval psnr " << fmt("%.3f", train::evaluate_psnr(model, data)) << " dB\n";
  }
  out << "stopped at iteration " << result.next_iter << " of " << tc.iterations << "; outputs in " << a.out << "\n";
  return kOk;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  ConfigFile file;
  if (!a.config.empty()) {
    file = load_config_file(a.config);
  } else if (!a.resume.empty()) {
    const auto st = train::load_training_state<double>(a.resume);
    file.model = st.model.config;
    file.train = st.train;
  } else {
    file.model = ModelConfig::toy();
    file.train = TrainConfig::desk();
  }
  if (!a.data.empty()) file.train.data = a.data;
  if (a.seed) {
    file.train.seed = *a.seed;
    file.model.seed = *a.seed;
  }
  if (a.iterations) file.train.iterations = *a.iterations;
  file.model.validate();
  file.train.validate();
  fs::create_directories(a.out);
  save_config_file(file, (fs::path(a.out) / "config.json").string());

  // The autograd graph allocates and frees large buffers every step; keeping
  // them on the heap avoids repeated mmap/munmap and page zeroing.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
  return file.model.precision == Precision::f64 ? train_with<double>(file, a, out) : train_with<float>(file, a, out);
}

// ---------------------------------------------------------------------------
// inspect

struct InspectArgs {
  std::string input, checkpoint, out;
};

std::vector<double> channel_plane(std::span<const double> d, int c, int H, int W, int h, int w) {
  std::vector<double> p(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) p[static_cast<size_t>(y) * w + x] = d[(static_cast<size_t>(c) * H + y) * W + x];
  return p;
}

std::vector<double> crop_map(const std::vector<double>& m, int W, int h, int w) {
  std::vector<double> p(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) p[static_cast<size_t>(y) * w + x] = m[static_cast<size_t>(y) * W + x];
  return p;
}

void save_heatmap(const std::vector<double>& m, int w, int h, const fs::path& path) {
  image::save_gray_png(sai2e::minmax_normalize(m), w, h, path.string());
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  const double mean = s / static_cast<double>(v.size());
  double q = 0;
  for (double x : v) q += (x - mean) * (x - mean);
  return {mean, std::sqrt(q / static_cast<double>(v.size()))};
}

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  const auto model = cast_model<double>(load_checkpoint<float>(a.checkpoint));
  const auto img = image::load_png(a.input);
  const auto padded = image::pad_reflect(image::to_tensor<double>(img), 8);
  ForwardTrace<double> trace;
  const auto enhanced = image::crop_back(forward(model, padded.tensor, &trace), padded.height, padded.width);
  const int H = padded.tensor.shape().h, W = padded.tensor.shape().w;
  const int h = img.height, w = img.width;
  const fs::path dir = a.out;
  fs::create_directories(dir);

  // (a) illumination prior: channel mean of the input
  const auto in = padded.tensor.data();
  std::vector<double> prior(static_cast<size_t>(h) * w);
  for (int c = 0; c < 3; ++c) {
    const auto p = channel_plane(in, c, H, W, h, w);
    for (size_t i = 0; i < p.size(); ++i) prior[i] += p[i] / 3.0;
  }
  save_heatmap(prior, w, h, dir / "prior.png");

  // (b) integration area, computed on the padded frame the network saw
  std::vector<double> area_full;
  const auto& est = trace.estimate;
  if (est.offsets.defined()) {
    area_full = sai2e::integration_area_map(est.offsets, H, W);
  } else {
    const auto e = est.extents.data();
    const size_t L = static_cast<size_t>(H) * W;
    area_full.resize(L);
    for (size_t i = 0; i < L; ++i) area_full[i] = (e[i] + e[2 * L + i]) * (e[L + i] + e[3 * L + i]);
  }
  const auto area = crop_map(area_full, W, h, w);
  save_heatmap(area, w, h, dir / "area.png");
  {
    std::ofstream f(dir / "area.csv");
    f << "y,x,area\n";
    char buf[96];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", y, x, area[static_cast<size_t>(y) * w + x]);
        f << buf;
      }
    if (!f) throw IoError("cannot write '" + (dir / "area.csv").string() + "'");
  }

  // (c) I_L_0 per channel
  const char* names[3] = {"r", "g", "b"};
  const auto il = est.illumination.data();
  for (int c = 0; c < 3; ++c)
    save_heatmap(channel_plane(il, c, H, W, h, w), w, h, dir / (std::string("illum_") + names[c] + ".png"));

  // (d) residual, channel mean
  const auto res = trace.residual.data();
  std::vector<double> residual(static_cast<size_t>(h) * w);
  for (int c = 0; c < 3; ++c) {
    const auto p = channel_plane(res, c, H, W, h, w);
    for (size_t i = 0; i < p.size(); ++i) residual[i] += p[i] / 3.0;
  }
  save_heatmap(residual, w, h, dir / "residual.png");

  // (e) Y statistics
  {
    const auto [mi, si] = mean_std(image::luminance_y(img));
    const auto [mo, so] = mean_std(image::luminance_y(image::from_tensor(enhanced)));
    std::ofstream f(dir / "y_stats.csv");
    char buf[128];
    f << "image,mean,std\n";
    std::snprintf(buf, sizeof(buf), "input,%.17g,%.17g\noutput,%.17g,%.17g\n", mi, si, mo, so);
    f << buf;
    if (!f) throw IoError("cannot write '" + (dir / "y_stats.csv").string() + "'");
  }
  if (est.offsets.defined()) {
    train::write_offsets_csv((dir / "offsets.csv").string(), {{0, sai2e::offset_stats(est.offsets, H, W)}});
  }
  out << "wrote prior.png, area.png, area.csv, illum_{r,g,b}.png, residual.png, y_stats.csv"
      << (est.offsets.defined() ? ", offsets.csv" : "") << " to " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  std::string module = "all";
  std::uint64_t seed = 7;
  bool corrupt = false;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out, std::ostream& err) {
  gradcheck::Options opt;
  opt.seed = a.seed;
  gradcheck::set_corrupt_backward(a.corrupt);
  std::vector<gradcheck::Result> results;
  try {
    results = gradcheck::run(a.module, opt);
  } catch (...) {
    gradcheck::set_corrupt_backward(false);
    throw;
  }
  gradcheck::set_corrupt_backward(false);
  std::vector<std::string> failed;
  char buf[256];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%s %.3e\n", r.name.c_str(), r.max_rel_err);
    out << buf;
    if (!r.passed) failed.push_back(r.name);
  }
  if (failed.empty()) return kOk;
  err << "gradcheck: " << failed.size() << " of " << results.size() << " checks exceed the tolerance "
      << fmt("%.0e", opt.tolerance) << ":";
  for (const auto& f : failed) err << " " << f;
  err << "\n";
  return kInternalError;
}

// ---------------------------------------------------------------------------
// stats

struct StatsArgs {
  std::string config, checkpoint;
  bool search = false;
};

int cmd_stats(const StatsArgs& a, std::ostream& out) {
  ModelConfig cfg;
  if (!a.checkpoint.empty()) {
    cfg = checkpoint_config(a.checkpoint);
  } else if (!a.config.empty()) {
    cfg = load_config_file(a.config).model;
  }
  cfg.validate();
  std::map<std::string, std::uint64_t> groups;
  std::vector<std::string> order;
  for (const auto& e : parameter_manifest(cfg)) {
    const auto group = e.name.substr(0, e.name.find('.'));
    if (!groups.count(group)) order.push_back(group);
    groups[group] += e.shape.numel();
  }
  const auto total = param_count(cfg);
  out << "group,params\n";
  for (const auto& g : order) out << g << "," << groups[g] << "\n";
  out << "total," << total << "\n";
  out << "total_m," << fmt("%.4f", total / 1e6) << "\n";
  if (a.search) {
    out << "\nffn_expansion,head_illum_mode,params,rel_gap\n";
    double best_gap = 1e300;
    std::string best;
    for (double gamma : {2.0, 2.66, 4.0}) {
      for (auto mode : {blocks::HeadIllumMode::replicate, blocks::HeadIllumMode::single}) {
        auto c = cfg;
        c.ffn_expansion = gamma;
        c.head_illum_mode = mode;
        const auto n = param_count(c);
        const double gap = (static_cast<double>(n) - kPaperParams) / kPaperParams;
        out << gamma << "," << to_string(mode) << "," << n << "," << fmt("%+.4f", gap) << "\n";
        if (std::abs(gap) < best_gap) {
          best_gap = std::abs(gap);
          best = fmt("%g", gamma) + "," + to_string(mode) + "," + std::to_string(n) + "," + fmt("%+.4f", gap);
        }
      }
    }
    out << "closest," << best << (best_gap <= 0.10 ? ",within_10pct" : ",outside_10pct") << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// init / config

struct InitArgs {
  std::string config, output;
  std::optional<std::uint64_t> seed;
  bool toy = false;
};

int cmd_init(const InitArgs& a, std::ostream& out) {
  ModelConfig cfg = a.toy ? ModelConfig::toy() : ModelConfig{};
  if (!a.config.empty()) cfg = load_config_file(a.config).model;
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  save_checkpoint(init_model<float>(cfg), a.output, R"({"kind":"init"})");
  out << "wrote " << a.output << " (" << param_count(cfg) << " parameters)\n";
  return kOk;
}

struct ConfigArgs {
  std::string preset = "desk", output;
};

int cmd_config(const ConfigArgs& a, std::ostream& out) {
  ConfigFile f;
  if (a.preset == "desk") {
    f.model = ModelConfig::toy();
    f.train = TrainConfig::desk();
  } else {
    f.model = ModelConfig{};
    f.train = TrainConfig::paper();
  }
  if (a.output.empty()) {
    out << to_json_text(f) << "\n";
  } else {
    save_config_file(f, a.output);
    out << "wrote " << a.output << "\n";
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"SAIGFormer low-light enhancement: enhance, train, inspect, gradcheck, stats"};
  app.name(args.empty() ? "saigformer" : fs::path(args[0]).filename().string());
  app.require_subcommand(1);

  EnhanceArgs ea;
  auto* enhance = app.add_subcommand("enhance", "Enhance a PNG (or a directory of PNGs)");
  enhance->add_option("--input", ea.input, "Input PNG or directory")->required();
  enhance->add_option("--checkpoint", ea.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  enhance->add_option("--output", ea.output, "Output PNG or directory")->required();
  enhance->add_option("--config", ea.config, "Config file the checkpoint must match")->check(CLI::ExistingFile);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", ta.config, "Config file (default: desk preset)")->check(CLI::ExistingFile);
  train->add_option("--data", ta.data, "'synthetic' or a directory with low/ and normal/");
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--resume", ta.resume, "Training-state snapshot to continue from")->check(CLI::ExistingFile);
  train->add_option("--seed", ta.seed, "Overrides the model and training seeds");
  train->add_option("--iterations", ta.iterations, "Overrides train.iterations");
  train->add_option("--stop-at", ta.stop_at, "Stop once this iteration is reached");
  train->add_flag("--quiet", ta.quiet, "No per-snapshot progress lines");

  InspectArgs ia;
  auto* inspect = app.add_subcommand("inspect", "Write illumination and integration-area diagnostics");
  inspect->add_option("--input", ia.input, "Input PNG")->required()->check(CLI::ExistingFile);
  inspect->add_option("--checkpoint", ia.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  inspect->add_option("--out", ia.out, "Output directory")->required();

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks in 64-bit");
  gc->add_option("--module", ga.module, "Module to check")
      ->check(CLI::IsMember({"tensor", "sat", "sai2e", "blocks", "network", "train", "all"}));
  gc->add_option("--seed", ga.seed, "Seed of inputs and projections");
  gc->add_flag("--corrupt-backward", ga.corrupt, "Test hook: perturb the GELU derivative")->group("");

  StatsArgs sa;
  auto* stats = app.add_subcommand("stats", "Parameter counts");
  stats->add_option("--config", sa.config, "Config file (default: full-size model)")->check(CLI::ExistingFile);
  stats->add_option("--checkpoint", sa.checkpoint, "Read the config from a checkpoint")->check(CLI::ExistingFile);
  stats->add_flag("--search", sa.search, "Compare FFN expansion and head modes against 12.35 M");

  InitArgs na;
  auto* init = app.add_subcommand("init", "Write a freshly initialized (identity) checkpoint");
  init->add_option("--output", na.output, "Checkpoint path")->required();
  init->add_option("--config", na.config, "Config file")->check(CLI::ExistingFile);
  init->add_option("--seed", na.seed, "Overrides model.seed");
  init->add_flag("--toy", na.toy, "Use the toy architecture");

  ConfigArgs ca;
  auto* config = app.add_subcommand("config", "Print or write a config file");
  config->add_option("--preset", ca.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  config->add_option("--output", ca.output, "Destination (default: stdout)");

  std::vector<const char*> argv;
  for (const auto& s : args) argv.push_back(s.c_str());
  if (argv.empty()) argv.push_back("saigformer");
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUserError;
  }

  try {
    if (*enhance) return cmd_enhance(ea, out);
    if (*train) return cmd_train(ta, out);
    if (*inspect) return cmd_inspect(ia, out);
    if (*gc) return cmd_gradcheck(ga, out, err);
    if (*stats) return cmd_stats(sa, out);
    if (*init) return cmd_init(na, out);
    if (*config) return cmd_config(ca, out);
  } catch (const InvariantError& e) {
    err << "error: " << e.what() << "\n";
    return kInternalError;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUserError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kUserError;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternalError;
  }
  return kUserError;
}

}  // namespace saig::cli
