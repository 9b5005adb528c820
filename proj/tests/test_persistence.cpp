#include <doctest.h>

#include <cstring>
#include <fstream>

#include "saigformer/checkpoint.hpp"
#include "saigformer/config.hpp"
#include "saigformer/error.hpp"
#include "saigformer/network.hpp"
#include "support.hpp"

using namespace saig;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  f << bytes;
}

std::vector<std::string> config_errors(const std::string& text) {
  try {
    config_file_from_json_text(text);
  } catch (const ConfigError& e) {
    return e.fields();
  }
  return {};
}

}  // namespace

TEST_CASE("config files round-trip losslessly") {
  ConfigFile f;
  f.model = ModelConfig::toy();
  f.model.ffn_expansion = 2.0 / 3.0 + 1;
  f.model.head_illum_mode = blocks::HeadIllumMode::single;
  f.model.illumination = sai2e::Variant::no_modulation;
  f.model.precision = Precision::f64;
  f.model.seed = 0xFFFFFFFFFFFFFFFFull;
  f.train = TrainConfig::paper();
  f.train.lr_start = 1.0 / 3.0;
  f.train.data = "some/dir";
  const auto text = to_json_text(f);
  const auto back = config_file_from_json_text(text);
  CHECK(back.model == f.model);
  CHECK(back.train == f.train);
  CHECK(to_json_text(back) == text);

  testing::TempDir dir("cfg");
  save_config_file(f, dir / "c.json");
  CHECK(load_config_file(dir / "c.json").model == f.model);
}

TEST_CASE("missing keys take the defaults") {
  const auto f = config_file_from_json_text(R"({"version": 1, "model": {"base_channels": 8}})");
  CHECK(f.model.base_channels == 8);
  CHECK(f.model.block_counts == ModelConfig{}.block_counts);
  CHECK(f.train == TrainConfig{});
}

TEST_CASE("invalid configs list every offender") {
  const auto bad = config_errors(
      R"({"version": 1, "model": {"base_chanels": 8, "heads": "x", "illumination": "box"},
          "train": {"lr": 1, "batch_size": 0}, "extra": true})");
  auto has = [&](const std::string& key) {
    for (const auto& b : bad)
      if (b.find(key) != std::string::npos) return true;
    return false;
  };
  CHECK(has("model.base_chanels"));
  CHECK(has("model.heads"));
  CHECK(has("model.illumination"));
  CHECK(has("train.lr"));
  CHECK(has("train.batch_size"));
  CHECK(has("extra"));
  CHECK(bad.size() >= 6);

  CHECK_FALSE(config_errors(R"({"version": 2})").empty());
  CHECK_THROWS_AS(config_file_from_json_text("{not json"), FormatError);
  CHECK_THROWS_AS(load_config_file("/nonexistent/config.json"), IoError);
}

TEST_CASE("differing fields") {
  auto a = ModelConfig::toy(), b = a;
  b.base_channels = 8;
  b.head_illum_mode = blocks::HeadIllumMode::single;
  const auto d = differing_fields(a, b);
  REQUIRE(d.size() == 2);
  CHECK(d[0].find("base_channels") != std::string::npos);
  CHECK(d[1].find("head_illum_mode") != std::string::npos);
  CHECK(differing_fields(a, a).empty());
}

TEST_CASE("checkpoint save, load and save again is byte-identical") {
  testing::TempDir dir("ckpt");
  auto cfg = ModelConfig::toy();
  cfg.seed = 5;
  const auto model = init_model<float>(cfg, false);
  save_checkpoint(model, dir / "a.ckpt");
  const auto loaded = load_checkpoint<float>(dir / "a.ckpt");
  CHECK(loaded.config == cfg);
  save_checkpoint(loaded, dir / "b.ckpt");
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  const auto pa = model.parameters(), pb = loaded.parameters();
  for (size_t i = 0; i < pa.size(); ++i)
    for (size_t k = 0; k < pa[i].tensor.numel(); ++k) CHECK(pa[i].tensor.data()[k] == pb[i].tensor.data()[k]);
}

TEST_CASE("64-bit documents keep every bit") {
  ckpt::Document doc;
  doc.dtype = ckpt::Dtype::f64;
  doc.config = ModelConfig::toy();
  doc.meta_json = R"({"k":1})";
  doc.blobs.push_back({"a", {1, 1, 1, 3}, {1.0 / 3.0, -0.0, 1e-300}});
  doc.blobs.push_back({"b", {1, 2, 1, 1}, {std::nextafter(1.0, 2.0), 7}});
  const auto bytes = ckpt::encode(doc);
  const auto back = ckpt::decode(bytes);
  REQUIRE(back.blobs.size() == 2);
  CHECK(std::memcmp(back.blobs[0].values.data(), doc.blobs[0].values.data(), 3 * sizeof(double)) == 0);
  CHECK(back.blobs[1].values[0] == std::nextafter(1.0, 2.0));
  CHECK(ckpt::encode(back) == bytes);
  const auto info = ckpt::decode_info(bytes);
  CHECK(info.format_version == ckpt::kFormatVersion);
  CHECK(info.manifest[1].offset == 3 * sizeof(double));
  CHECK(info.payload_bytes == 5 * sizeof(double));
}

TEST_CASE("damaged containers raise structured errors") {
  testing::TempDir dir("bad");
  save_checkpoint(init_model<float>(ModelConfig::toy()), dir / "m.ckpt");
  const auto good = slurp(dir / "m.ckpt");

  auto expect_format_error = [&](std::string bytes, const std::string& needle) {
    spit(dir / "x.ckpt", bytes);
    try {
      load_checkpoint<float>(dir / "x.ckpt");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      INFO(e.what());
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  SUBCASE("magic") {
    auto b = good;
    b[0] = 'X';
    expect_format_error(b, "magic");
  }
  SUBCASE("version") {
    auto b = good;
    b[8] = 9;
    expect_format_error(b, "version");
  }
  SUBCASE("truncated payload") { expect_format_error(good.substr(0, good.size() - 10), "truncated"); }
  SUBCASE("trailing bytes") { expect_format_error(good + "zz", "trailing"); }
  SUBCASE("tampered manifest offset") {
    auto b = good;
    const auto pos = b.find("\"offset\":0");
    REQUIRE(pos != std::string::npos);
    b[pos + 9] = '4';
    expect_format_error(b, "offset");
  }
  SUBCASE("corrupt header") {
    auto b = good;
    b[21] = '#';
    expect_format_error(b, "header");
  }
}

TEST_CASE("loading into a different configuration names the field") {
  testing::TempDir dir("mismatch");
  save_checkpoint(init_model<float>(ModelConfig::toy()), dir / "m.ckpt");
  auto expected = ModelConfig::toy();
  expected.base_channels = 32;
  try {
    load_checkpoint<float>(dir / "m.ckpt", &expected);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(e.fields().size() == 1);
    CHECK(e.fields()[0].find("base_channels") != std::string::npos);
  }
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "missing.ckpt"), IoError);
}
