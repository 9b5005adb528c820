#include <doctest.h>

#include "saigformer/error.hpp"
#include "saigformer/gradcheck.hpp"
#include "saigformer/sat.hpp"
#include "support.hpp"

using namespace saig;
using sat::BoxQuery;
using sat::SummedAreaTable;

namespace {

std::vector<double> random_image(std::mt19937_64& rng, int H, int W, bool integer) {
  std::vector<double> img(static_cast<size_t>(H) * W);
  for (auto& v : img) v = integer ? static_cast<double>(rng() % 256) : testing::unit(rng);
  return img;
}

}  // namespace

TEST_CASE("table of a 2x2 ones image") {
  const std::vector<double> ones(4, 1.0);
  const auto t = SummedAreaTable::build<double>(ones, 2, 2);
  CHECK(t.at(0, 0) == 0);
  CHECK(t.at(0, 2) == 0);
  CHECK(t.at(1, 1) == 1);
  CHECK(t.at(1, 2) == 2);
  CHECK(t.at(2, 1) == 2);
  CHECK(t.at(2, 2) == 4);
  CHECK(sat::box_sum(t, {0, 0, 2, 2}) == 4);
  CHECK(sat::box_sum(t, {1, 0, 1, 2}) == 0);
}

TEST_CASE("every entry matches a naive prefix sum") {
  std::mt19937_64 rng(1);
  const int H = 7, W = 5;
  const auto img = random_image(rng, H, W, false);
  const auto t = SummedAreaTable::build<double>(img, H, W);
  for (int y = 0; y <= H; ++y)
    for (int x = 0; x <= W; ++x) {
      double s = 0;
      for (int i = 0; i < y; ++i)
        for (int j = 0; j < x; ++j) s += img[static_cast<size_t>(i) * W + j];
      CHECK(t.at(y, x) == doctest::Approx(s).epsilon(1e-15));
    }
  double total = 0;
  for (double v : img) total += v;
  CHECK(t.at(H, W) == doctest::Approx(total).epsilon(1e-15));
}

TEST_CASE("float images accumulate in 64-bit") {
  std::vector<float> img(300 * 300, 0.1f);
  const auto t = SummedAreaTable::build<float>(img, 300, 300);
  CHECK(t.at(300, 300) == doctest::Approx(90000 * static_cast<double>(0.1f)).epsilon(1e-12));
}

TEST_CASE("invalid builds") {
  std::vector<double> img(6);
  CHECK_THROWS_AS(SummedAreaTable::build<double>(img, 2, 4), ShapeError);
  CHECK_THROWS_AS(SummedAreaTable::build<double>(std::span<const double>{}, 0, 0), ValueError);
}

TEST_CASE("integer boxes equal naive summation exactly") {
  std::mt19937_64 rng(2);
  const int H = 16, W = 16;
  std::vector<int> bytes(H * W);
  for (auto& b : bytes) b = static_cast<int>(rng() % 256);
  const std::vector<double> img(bytes.begin(), bytes.end());
  const auto t = SummedAreaTable::build<double>(img, H, W);
  for (int i = 0; i < 200; ++i) {
    int x0 = rng() % (W + 1), x1 = rng() % (W + 1), y0 = rng() % (H + 1), y1 = rng() % (H + 1);
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    const double s = sat::box_sum(t, {double(x0), double(y0), double(x1), double(y1)});
    CHECK(s == static_cast<double>(testing::oracle::box_sum(bytes, W, y0, x0, y1, x1)));
  }
}

TEST_CASE("additivity across a shared edge") {
  std::mt19937_64 rng(3);
  const int H = 12, W = 10;
  const auto img = random_image(rng, H, W, true);
  const auto t = SummedAreaTable::build<double>(img, H, W);
  for (int i = 0; i < 50; ++i) {
    const int x0 = rng() % 4, xm = 4 + rng() % 3, x1 = 7 + rng() % 4;
    const int y0 = rng() % 5, y1 = 6 + rng() % 7;
    const double whole = sat::box_sum(t, {double(x0), double(y0), double(x1), double(y1)});
    const double left = sat::box_sum(t, {double(x0), double(y0), double(xm), double(y1)});
    const double right = sat::box_sum(t, {double(xm), double(y0), double(x1), double(y1)});
    CHECK(whole == left + right);
  }
}

TEST_CASE("fractional boxes") {
  std::mt19937_64 rng(4);
  const int H = 13, W = 11;
  const auto img = random_image(rng, H, W, false);
  const auto t = SummedAreaTable::build<double>(img, H, W);

  SUBCASE("integer corners are bit-identical to box_sum") {
    for (int i = 0; i < 100; ++i) {
      int x0 = rng() % (W + 1), x1 = rng() % (W + 1), y0 = rng() % (H + 1), y1 = rng() % (H + 1);
      if (x0 > x1) std::swap(x0, x1);
      if (y0 > y1) std::swap(y0, y1);
      const BoxQuery q{double(x0), double(y0), double(x1), double(y1)};
      CHECK(sat::box_sum_fractional(t, q) == sat::box_sum(t, q));
    }
  }
  SUBCASE("sub-lattice corners against 16x supersampling") {
    for (int i = 0; i < 100; ++i) {
      auto lattice = [&](int n) { return static_cast<double>(rng() % (16 * n + 1)) / 16.0; };
      double x0 = lattice(W), x1 = lattice(W), y0 = lattice(H), y1 = lattice(H);
      if (x0 > x1) std::swap(x0, x1);
      if (y0 > y1) std::swap(y0, y1);
      const double ref = testing::oracle::supersampled_box(img, H, W, x0, y0, x1, y1);
      CHECK(sat::box_sum_fractional(t, {x0, y0, x1, y1}) == doctest::Approx(ref).epsilon(1e-12));
    }
  }
  SUBCASE("arbitrary real corners against exact coverage") {
    for (int i = 0; i < 200; ++i) {
      double x0 = testing::unit(rng) * W, x1 = testing::unit(rng) * W;
      double y0 = testing::unit(rng) * H, y1 = testing::unit(rng) * H;
      if (x0 > x1) std::swap(x0, x1);
      if (y0 > y1) std::swap(y0, y1);
      const double ref = testing::oracle::exact_box(img, H, W, x0, y0, x1, y1);
      CHECK(sat::box_sum_fractional(t, {x0, y0, x1, y1}) == doctest::Approx(ref).epsilon(1e-12).scale(1e-9));
    }
  }
  SUBCASE("corners are clamped to the table") {
    const double inside = sat::box_sum_fractional(t, {0, 0, double(W), double(H)});
    CHECK(sat::box_sum_fractional(t, {-3.5, -2, W + 4.25, H + 1.0}) == inside);
  }
}

TEST_CASE("constant images: value times area, independent of position") {
  const int H = 20, W = 24;
  const double c = 0.37;
  const std::vector<double> img(H * W, c);
  const auto t = SummedAreaTable::build<double>(img, H, W);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const double w = 1 + 6 * testing::unit(rng), h = 1 + 6 * testing::unit(rng);
    const double x0 = testing::unit(rng) * (W - w), y0 = testing::unit(rng) * (H - h);
    CHECK(sat::box_sum_fractional(t, {x0, y0, x0 + w, y0 + h}) == doctest::Approx(c * w * h).epsilon(1e-6));
  }
}

TEST_CASE("query cost does not depend on box size") {
  std::mt19937_64 rng(6);
  const auto img = random_image(rng, 64, 64, false);
  const auto t = SummedAreaTable::build<double>(img, 64, 64);
  reset_op_counters();
  sat::box_sum_fractional(t, {10.5, 10.5, 11.25, 11.75});
  const auto small = op_counters().sat_reads;
  reset_op_counters();
  sat::box_sum_fractional(t, {0.5, 0.5, 63.25, 63.75});
  const auto large = op_counters().sat_reads;
  CHECK(small == large);
  CHECK(large <= 16);
  reset_op_counters();
  sat::box_sum(t, {0, 0, 64, 64});
  CHECK(op_counters().sat_reads == 4);
}

TEST_CASE("corner gradients match finite differences") {
  for (std::uint64_t seed : {7, 8, 9}) {
    gradcheck::Options opt;
    opt.seed = seed;
    for (const auto& r : gradcheck::run("sat", opt)) {
      INFO(r.name << " " << r.max_rel_err);
      CHECK(r.passed);
    }
  }
}
