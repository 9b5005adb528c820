#include <doctest.h>

#include <cmath>

#include "saigformer/error.hpp"
#include "saigformer/gradcheck.hpp"
#include "saigformer/ops.hpp"
#include "support.hpp"

using namespace saig;
using testing::random_tensor;
using Td = Tensor<double>;

TEST_CASE("tensor basics") {
  auto t = Td::from({1, 2, 1, 2}, {1, 2, 3, 4});
  CHECK(t.numel() == 4);
  CHECK(t.is_leaf());
  CHECK_FALSE(t.has_grad());
  CHECK(t.shape().str().find("2") != std::string::npos);
  CHECK_THROWS_AS(Td::from({1, 1, 2, 2}, {1, 2, 3}), ShapeError);
  CHECK(Td::scalar(3.5).item() == 3.5);
  CHECK_THROWS(t.item());
}

TEST_CASE("backward of sum and sum of squares") {
  auto x = random_tensor({2, 3, 4, 5}, 1);
  x.set_requires_grad(true);
  backward(ops::sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);
  x.zero_grad();
  backward(ops::sum(ops::mul(x, x)));
  const auto g = x.grad();
  for (size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(2 * x.data()[i]).epsilon(1e-15));
}

TEST_CASE("gradients accumulate over shared subexpressions") {
  auto x = Td::from({1, 1, 1, 3}, {1, 2, 3}, true);
  auto y = ops::add(x, x);
  backward(ops::sum(ops::mul(y, x)));  // 2 x^2 -> 4x
  const auto g = x.grad();
  CHECK(g[0] == 4.0);
  CHECK(g[1] == 8.0);
  CHECK(g[2] == 12.0);
}

TEST_CASE("constant inputs do not record a graph") {
  auto a = random_tensor({1, 2, 3, 3}, 2);
  auto b = random_tensor({1, 2, 3, 3}, 3);
  auto c = ops::add(a, b);
  CHECK(c.is_leaf());
  CHECK_FALSE(c.requires_grad());
}

TEST_CASE("broadcast shapes") {
  auto a = random_tensor({2, 3, 4, 4}, 4);
  auto b = random_tensor({1, 3, 1, 1}, 5);
  auto c = ops::add(a, b);
  CHECK(c.shape() == Shape{2, 3, 4, 4});
  CHECK(c.data()[17] == a.data()[17] + b.data()[1]);
  CHECK_THROWS_AS(ops::add(a, random_tensor({1, 2, 1, 1}, 6)), ShapeError);
}

TEST_CASE("conv2d small examples") {
  SUBCASE("identity kernel") {
    auto x = random_tensor({1, 1, 3, 3}, 7);
    auto w = Td::from({1, 1, 1, 1}, {1.0});
    auto y = ops::conv2d(x, w, std::optional<Td>{});
    CHECK(testing::max_abs_diff(x.data(), y.data()) == 0.0);
  }
  SUBCASE("stride two average") {
    auto x = Td::from({1, 1, 2, 2}, {1, 2, 3, 4});
    auto w = Td::full({1, 1, 2, 2}, 0.25);
    auto y = ops::conv2d(x, w, std::optional<Td>{}, 2, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 2.5);
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(ops::conv2d(random_tensor({1, 3, 4, 4}, 1), random_tensor({2, 2, 1, 1}, 2), std::optional<Td>{}),
                    ShapeError);
  }
}

TEST_CASE("conv2d matches direct convolution") {
  struct Case {
    Shape xs, ws;
    int stride, pad, groups;
    bool bias;
  };
  const Case cases[] = {
      {{1, 4, 8, 8}, {4, 1, 3, 3}, 1, 1, 4, true},
      {{2, 3, 7, 6}, {5, 3, 3, 3}, 1, 1, 1, true},
      {{2, 4, 8, 8}, {6, 2, 3, 3}, 2, 1, 2, false},
      {{1, 3, 9, 9}, {3, 1, 4, 4}, 2, 1, 3, true},
      {{2, 5, 4, 4}, {7, 5, 1, 1}, 1, 0, 1, true},
  };
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    auto x = random_tensor(c.xs, ++seed);
    auto w = random_tensor(c.ws, ++seed);
    auto b = random_tensor({1, c.ws.n, 1, 1}, ++seed);
    auto y = ops::conv2d(x, w, c.bias ? std::optional{b} : std::nullopt, c.stride, c.pad, c.groups);
    const auto bv = testing::to_vec(b);
    const auto ref = testing::oracle::conv2d(testing::to_vec(x), c.xs, testing::to_vec(w), c.ws, c.bias ? &bv : nullptr,
                                             c.stride, c.pad, c.groups);
    REQUIRE(y.numel() == ref.size());
    for (size_t i = 0; i < ref.size(); ++i) CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("layer norm") {
  SUBCASE("constant channels give zeros") {
    auto x = Td::full({1, 4, 2, 2}, 3.0);
    auto y = ops::layer_norm(x, Td::full({1, 4, 1, 1}, 1.0), Td::zeros({1, 4, 1, 1}), 1e-6);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("two channels, eps 0") {
    auto x = Td::from({1, 2, 1, 1}, {1, 3});
    auto y = ops::layer_norm(x, Td::full({1, 2, 1, 1}, 1.0), Td::zeros({1, 2, 1, 1}), 0.0);
    CHECK(y.data()[0] == doctest::Approx(-1.0));
    CHECK(y.data()[1] == doctest::Approx(1.0));
  }
  SUBCASE("per-location statistics") {
    auto x = random_tensor({2, 8, 4, 4}, 9, -3, 5);
    auto y = ops::layer_norm(x, Td::full({1, 8, 1, 1}, 1.0), Td::zeros({1, 8, 1, 1}), 1e-6);
    const auto d = y.data();
    for (int n = 0; n < 2; ++n)
      for (int p = 0; p < 16; ++p) {
        double m = 0, v = 0;
        for (int c = 0; c < 8; ++c) m += d[(n * 8 + c) * 16 + p];
        m /= 8;
        for (int c = 0; c < 8; ++c) v += std::pow(d[(n * 8 + c) * 16 + p] - m, 2);
        v /= 8;
        CHECK(std::abs(m) < 1e-5);
        CHECK(std::abs(v - 1) < 1e-4);
      }
  }
}

TEST_CASE("softmax") {
  SUBCASE("uniform slice") {
    auto y = ops::softmax(Td::full({1, 1, 5, 1}, 0.7), 2);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("exp ratio 1:2") {
    auto y = ops::softmax(Td::from({1, 1, 1, 2}, {0.0, std::log(2.0)}), 3);
    CHECK(y.data()[0] == doctest::Approx(1.0 / 3));
    CHECK(y.data()[1] == doctest::Approx(2.0 / 3));
  }
  SUBCASE("sums along every axis") {
    auto x = random_tensor({3, 4, 5, 6}, 10, -20, 20);
    const int dims[4] = {3, 4, 5, 6};
    for (int axis = 0; axis < 4; ++axis) {
      auto y = ops::softmax(x, axis);
      const auto d = y.data();
      // Sum along `axis` by striding.
      size_t stride = 1;
      for (int a = 3; a > axis; --a) stride *= dims[a];
      const size_t outer = y.numel() / (stride * dims[axis]);
      for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < stride; ++i) {
          double s = 0;
          for (int k = 0; k < dims[axis]; ++k) s += d[(o * dims[axis] + k) * stride + i];
          CHECK(std::abs(s - 1) < 1e-6);
        }
    }
  }
}

TEST_CASE("activations") {
  auto z = Td::zeros({1, 1, 1, 1});
  CHECK(ops::gelu(z).item() == 0.0);
  CHECK(ops::sigmoid(z).item() == 0.5);
  CHECK(ops::softplus(z).item() == doctest::Approx(std::log(2.0)));
  auto x = random_tensor({1, 2, 8, 8}, 11, -6, 6);
  auto s1 = ops::sigmoid(x);
  auto s2 = ops::sigmoid(ops::scale(x, -1.0));
  for (size_t i = 0; i < x.numel(); ++i) {
    CHECK(std::abs(s1.data()[i] + s2.data()[i] - 1) < 1e-6);
    CHECK(ops::gelu(x).data()[i] == doctest::Approx(testing::oracle::gelu(x.data()[i])).epsilon(1e-14));
  }
  // Large magnitudes stay finite.
  auto big = Td::from({1, 1, 1, 4}, {-800, -50, 50, 800});
  const auto sp = ops::softplus(big), sg = ops::sigmoid(big);
  for (double v : sp.data()) CHECK(std::isfinite(v));
  for (double v : sg.data()) CHECK(std::isfinite(v));
}

TEST_CASE("dual gate matches its elementwise definition") {
  auto a = random_tensor({1, 3, 4, 4}, 12, -3, 3);
  auto b = random_tensor({1, 3, 4, 4}, 13, -3, 3);
  auto y = ops::dual_gate(a, b);
  for (size_t i = 0; i < y.numel(); ++i) {
    const double u = a.data()[i], v = b.data()[i];
    const double ref = testing::oracle::gelu(u) * v + testing::oracle::sigmoid(v) * u;
    CHECK(y.data()[i] == doctest::Approx(ref).epsilon(1e-13));
  }
}

TEST_CASE("pixel shuffle") {
  auto x = Td::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto u = ops::pixel_unshuffle(x, 2);
  REQUIRE(u.shape() == Shape{1, 4, 1, 1});
  // Channel dy * 2 + dx holds pixel (dy, dx).
  CHECK(u.data()[0] == 1);
  CHECK(u.data()[1] == 2);
  CHECK(u.data()[2] == 3);
  CHECK(u.data()[3] == 4);

  auto r = random_tensor({2, 3, 8, 6}, 14);
  auto back = ops::pixel_shuffle(ops::pixel_unshuffle(r, 2), 2);
  CHECK(testing::max_abs_diff(r.data(), back.data()) == 0.0);

  // Mean over the four derived channels is 2x2 average pooling.
  auto un = ops::pixel_unshuffle(r, 2);
  const auto d = un.data();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int xx = 0; xx < 3; ++xx) {
        double m = 0;
        for (int k = 0; k < 4; ++k) m += d[((c * 4 + k) * 4 + y) * 3 + xx];
        double pool = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) pool += r.data()[(c * 8 + 2 * y + dy) * 6 + 2 * xx + dx];
        CHECK(m / 4 == doctest::Approx(pool / 4).epsilon(1e-15));
      }
  CHECK_THROWS_AS(ops::pixel_unshuffle(random_tensor({1, 1, 3, 4}, 1), 2), ShapeError);
}

TEST_CASE("bmm against direct products") {
  auto a = random_tensor({2, 3, 4, 5}, 15);
  auto b = random_tensor({2, 3, 5, 6}, 16);
  auto c = ops::bmm(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 4, 6});
  for (int p = 0; p < 6; ++p)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 6; ++j) {
        double s = 0;
        for (int k = 0; k < 5; ++k) s += a.data()[(p * 4 + i) * 5 + k] * b.data()[(p * 5 + k) * 6 + j];
        CHECK(c.data()[(p * 4 + i) * 6 + j] == doctest::Approx(s).epsilon(1e-13));
      }
}

TEST_CASE("forward determinism in 64-bit") {
  auto x = random_tensor({1, 4, 6, 6}, 17);
  auto w = random_tensor({4, 1, 3, 3}, 18);
  auto y1 = ops::gelu(ops::conv2d(x, w, std::optional<Td>{}, 1, 1, 4));
  auto y2 = ops::gelu(ops::conv2d(x, w, std::optional<Td>{}, 1, 1, 4));
  CHECK(testing::max_abs_diff(y1.data(), y2.data()) == 0.0);
}

TEST_CASE("finite-difference suite, tensor module") {
  // Three independent instances per op.
  for (std::uint64_t seed : {7, 8, 9}) {
    gradcheck::Options opt;
    opt.seed = seed;
    for (const auto& r : gradcheck::run("tensor", opt)) {
      INFO(r.name << " seed " << seed << " err " << r.max_rel_err);
      CHECK(r.passed);
      CHECK(r.checked > 0);
    }
  }
}

TEST_CASE("corrupted GELU backward is detected") {
  gradcheck::set_corrupt_backward(true);
  const auto results = gradcheck::run("tensor");
  gradcheck::set_corrupt_backward(false);
  bool gelu_failed = false;
  for (const auto& r : results)
    if (r.name == "tensor.gelu") gelu_failed = !r.passed;
  CHECK(gelu_failed);
}
