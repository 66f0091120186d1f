#include "doctest.h"

#include <cmath>
#include <random>

#include "dskd/tensor.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dskd;
using testutil::vec;

TEST_SUITE("tensor") {

TEST_CASE("conv2d identity kernel reproduces the input") {
  std::mt19937_64 rng(1);
  Tensor x = testutil::uniform(rng, {1, 5, 6}, -1, 1);
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  Tensor y = conv2d(x, Tensor::from_data({1, 1, 3, 3}, k), Tensor::zeros({1}));
  CHECK(vec(y) == vec(x));
}

TEST_CASE("conv2d of ones over ones") {
  Tensor y = conv2d(Tensor::full({1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), Tensor::zeros({1}));
  CHECK(y[4] == 9.0);
  CHECK(y[0] == 4.0);
  CHECK(y[2] == 4.0);
  CHECK(y[6] == 4.0);
  CHECK(y[8] == 4.0);
  CHECK(y[1] == 6.0);
}

TEST_CASE("conv2d matches nested loops on random multi-channel input") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = testutil::uniform(rng, {3, 7, 5}, -1, 1);
    Tensor k = testutil::uniform(rng, {4, 3, 3, 3}, -1, 1);
    Tensor b = testutil::uniform(rng, {4}, -1, 1);
    const auto got = vec(conv2d(x, k, b, 1));
    const auto want = oracle::conv2d(vec(x), 3, 7, 5, vec(k), 4, 3, vec(b), 1);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d shape errors name the dimension") {
  Tensor x = Tensor::zeros({2, 4, 4});
  try {
    conv2d(x, Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.dimension() == "in_channels");
    CHECK(e.expected() == 3);
    CHECK(e.actual() == 2);
  }
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({2})), ShapeError);
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("bilinear upsampling") {
  SUBCASE("constant map stays constant") {
    Tensor y = bilinear_upsample(Tensor::full({2, 3, 4}, 0.37), 3);
    CHECK(y.shape() == Shape{2, 9, 12});
    for (double v : y.data()) CHECK(v == doctest::Approx(0.37).epsilon(1e-15));
  }
  SUBCASE("single pixel fills the block") {
    Tensor y = bilinear_upsample(Tensor::full({1, 1, 1}, -2.5), 4);
    CHECK(y.numel() == 16);
    for (double v : y.data()) CHECK(v == -2.5);
  }
  SUBCASE("2x2 ramp matches the sampling formula") {
    const std::vector<double> in{0, 1, 0, 1};
    Tensor y = bilinear_upsample(Tensor::from_data({1, 2, 2}, in), 2);
    const auto want = oracle::bilinear(in, 2, 2, 2);
    CHECK(vec(y) == want);
    // Every row is [0, 0.25, 0.75, 1].
    for (int r = 0; r < 4; ++r) {
      CHECK(y[r * 4 + 0] == 0.0);
      CHECK(y[r * 4 + 1] == 0.25);
      CHECK(y[r * 4 + 2] == 0.75);
      CHECK(y[r * 4 + 3] == 1.0);
    }
  }
  SUBCASE("random maps match the reference") {
    std::mt19937_64 rng(3);
    Tensor x = testutil::uniform(rng, {1, 3, 5}, -1, 1);
    const auto got = vec(bilinear_upsample(x, 4));
    const auto want = oracle::bilinear(vec(x), 3, 5, 4);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-14));
  }
  CHECK_THROWS_AS(bilinear_upsample(Tensor::zeros({1, 2, 2}), 0), std::invalid_argument);
  CHECK_THROWS_AS(bilinear_upsample(Tensor::zeros({1, 2, 2}), -2), std::invalid_argument);
}

TEST_CASE("sigmoid") {
  Tensor y = sigmoid(Tensor::from_data({5}, {0.0, 3.0, -3.0, 800.0, -800.0}));
  CHECK(y[0] == 0.5);
  CHECK(y[1] + y[2] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y[3] == 1.0);
  CHECK(y[4] >= 0.0);
  CHECK(std::isfinite(y[4]));
}

TEST_CASE("stable softmax") {
  SUBCASE("equal logits are uniform") {
    Tensor p = stable_softmax(Tensor::full({8}, 4.2), 2.0);
    for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 8).epsilon(1e-15));
  }
  SUBCASE("two logits closed form") {
    Tensor p = stable_softmax(Tensor::from_data({2}, {1.0, 0.0}), 1.0);
    const double e = std::exp(1.0);
    CHECK(p[0] == doctest::Approx(e / (e + 1)).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(1 / (e + 1)).epsilon(1e-15));
    CHECK(p[0] == doctest::Approx(0.7311).epsilon(1e-4));
  }
  SUBCASE("huge logits do not overflow") {
    Tensor p = stable_softmax(Tensor::from_data({2}, {10000.0, 0.0}), 3.0);
    CHECK(std::isfinite(p[0]));
    CHECK(std::isfinite(p[1]));
    CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-15));
    const auto want = oracle::softmax({10000.0, 0.0}, 3.0);
    CHECK(p[0] == want[0]);
    CHECK(p[1] == want[1]);
  }
  CHECK_THROWS_AS(stable_softmax(Tensor::zeros({3}), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(stable_softmax(Tensor::zeros({3}), -1.0), std::invalid_argument);
}

TEST_CASE("backward") {
  std::mt19937_64 rng(4);
  SUBCASE("sum gives ones") {
    Tensor x = testutil::uniform(rng, {3, 4}, -1, 1, true);
    sum(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("sum of sigmoid gives s(1-s)") {
    Tensor x = testutil::uniform(rng, {10}, -4, 4, true);
    sum(sigmoid(x)).backward();
    for (std::size_t i = 0; i < 10; ++i) {
      const double s = oracle::sigmoid(x[i]);
      CHECK(x.grad()[i] == doctest::Approx(s * (1 - s)).epsilon(1e-12));
    }
  }
  SUBCASE("shared subexpressions accumulate") {
    Tensor x = Tensor::from_data({1}, {3.0}, true);
    Tensor y = x * x + x;
    y.backward();
    CHECK(x.grad()[0] == 7.0);
    // A second backward starts from zeroed gradients.
    y.backward();
    CHECK(x.grad()[0] == 7.0);
  }
  SUBCASE("errors") {
    Tensor x = testutil::uniform(rng, {3}, -1, 1, true);
    CHECK_THROWS_AS((x * 2.0).backward(), ShapeError);
    Tensor undefined;
    CHECK_THROWS_AS(undefined.backward(), std::logic_error);
    CHECK_THROWS_AS(sum(Tensor::zeros({3})).backward(), std::logic_error);
  }
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = sum(x * x);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(grad_enabled());
}

TEST_CASE("block_sum and max_pool2x2") {
  std::vector<double> v(16);
  for (int i = 0; i < 16; ++i) v[i] = i;
  Tensor x = Tensor::from_data({1, 4, 4}, v);
  Tensor b = block_sum(x, 2);
  CHECK(vec(b) == std::vector<double>{0 + 1 + 4 + 5, 2 + 3 + 6 + 7, 8 + 9 + 12 + 13, 10 + 11 + 14 + 15});
  Tensor m = max_pool2x2(x);
  CHECK(vec(m) == std::vector<double>{5, 7, 13, 15});
  CHECK_THROWS_AS(block_sum(x, 3), ShapeError);
  CHECK_THROWS_AS(max_pool2x2(Tensor::zeros({1, 3, 4})), ShapeError);
}

TEST_CASE("log and division guard their domains") {
  CHECK_THROWS_AS(log(Tensor::from_data({2}, {1.0, 0.0})), std::domain_error);
  CHECK_THROWS(div(Tensor::full({2}, 1.0), Tensor::from_data({2}, {1.0, 0.0})));
}

TEST_CASE("branch trace separates relu regions") {
  auto signature = [](double v) {
    BranchTrace trace;
    relu(Tensor::from_data({2}, {v, 1.0}));
    return trace.signature();
  };
  CHECK(signature(0.3) == signature(0.7));
  CHECK(signature(0.3) != signature(-0.3));
}

}  // TEST_SUITE
