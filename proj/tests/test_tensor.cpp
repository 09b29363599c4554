#include <cmath>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "rifl/tensor.hpp"

using namespace rifl;

namespace {

Array random_param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = d(rng);
  return Array::parameter(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("conv2d with identity 1x1 kernel leaves input unchanged") {
  Array x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Array k({1, 1, 1, 1}, {1.0});
  Array y = conv2d(x, k, 0);
  CHECK(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("conv2d sums a 2x2 window") {
  Array x({1, 1, 2, 2}, {1, 2, 3, 4});
  Array k({1, 1, 2, 2}, {1, 1, 1, 1});
  Array y = conv2d(x, k, 0);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == 10.0);
}

TEST_CASE("conv2d zero padding keeps spatial size for 3x3 kernels") {
  Array x({1, 1, 2, 2}, {1, 2, 3, 4});
  Array k({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  Array y = conv2d(x, k, 1);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  // every output window covers the whole 2x2 input
  for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == 10.0);
}

TEST_CASE("space_to_depth and depth_to_space are inverse") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> d(0, 255);
  std::vector<double> v(2 * 3 * 4 * 6);
  for (double& x : v) x = d(rng);
  Array x({2, 3, 4, 6}, v);
  Array s = space_to_depth(x);
  CHECK(s.shape() == Shape{2, 12, 2, 3});
  Array back = depth_to_space(s);
  REQUIRE(back.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(back[i] == x[i]);
}

TEST_CASE("space_to_depth channel layout") {
  Array x({1, 1, 2, 2}, {1, 2, 3, 4});
  Array s = space_to_depth(x);
  // channel dy*2 + dx holds pixel (dy, dx)
  CHECK(s[0] == 1);
  CHECK(s[1] == 2);
  CHECK(s[2] == 3);
  CHECK(s[3] == 4);
}

TEST_CASE("channel split and concat round trip") {
  Array x({2, 4, 1, 2}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  Array a = channel_split(x, 0, 1);
  Array b = channel_split(x, 1, 3);
  CHECK(a.shape() == Shape{2, 1, 1, 2});
  CHECK(b[0] == 2);
  Array c = channel_concat(a, b);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(c[i] == x[i]);
}

TEST_CASE("shape errors name the primitive and both shapes") {
  Array a({2, 3}, 1.0);
  Array b({3, 3}, 1.0);
  try {
    (void)add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(3, 3)") != std::string::npos);
  }
  CHECK_THROWS_AS((void)matmul(a, a), ShapeError);
  CHECK_THROWS_AS((void)conv2d(Array({1, 2, 3, 3}), Array({1, 3, 3, 3}), 1), ShapeError);
  CHECK_THROWS_AS((void)space_to_depth(Array({1, 1, 3, 2})), ShapeError);
}

TEST_CASE("backward of sum gives ones") {
  Array x = Array::parameter({2, 3}, {1, -2, 3, 0.5, 7, 8});
  Tape tape;
  Array root = sum(x);
  tape.backward(root);
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum of squares") {
  Array x = Array::parameter({1}, {3.0});
  Tape tape;
  Array root = sum(mul(x, x));
  tape.backward(root);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward errors") {
  SUBCASE("non-scalar root") {
    Array x = Array::parameter({2}, {1, 2});
    Tape tape;
    Array y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
  }
  SUBCASE("empty tape") {
    Tape tape;
    Array s = Array::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(s), std::logic_error);
  }
}

TEST_CASE("tape records in topological order") {
  Array x = Array::parameter({2}, {1, 2});
  Tape tape;
  Array a = exp(x);
  Array b = mul(a, x);
  Array c = sum(b);
  CHECK(a.node_id() < b.node_id());
  CHECK(b.node_id() < c.node_id());
  CHECK(tape.size() == 3);
}

TEST_CASE("no recording without a tape or without tracked inputs") {
  Array x = Array::parameter({2}, {1, 2});
  Array y = exp(x);
  CHECK_FALSE(y.requires_grad());
  Tape tape;
  Array c({2}, 1.0);
  Array z = exp(c);
  CHECK_FALSE(z.requires_grad());
  CHECK(tape.size() == 0);
}

TEST_CASE("round_ste rounds half away from zero") {
  Array x = Array::parameter({6}, {0.4, -0.6, 0.5, -0.5, 2.5, -1.49});
  Tape tape;
  Array r = round_ste(x);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == -1.0);
  CHECK(r[2] == 1.0);
  CHECK(r[3] == -1.0);
  CHECK(r[4] == 3.0);
  CHECK(r[5] == -1.0);
  tape.backward(sum(r));
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("round_ste output is integer valued (property)") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    Array x = random_param({32}, rng, -500.0, 500.0);
    Array r = round_ste(x);
    for (double v : r.values()) CHECK(v == std::floor(v));
  }
}

TEST_CASE("softmax examples") {
  auto u = softmax(std::vector<double>{0, 0, 0});
  for (double w : u) CHECK(w == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  auto h = softmax(std::vector<double>{std::log(2.0), 0, 0});
  CHECK(h[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(h[1] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(h[2] == doctest::Approx(0.25).epsilon(1e-14));
  auto big = softmax(std::vector<double>{1000, 0, 0});
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);
  CHECK(std::isfinite(big[0]));
  CHECK_THROWS_AS(softmax(std::vector<double>{NAN, 0.0}), std::invalid_argument);
}

TEST_CASE("softmax sums to one and is shift invariant (property)") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(-30.0, 30.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + trial % 7);
    for (double& x : v) x = d(rng);
    auto w = softmax(v);
    double s = 0.0;
    for (double x : w) {
      CHECK(x > 0.0);
      s += x;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
    const double c = d(rng);
    std::vector<double> shifted = v;
    for (double& x : shifted) x += c;
    auto w2 = softmax(shifted);
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(w[i] - w2[i]) < 1e-12);
  }
}

TEST_CASE("gradient of each smooth primitive matches central differences (property)") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    Array a = random_param({2, 3, 2, 2}, rng);
    Array b = random_param({2, 3, 2, 2}, rng);
    Array pos = random_param({2, 3, 2, 2}, rng, 0.5, 2.0);
    Array bias = random_param({3}, rng);
    Array m1 = random_param({3, 4}, rng);
    Array m2 = random_param({4, 2}, rng);
    Array mu = random_param({2, 3, 2, 2}, rng, -3.0, 3.0);
    Array ls = random_param({2, 3, 2, 2}, rng, -1.0, 1.5);
    std::vector<double> zv(24);
    std::uniform_int_distribution<int> zi(-4, 4);
    for (double& z : zv) z = zi(rng);
    Array z = Array::parameter({2, 3, 2, 2}, zv);
    Array k = random_param({2, 3, 3, 3}, rng);

    auto f = [&]() {
      Array t1 = mul(add(a, b), sub(a, scale(b, 0.7)));
      Array t2 = add(sigmoid(t1), log(pos));
      Array t3 = add_channel_bias(exp(scale(t2, 0.3)), bias);
      Array sq = space_to_depth(t3);
      Array back = depth_to_space(add_scalar(sq, 0.25));
      Array c = channel_concat(channel_split(back, 0, 1), channel_split(back, 1, 2));
      Array conv = conv2d(c, k, 1);
      Array mm = matmul(m1, m2);
      Array lp = disc_logistic_logpmf(z, mu, ls);
      Array per = sum_per_sample(mul(conv, conv));
      return add(add(sum(per), mean(tile_batch(mm, 2))), add(sum(lp), sum(reshape(c, {24}))));
    };
    std::vector<Array*> leaves{&a, &b, &pos, &bias, &m1, &m2, &mu, &ls, &z, &k};
    {
      Tape tape;
      Array root = f();
      tape.backward(root);
    }
    auto value = [&]() {
      NoGradScope ng;
      return f().item();
    };
    CHECK(testing::max_gradient_error(value, leaves) < 1e-4);
  }
}

TEST_CASE("random 3-layer conv net gradient matches central differences") {
  std::mt19937_64 rng(42);
  Array x = random_param({2, 2, 5, 5}, rng);
  Array w1 = random_param({4, 2, 3, 3}, rng, -0.5, 0.5);
  Array b1 = random_param({4}, rng, -0.1, 0.1);
  Array w2 = random_param({4, 4, 3, 3}, rng, -0.5, 0.5);
  Array b2 = random_param({4}, rng, -0.1, 0.1);
  Array w3 = random_param({1, 4, 3, 3}, rng, -0.5, 0.5);
  auto f = [&]() {
    Array h = relu(add_channel_bias(conv2d(x, w1, 1), b1));
    h = relu(add_channel_bias(conv2d(h, w2, 1), b2));
    Array o = conv2d(h, w3, 1);
    return sum(mul(o, o));
  };
  {
    Tape tape;
    Array root = f();
    tape.backward(root);
  }
  auto value = [&]() {
    NoGradScope ng;
    return f().item();
  };
  CHECK(testing::max_gradient_error(value, {&x, &w1, &b1, &w2, &b2, &w3}) < 1e-4);
}

TEST_CASE("forward values are deterministic") {
  auto run = []() {
    std::mt19937_64 rng(99);
    Array x = random_param({1, 3, 6, 6}, rng);
    Array w = random_param({5, 3, 3, 3}, rng);
    Array y = sigmoid(conv2d(x, w, 1));
    return std::vector<double>(y.values().begin(), y.values().end());
  };
  CHECK(run() == run());
}
