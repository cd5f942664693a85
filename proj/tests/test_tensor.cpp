#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "oracles.hpp"
#include "sinuscl/tensor.hpp"

using namespace sinuscl;
using nd::Tensor;
using nd::Tensord;
using nd::Tensorf;
using Catch::Approx;

namespace {

std::vector<double> random_vec(size_t n, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

std::vector<float> to_f(const std::vector<double>& v) {
  return std::vector<float>(v.begin(), v.end());
}

// Runs loss(x) through the graph both analytically and by central differences.
void check_gradient(const std::function<Tensord(const Tensord&)>& fn, nd::Shape shape,
                    uint64_t seed, double lo = -1.0, double hi = 1.0, double rel = 1e-3,
                    double abs = 1e-5) {
  auto x0 = random_vec(static_cast<size_t>(nd::numel_of(shape)), seed, lo, hi);
  auto x = Tensord::from_data(shape, x0, true);
  auto loss = fn(x);
  loss.backward();
  std::vector<double> analytic(x.grad().begin(), x.grad().end());
  auto numeric = oracles::central_differences(
      [&](const std::vector<double>& v) {
        nd::NoGradGuard ng;
        return fn(Tensord::from_data(shape, v)).item();
      },
      x0);
  double worst = 0;
  bool ok = oracles::grads_close(analytic, numeric, rel, abs, &worst);
  INFO("worst relative gradient error " << worst);
  CHECK(ok);
}

}  // namespace

TEST_CASE("elementwise add and mul match definitions") {
  auto a = Tensorf::from_data({2}, {1.f, 2.f});
  auto b = Tensorf::from_data({2}, {3.f, 4.f});
  auto c = nd::add(a, b);
  CHECK(c.data()[0] == 4.f);
  CHECK(c.data()[1] == 6.f);

  auto x = Tensorf::from_data({3}, {1.f, -2.f, 0.5f}, true);
  auto one = Tensorf::full({3}, 1.f);
  auto y = nd::mul(x, one);
  for (size_t i = 0; i < 3; ++i) CHECK(y.data()[i] == x.data()[i]);
  nd::sum(y).backward();
  for (float g : x.grad()) CHECK(g == 1.f);
}

TEST_CASE("shape mismatch names both shapes") {
  auto a = Tensorf::zeros({2, 3});
  auto b = Tensorf::zeros({4});
  try {
    nd::add(a, b);
    FAIL("expected shape error");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4]") != std::string::npos);
  }
}

TEST_CASE("broadcasting equals explicit tiling bitwise") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto av = random_vec(6, 100 + trial);
    auto bv = random_vec(3, 200 + trial);
    auto a = Tensorf::from_data({2, 3}, to_f(av));
    auto b = Tensorf::from_data({3}, to_f(bv));
    auto br = nd::add(a, b);
    auto tiled = oracles::tile_to(bv, {3}, {2, 3});
    auto explicit_sum = nd::add(a, Tensorf::from_data({2, 3}, to_f(tiled)));
    for (int i = 0; i < 6; ++i) CHECK(br.data()[i] == explicit_sum.data()[i]);
  }
  // higher-rank case with both operands broadcasting
  auto a = Tensorf::from_data({2, 1, 2}, to_f(random_vec(4, 11)));
  auto b = Tensorf::from_data({3, 1}, to_f(random_vec(3, 12)));
  auto br = nd::mul(a, b);
  REQUIRE(br.shape() == nd::Shape{2, 3, 2});
  std::vector<double> av(a.data().begin(), a.data().end());
  std::vector<double> bv(b.data().begin(), b.data().end());
  auto ta = oracles::tile_to(av, {2, 1, 2}, {2, 3, 2});
  auto tb = oracles::tile_to(bv, {3, 1}, {2, 3, 2});
  for (int i = 0; i < 12; ++i)
    CHECK(br.data()[i] == Approx(ta[i] * tb[i]).margin(1e-7));
}

TEST_CASE("broadcast gradients reduce over the tiled axes") {
  // (2,3) + (3,) : db must sum over the leading axis
  auto a = Tensord::from_data({2, 3}, random_vec(6, 31), true);
  auto b = Tensord::from_data({3}, random_vec(3, 32), true);
  nd::sum(nd::mul(a, b)).backward();
  for (int j = 0; j < 3; ++j) {
    double expect = a.data()[j] + a.data()[3 + j];
    CHECK(b.grad()[j] == Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("fan-out accumulates additively") {
  auto x = Tensorf::from_data({3}, {1.f, 2.f, 3.f}, true);
  auto y = nd::add(x, x);
  nd::sum(y).backward();
  for (float g : x.grad()) CHECK(g == 2.f);
}

TEST_CASE("matmul identity and hand example") {
  auto eye = Tensorf::from_data({2, 2}, {1.f, 0.f, 0.f, 1.f});
  auto x = Tensorf::from_data({2, 2}, {1.f, 2.f, 3.f, 4.f});
  auto y = nd::matmul(x, eye);
  for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == x.data()[i]);

  CHECK_THROWS_AS(nd::matmul(x, Tensorf::zeros({3, 2})), std::invalid_argument);
  CHECK_THROWS_AS(nd::matmul(x, Tensorf::zeros({2})), std::invalid_argument);
}

TEST_CASE("matmul matches triple-loop oracle") {
  auto av = random_vec(20, 41);
  auto bv = random_vec(15, 42);
  auto c = nd::matmul(Tensorf::from_data({4, 5}, to_f(av)), Tensorf::from_data({5, 3}, to_f(bv)));
  auto ref = oracles::matmul_loops(av, bv, 4, 5, 3);
  for (int i = 0; i < 12; ++i) CHECK(c.data()[i] == Approx(ref[i]).margin(1e-5));
}

TEST_CASE("matmul backward formulas") {
  check_gradient(
      [](const Tensord& x) {
        auto w = Tensord::from_data({3, 2}, random_vec(6, 77));
        return nd::sum(nd::mul(nd::matmul(x, w), nd::matmul(x, w)));
      },
      {2, 3}, 43);
}

TEST_CASE("conv3d identity kernel") {
  auto in = Tensorf::from_data({1, 1, 3, 3, 3}, to_f(random_vec(27, 51)));
  auto k = Tensorf::from_data({1, 1, 1, 1, 1}, {1.f});
  auto out = nd::conv3d(in, k, 1, 0);
  REQUIRE(out.shape() == nd::Shape{1, 1, 3, 3, 3});
  for (int i = 0; i < 27; ++i) CHECK(out.data()[i] == in.data()[i]);
}

TEST_CASE("conv3d all-ones kernel on constant input") {
  auto in = Tensorf::full({1, 1, 4, 4, 4}, 1.f);
  auto k = Tensorf::full({1, 1, 2, 2, 2}, 1.f);
  auto out = nd::conv3d(in, k, 2, 0);
  REQUIRE(out.shape() == nd::Shape{1, 1, 2, 2, 2});
  for (float v : out.data()) CHECK(v == 8.f);
}

TEST_CASE("conv3d matches 6-nested-loop oracle") {
  for (int trial = 0; trial < 4; ++trial) {
    int stride = 1 + trial % 2;
    int pad = trial / 2;
    auto inv = random_vec(2 * 6 * 6 * 6, 600 + trial);
    auto kv = random_vec(3 * 2 * 3 * 3 * 3, 700 + trial);
    auto out = nd::conv3d(Tensorf::from_data({1, 2, 6, 6, 6}, to_f(inv)),
                          Tensorf::from_data({3, 2, 3, 3, 3}, to_f(kv)), stride, pad);
    int od, oh, ow;
    auto ref = oracles::conv3d_loops(inv, 2, 6, 6, 6, kv, 3, 3, 3, 3, stride, pad, od, oh, ow);
    REQUIRE(out.shape() == nd::Shape{1, 3, od, oh, ow});
    for (size_t i = 0; i < ref.size(); ++i)
      CHECK(out.data()[i] == Approx(ref[i]).margin(1e-4));
  }
}

TEST_CASE("conv3d batched equals per-sample") {
  auto inv = random_vec(2 * 2 * 5 * 5 * 5, 81);
  auto kv = random_vec(3 * 2 * 3 * 3 * 3, 82);
  auto k = Tensorf::from_data({3, 2, 3, 3, 3}, to_f(kv));
  auto both = nd::conv3d(Tensorf::from_data({2, 2, 5, 5, 5}, to_f(inv)), k, 1, 1);
  size_t half = inv.size() / 2;
  auto first = nd::conv3d(
      Tensorf::from_data({1, 2, 5, 5, 5}, to_f({inv.begin(), inv.begin() + half})), k, 1, 1);
  auto second = nd::conv3d(
      Tensorf::from_data({1, 2, 5, 5, 5}, to_f({inv.begin() + half, inv.end()})), k, 1, 1);
  size_t out_half = both.data().size() / 2;
  for (size_t i = 0; i < out_half; ++i) {
    CHECK(both.data()[i] == first.data()[i]);
    CHECK(both.data()[out_half + i] == second.data()[i]);
  }
}

TEST_CASE("conv3d rejects oversized kernels") {
  auto in = Tensorf::zeros({1, 1, 3, 3, 3});
  auto k = Tensorf::zeros({1, 1, 4, 4, 4});
  CHECK_THROWS_AS(nd::conv3d(in, k, 1, 0), std::invalid_argument);
}

TEST_CASE("conv3d gradients match finite differences") {
  auto kv = random_vec(2 * 1 * 2 * 2 * 2, 91);
  check_gradient(
      [&](const Tensord& x) {
        auto k = Tensord::from_data({2, 1, 2, 2, 2}, kv);
        auto y = nd::conv3d(x, k, 1, 1);
        return nd::sum(nd::mul(y, y));
      },
      {1, 1, 4, 4, 4}, 92);
  auto xv = random_vec(1 * 1 * 4 * 4 * 4, 93);
  check_gradient(
      [&](const Tensord& k) {
        auto x = Tensord::from_data({1, 1, 4, 4, 4}, xv);
        auto y = nd::conv3d(x, k, 2, 0);
        return nd::sum(nd::mul(y, y));
      },
      {2, 1, 2, 2, 2}, 94);
}

TEST_CASE("relu definition and subgradient at zero") {
  auto x = Tensorf::from_data({3}, {-1.f, 0.f, 2.f}, true);
  auto y = nd::relu(x);
  CHECK(y.data()[0] == 0.f);
  CHECK(y.data()[1] == 0.f);
  CHECK(y.data()[2] == 2.f);
  nd::sum(y).backward();
  CHECK(x.grad()[0] == 0.f);
  CHECK(x.grad()[1] == 0.f);  // derivative at exactly 0 is 0
  CHECK(x.grad()[2] == 1.f);
}

TEST_CASE("mean gradient is 1/n") {
  auto x = Tensorf::from_data({4}, {1.f, 2.f, 3.f, 4.f}, true);
  nd::mean(x).backward();
  for (float g : x.grad()) CHECK(g == 0.25f);
}

TEST_CASE("log domain error and exp(log(x)) gradient") {
  CHECK_THROWS_AS(nd::log(Tensorf::from_data({2}, {1.f, 0.f})), std::domain_error);
  CHECK_THROWS_AS(nd::log(Tensorf::from_data({1}, {-2.f})), std::domain_error);
  CHECK_THROWS_AS(nd::sqrt(Tensorf::from_data({1}, {-0.5f})), std::domain_error);
  // exp(log(x)) has gradient 1 for x > 0
  auto x = Tensord::from_data({5}, random_vec(5, 13, 0.2, 1.5), true);
  nd::sum(nd::exp(nd::log(x))).backward();
  for (double g : x.grad()) CHECK(g == Approx(1.0).epsilon(1e-9));
}

TEST_CASE("reductions along axes") {
  auto x = Tensorf::from_data({2, 3}, {1.f, 2.f, 3.f, 4.f, 5.f, 6.f}, true);
  auto s1 = nd::sum_along(x, 1);
  REQUIRE(s1.shape() == nd::Shape{2});
  CHECK(s1.data()[0] == 6.f);
  CHECK(s1.data()[1] == 15.f);
  auto s0 = nd::sum_along(x, 0, true);
  REQUIRE(s0.shape() == nd::Shape{1, 3});
  CHECK(s0.data()[1] == 7.f);

  auto m = nd::max_along(x, 1, true);
  REQUIRE(m.shape() == nd::Shape{2, 1});
  CHECK(m.data()[0] == 3.f);
  CHECK(m.data()[1] == 6.f);
  nd::sum(m).backward();
  std::vector<float> expect = {0, 0, 1, 0, 0, 1};
  for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == expect[i]);
}

TEST_CASE("global_avg_pool averages spatial axes") {
  auto x = Tensorf::from_data({1, 2, 2, 1, 1}, {1.f, 3.f, 10.f, 20.f}, true);
  auto y = nd::global_avg_pool(x);
  REQUIRE(y.shape() == nd::Shape{1, 2});
  CHECK(y.data()[0] == 2.f);
  CHECK(y.data()[1] == 15.f);
  nd::sum(y).backward();
  for (float g : x.grad()) CHECK(g == 0.5f);
}

TEST_CASE("l2_normalize rows") {
  auto x = Tensorf::from_data({1, 2}, {3.f, 4.f});
  auto y = nd::l2_normalize(x);
  CHECK(y.data()[0] == Approx(0.6).margin(1e-6));
  CHECK(y.data()[1] == Approx(0.8).margin(1e-6));

  auto unit = Tensorf::from_data({1, 2}, {0.f, 1.f});
  auto u = nd::l2_normalize(unit);
  CHECK(u.data()[0] == 0.f);
  CHECK(u.data()[1] == 1.f);

  CHECK_THROWS_AS(nd::l2_normalize(Tensorf::zeros({1, 3})), std::invalid_argument);

  check_gradient(
      [](const Tensord& x) {
        auto w = Tensord::from_data({1, 4}, {0.3, -0.7, 1.1, 0.4});
        return nd::sum(nd::mul(nd::l2_normalize(x), w));
      },
      {2, 4}, 17, 0.2, 1.0);
}

TEST_CASE("backward requires scalar and handles linear/quadratic cases") {
  auto x = Tensorf::from_data({3}, {1.f, -2.f, 0.5f}, true);
  CHECK_THROWS_AS(nd::add(x, x).backward(), std::invalid_argument);

  nd::sum(x).backward();
  for (float g : x.grad()) CHECK(g == 1.f);

  auto y = Tensorf::from_data({3}, {1.f, -2.f, 0.5f}, true);
  nd::sum(nd::mul(y, y)).backward();
  for (int i = 0; i < 3; ++i) CHECK(y.grad()[i] == 2.f * y.data()[i]);
}

TEST_CASE("composite graph gradient matches central differences") {
  check_gradient(
      [](const Tensord& x) {
        auto a = nd::relu(x);
        auto b = nd::exp(nd::mul_scalar(x, -0.5));
        auto c = nd::add(nd::mul(a, b), nd::mul_scalar(x, 0.25));
        auto m = nd::max_along(c, 0, true);
        return nd::add(nd::sum(nd::sub(c, m)), nd::mean(nd::mul(c, c)));
      },
      {6}, 123);
}

TEST_CASE("gradient-check property over every differentiable primitive") {
  // randomized inputs in [-1,1]; positives shifted where the domain needs it
  for (uint64_t seed = 0; seed < 3; ++seed) {
    check_gradient([](const Tensord& x) { return nd::sum(nd::relu(x)); }, {7}, 1000 + seed);
    check_gradient([](const Tensord& x) { return nd::sum(nd::exp(x)); }, {7}, 1100 + seed);
    check_gradient([](const Tensord& x) { return nd::sum(nd::log(x)); }, {7}, 1200 + seed, 0.3,
                   1.6);
    check_gradient([](const Tensord& x) { return nd::sum(nd::sqrt(x)); }, {7}, 1300 + seed, 0.3,
                   1.6);
    check_gradient([](const Tensord& x) { return nd::mean(nd::mul(x, x)); }, {4, 3},
                   1400 + seed);
    check_gradient(
        [](const Tensord& x) {
          auto b = Tensord::from_data({3}, {0.5, -0.25, 1.5});
          return nd::sum(nd::mul(nd::div(x, b), nd::add(x, b)));
        },
        {4, 3}, 1500 + seed);
    check_gradient(
        [](const Tensord& x) { return nd::sum(nd::max_along(x, 1, false)); }, {3, 5},
        1600 + seed);
    check_gradient(
        [](const Tensord& x) {
          auto pooled = nd::global_avg_pool(x);
          return nd::sum(nd::mul(pooled, pooled));
        },
        {2, 2, 3}, 1700 + seed);
    check_gradient(
        [](const Tensord& x) {
          return nd::sum(nd::mul(nd::reshape(x, {6}), nd::reshape(x, {6})));
        },
        {2, 3}, 1800 + seed);
    check_gradient(
        [seed](const Tensord& x) {
          return nd::sum(nd::mul(nd::transpose2d(x), Tensord::from_data(
                                                         {3, 2}, random_vec(6, 1900 + seed))));
        },
        {2, 3}, 1950 + seed);
  }
}

TEST_CASE("forward and backward are deterministic") {
  auto run = [](uint64_t seed) {
    auto x = Tensorf::from_data({4, 4}, to_f(random_vec(16, seed)), true);
    auto w = Tensorf::from_data({4, 4}, to_f(random_vec(16, seed + 1)), true);
    auto y = nd::sum(nd::relu(nd::matmul(x, w)));
    y.backward();
    std::vector<float> out(y.data().begin(), y.data().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  auto a = run(5);
  auto b = run(5);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("no-grad mode records no history") {
  nd::NoGradGuard ng;
  auto x = Tensorf::from_data({2}, {1.f, 2.f}, true);
  auto y = nd::mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("detach cuts the graph") {
  auto x = Tensorf::from_data({2}, {2.f, 3.f}, true);
  auto y = nd::mul(x, x).detach();
  CHECK_FALSE(y.requires_grad());
  auto z = nd::sum(nd::mul(x, y));
  z.backward();
  CHECK(x.grad()[0] == 4.f);  // y treated as constant
  CHECK(x.grad()[1] == 9.f);
}
