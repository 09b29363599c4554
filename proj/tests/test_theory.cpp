#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "rifl/defense.hpp"
#include "rifl/theory.hpp"

using namespace rifl;

namespace {

AdditiveFlow identity_flow(std::size_t dim) {
  AdditiveFlow f = AdditiveFlow::random(dim, 2, 8, 1, 0.5);
  for (auto& n : f.nets) {
    for (double& v : n.w2.values_mut()) v = 0.0;
    for (double& v : n.b2.values_mut()) v = 0.0;
  }
  return f;
}

}  // namespace

TEST_CASE("Lipschitz estimates of simple maps") {
  const std::vector<double> c(6, 0.5);
  auto triple = estimate_lipschitz([](const Array& x) { return scale(x, 3.0); }, c, 1.0, 2000, 1);
  CHECK(std::abs(triple.L_hat - 3.0) < 1e-9);
  CHECK(triple.samples == 2000);

  auto constant = estimate_lipschitz([](const Array& x) { return Array({x.dim(0), 2}, 7.0); }, c, 1.0, 2000, 1);
  CHECK(constant.L_hat == 0.0);

  CHECK(estimate_lipschitz([](const Array& x) { return x; }, c, 1.0, 100, 0).L_hat ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(estimate_lipschitz([](const Array& x) { return x; }, c, 0.0), std::invalid_argument);
}

TEST_CASE("Lipschitz estimate of a linear map approaches its spectral norm from below") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  const std::size_t n = 12;
  std::vector<double> w(n * n), wt(n * n);
  for (double& x : w) x = g(rng);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) wt[c * n + r] = w[r * n + c];
  const Array wt_arr({n, n}, wt);
  const BatchMap f = [&](const Array& x) { return matmul(x, wt_arr); };
  const double sigma = spectral_norm(w, n, n, 1e-12);

  double prev = 0.0;
  for (std::size_t samples : {100, 1000, 4000, 10000}) {
    const double L = estimate_lipschitz(f, std::vector<double>(n, 0.0), 1.0, samples, 9).L_hat;
    CHECK(L >= prev);  // same seed stream, more samples
    CHECK(L <= sigma * (1 + 1e-9));
    prev = L;
  }
  MESSAGE("L_hat " << prev << " vs sigma " << sigma);
  CHECK(prev > 0.99 * sigma);
}

TEST_CASE("lemma 1 constants") {
  CHECK(lemma1_c1(1, 1, 1) == 7.0);
  CHECK(lemma1_c2(1, 1, 1) == 2.0);
  CHECK(lemma1_c(1, 1, 1) == 9.0);
  CHECK(lemma1_dominant(2, 2, 2) / lemma1_dominant(1, 1, 1) == 32.0);
  // The full constant approaches the b^5 ratio as b grows.
  CHECK(lemma1_c(20, 20, 20) / lemma1_c(10, 10, 10) == doctest::Approx(32.0).epsilon(0.01));
  CHECK(lemma1_c(2, 2, 2) / lemma1_c(1, 1, 1) < 32.0);
}

TEST_CASE("gaussian factor-out density against the closed form") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  const std::size_t n = 5;
  std::vector<double> a(n * n);
  for (double& x : a) x = g(rng);
  const auto q = GaussianFactorOut::linear(a, n, n);
  std::vector<double> y(3 * n), z(3 * n);
  for (double& x : y) x = g(rng);
  for (double& x : z) x = g(rng);
  const Array lp = q.log_density(Array({3, n}, y), Array({3, n}, z));
  for (std::size_t i = 0; i < 3; ++i) {
    double sq = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      double mu = 0.0;
      for (std::size_t c = 0; c < n; ++c) mu += a[r * n + c] * y[i * n + c];
      sq += (z[i * n + r] - mu) * (z[i * n + r] - mu);
    }
    CHECK(lp[i] == doctest::Approx(-0.5 * sq - 0.5 * double(n) * std::log(2 * std::numbers::pi)).epsilon(1e-12));
  }

  // Zero mean, unit scale: log q(z + e) - log q(z) = -(z.e) - |e|^2 / 2.
  const auto q0 = GaussianFactorOut::linear(std::vector<double>(n * n, 0.0), n, n);
  std::vector<double> e(n), ze(n);
  double dot = 0.0, ee = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 0.3 * g(rng);
    ze[j] = z[j] + e[j];
    dot += z[j] * e[j];
    ee += e[j] * e[j];
  }
  const Array ys({1, n}, 0.0);
  const Array z0({1, n}, std::vector<double>(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(n)));
  const double diff = q0.log_density(ys, Array({1, n}, ze))[0] - q0.log_density(ys, z0)[0];
  CHECK(diff == doctest::Approx(-dot - 0.5 * ee).epsilon(1e-12));

  GaussianFactorOut bad = q0;
  bad.sigma = [n](const Array& yy) { return Array({yy.dim(0), n}, -1.0); };
  CHECK_THROWS_AS(bad.log_density(ys, ys), std::domain_error);
  CHECK_THROWS_AS(check_lemma1(bad, 10, 0.1, 0), std::domain_error);
}

TEST_CASE("lemma 1 checker") {
  const auto q = GaussianFactorOut::random(6, 6, 12, 3, 0.8);
  SUBCASE("delta zero") {
    auto r = check_lemma1(q, 500, 0.0, 1);
    CHECK(r.violations == 0);
    CHECK(r.max_observed == 0.0);
    CHECK(r.bound == 0.0);
  }
  SUBCASE("random toy holds with finite slack") {
    for (double delta : {0.1, 1.0}) {
      auto r = check_lemma1(q, 10000, delta, 2);
      CHECK(r.violations == 0);
      CHECK(r.violations_2L == 0);
      CHECK(r.lipschitz.L_hat >= 1.0);  // z passes through the joint map unchanged
      CHECK(r.slack_max > 0.0);
      CHECK(r.slack_max < 1.0);
      CHECK(r.slack_q50 <= r.slack_q90);
      CHECK(r.slack_q90 <= r.slack_q99);
    }
  }
  SUBCASE("linear mean, unit scale: bound specializes") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g;
    std::vector<double> a(36);
    for (double& x : a) x = g(rng) / 3.0;
    auto r = check_lemma1(GaussianFactorOut::linear(a, 6, 6), 10000, 1.0, 3);
    CHECK(r.violations == 0);
    CHECK(r.lipschitz.b3 == 1.0);
    const double s = r.lipschitz.b1 + r.lipschitz.b2;
    const double c = s * s + s + 1 + s;  // C1 + C2 with b3 = 1
    CHECK(r.bound == doctest::Approx(r.lipschitz.L_hat * 1.0 * std::sqrt(6.0) * c).epsilon(1e-12));
  }
}

TEST_CASE("lemma 2 checker") {
  SUBCASE("identity flow") {
    const auto id = identity_flow(8);
    auto r0 = check_lemma2(id, 200, 0.0, 1);
    CHECK(r0.violations == 0);
    CHECK(r0.max_observed == 0.0);
    auto r = check_lemma2(id, 5000, 1.0, 1);
    CHECK(r.lipschitz.L_hat == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.violations == 0);
    CHECK(r.slack_max <= 1.0);
  }
  SUBCASE("trained toy flow, both anchors") {
    AdditiveFlow f = AdditiveFlow::random(6, 4, 12, 2, 0.5);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g;
    std::vector<double> data(256 * 6);
    for (std::size_t i = 0; i < 256; ++i) {
      const double common = g(rng);
      for (std::size_t j = 0; j < 6; ++j) data[i * 6 + j] = common + 0.3 * g(rng);
    }
    const Array x({256, 6}, data);
    const double before = fit_gaussian_flow(f, x, 1, 1e-2);
    const double after = fit_gaussian_flow(f, x, 150, 1e-2);
    CHECK(after < before);
    for (double delta : {0.1, 1.0})
      for (auto anchor : {Lemma2Anchor::clean, Lemma2Anchor::perturbed}) {
        auto r = check_lemma2(f, 10000, delta, 4, 2.0, anchor);
        CHECK(r.violations == 0);
        CHECK(r.check == (anchor == Lemma2Anchor::clean ? "lemma2" : "lemma2_anchor_perturbed"));
      }
  }
}

TEST_CASE("theorem 1 checker") {
  const auto toy = ToyMultiScale::random(16, 6);
  auto z = check_theorem1(toy, 300, 0.0, 1);
  CHECK(z.total.violations == 0);
  CHECK(z.total.max_observed == 0.0);
  CHECK(z.total.bound == 0.0);

  for (double delta : {0.1, 1.0}) {
    auto t = check_theorem1(toy, 10000, delta, 2);
    CHECK(t.total.violations == 0);
    CHECK(t.term_fo1 > t.term_fo2);  // the earlier, larger factor-out carries the larger term
    CHECK(t.dominant_ratio_2b == doctest::Approx(32.0).epsilon(1e-12));
    CHECK(t.c_ratio_2b > 1.0);
    CHECK(t.c_ratio_2b < 32.0);
  }

  // Components add up to the total density.
  Array parts[3];
  const Array x({2, 16}, 0.25);
  const Array total = toy.log_density(x, parts);
  for (std::size_t i = 0; i < 2; ++i) CHECK(total[i] == doctest::Approx(parts[0][i] + parts[1][i] + parts[2][i]));
}

TEST_CASE("additive vs affine coupling probe") {
  const auto id = identity_flow(8);
  CHECK(estimate_lipschitz([&](const Array& x) { return id.forward(x); }, std::vector<double>(8, 0.0), 2.0, 500, 0)
            .L_hat == doctest::Approx(1.0).epsilon(1e-12));

  auto zero = affine_vs_additive_probe(200, 0.5, 3, ScaleMode::zero, 8, 2000);
  CHECK(zero.L_affine == zero.L_additive);
  CHECK(zero.nll_change_affine == zero.nll_change_additive);

  std::size_t wins = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    auto p = affine_vs_additive_probe(4, 0.5, seed, ScaleMode::positive, 4, 256);
    wins += p.L_affine > p.L_additive;
  }
  CHECK(wins == 1000);
}

TEST_CASE("theory suite report") {
  auto s = verify_theory(400, 0);
  CHECK(s.reports.size() == 10);
  CHECK(s.theorems.size() == 2);
  CHECK(s.probes.size() == 4);
  for (const auto& r : s.reports) {
    INFO(summary(r));
    CHECK(r.violations == 0);
  }
  const auto csv = bound_report_csv(s.reports).str();
  CHECK(csv.rfind("check,delta,trials,violations,violations_2L,max_observed,bound,L_hat", 0) == 0);
  CHECK(theorem_csv(s.theorems).rows() == 2);
  CHECK(probe_csv(s.probes).rows() == 4);
  CHECK(summary(s.reports[0]).find("lower bound") != std::string::npos);
}
