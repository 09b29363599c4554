#pragma once

// Numerical checks of the robustness bounds on small continuous Gaussian toys:
// Lipschitz estimation, the factor-out bound (Lemma 1), the main-flow bound
// (Lemma 2), their multi-scale composition (Theorem 1) and an additive vs
// affine coupling probe.
//
// Direction convention: Delta = log p(x*) - log p(x) (log-likelihood, not NLL).

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "rifl/csv.hpp"
#include "rifl/tensor.hpp"

namespace rifl {

/// Batched map on row vectors: (N, in) -> (N, out).
using BatchMap = std::function<Array(const Array&)>;

struct LipschitzEstimate {
  double L_hat = 0.0;  // an empirical lower bound of the true constant
  std::size_t samples = 0;
  double radius = 0.0;
  // Filled by the bound checkers: b1 = max|z|, b2 = max|mu|, b3 = max 1/sigma.
  double b1 = 0.0, b2 = 0.0, b3 = 0.0;
};

/// Max of |f(a) - f(b)| / |a - b| over random pairs in the cube center +- radius
/// (even sample indices) and short directional probes (odd indices) whose
/// direction is refined toward the best one seen. Sample i depends only on
/// the seed and i, so L_hat is non-decreasing in `samples`.
LipschitzEstimate estimate_lipschitz(const BatchMap& f, const std::vector<double>& center, double radius,
                                     std::size_t samples = 10000, std::uint64_t seed = 0);

/// Two-layer tanh MLP on row vectors.
struct DenseNet {
  Array w1, b1, w2, b2;  // w1: (in, hidden), w2: (hidden, out)

  static DenseNet make(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng, double gain);
  Array forward(const Array& x) const;
  std::vector<Array*> parameters();
  std::size_t in() const { return w1.dim(0); }
  std::size_t out() const { return w2.dim(1); }
};

Array tanh(const Array& x);
Array softplus(const Array& x);

/// Continuous additive coupling flow on R^d (d even); volume preserving.
struct AdditiveFlow {
  std::size_t dim = 0;
  std::vector<DenseNet> nets;  // coupling k updates the second half when k is even

  static AdditiveFlow random(std::size_t dim, std::size_t couplings, std::size_t hidden, std::uint64_t seed,
                             double gain);
  Array forward(const Array& x) const;
  std::vector<Array*> parameters();
};

/// Fits `flow` to `data` (N, dim) by maximum likelihood under N(0, I) with Adam.
/// Returns the final mean negative log-likelihood in nats (constant dropped).
double fit_gaussian_flow(AdditiveFlow& flow, const Array& data, int steps, double lr);

/// Gaussian conditional prior q(z | y) = N(mu(y), diag sigma(y)^2).
struct GaussianFactorOut {
  std::size_t y_dim = 0, z_dim = 0;
  BatchMap mu, sigma;

  /// mu = tanh MLP, sigma = sigma_floor + softplus(tanh MLP).
  static GaussianFactorOut random(std::size_t y_dim, std::size_t z_dim, std::size_t hidden, std::uint64_t seed,
                                  double gain, double sigma_floor = 1.0);
  /// mu = A y with A row-major (z_dim x y_dim), sigma = 1.
  static GaussianFactorOut linear(std::vector<double> a, std::size_t y_dim, std::size_t z_dim);

  /// (N) log-densities in nats. Throws std::domain_error if sigma <= 0 anywhere.
  Array log_density(const Array& y, const Array& z) const;
  /// (y, z) -> (z, mu(y), sigma(y)); the Lipschitz constant used by Lemma 1.
  BatchMap joint_map() const;
};

/// Lemma 1 constants: C1 = (b1+b2)^2 b3^3 + (b1+b2) b3^2 + b3, C2 = (b1+b2) b3.
double lemma1_c1(double b1, double b2, double b3);
double lemma1_c2(double b1, double b2, double b3);
inline double lemma1_c(double b1, double b2, double b3) { return lemma1_c1(b1, b2, b3) + lemma1_c2(b1, b2, b3); }
/// The b^5 term (b1+b2)^2 b3^3 of C1.
double lemma1_dominant(double b1, double b2, double b3);

struct BoundReport {
  std::string check;
  double delta = 0.0;
  std::size_t trials = 0;
  std::size_t violations = 0;     // observed beyond the bound by more than kBoundTolerance
  std::size_t violations_2L = 0;  // same with 2 * L_hat
  double max_observed = 0.0;      // max |Delta log p|
  double bound = 0.0;             // largest bound magnitude over trials
  LipschitzEstimate lipschitz;
  // Quantiles of observed / bound (0 where the bound is 0).
  double slack_q50 = 0.0, slack_q90 = 0.0, slack_q99 = 0.0, slack_max = 0.0;
  std::string note;
};

inline constexpr double kBoundTolerance = 1e-9;

/// |log q(z|y) - log q*(z*|y*)| <= L delta sqrt(n) C(B) for |y - y*|, |z - z*| <= delta.
/// y and z are drawn uniformly from [-radius, radius]; perturbations have norm delta.
BoundReport check_lemma1(const GaussianFactorOut& net, std::size_t trials, double delta, std::uint64_t seed,
                         double radius = 2.0);

enum class Lemma2Anchor { clean, perturbed };  // norm of f(x) or of f(x*)

/// log p(z*) - log p(z) >= -L delta |z| - delta^2 / 2 with z = f(x), z ~ N(0, I).
BoundReport check_lemma2(const AdditiveFlow& flow, std::size_t trials, double delta, std::uint64_t seed,
                         double radius = 2.0, Lemma2Anchor anchor = Lemma2Anchor::clean);

/// Two-level multi-scale Gaussian toy: x (dim) -> flow1 -> (y1, z1);
/// y1 -> flow2 -> (y2, z2); base z3 = y2 ~ N(0, I).
struct ToyMultiScale {
  std::size_t dim = 16;
  AdditiveFlow flow1, flow2;
  GaussianFactorOut fo1, fo2;

  static ToyMultiScale random(std::size_t dim, std::uint64_t seed, double gain = 0.5);
  struct Parts {
    Array y1, z1, y2, z2;
  };
  Parts split(const Array& x) const;
  /// (N) log p(x) in nats and its three components.
  Array log_density(const Array& x, Array* components = nullptr) const;
};

struct TheoremReport {
  BoundReport total;
  double term_fo1 = 0.0;   // L delta sqrt(n1) C(B1)
  double term_fo2 = 0.0;
  double term_base = 0.0;  // mean of L1 delta |z3| + delta^2 / 2
  double b = 0.0;          // max(b1, b2, b3) over both factor-outs
  double dominant_ratio_2b = 0.0;  // lemma1_dominant at 2b over b
  double c_ratio_2b = 0.0;         // full C(B) at 2b over b
};

/// log p(x*) - log p(x) >= -sum_k L_k delta sqrt(n_k) C(B_k) - L1 delta |z3| - delta^2 / 2.
TheoremReport check_theorem1(const ToyMultiScale& model, std::size_t trials, double delta, std::uint64_t seed,
                             double radius = 2.0);

enum class ScaleMode { zero, positive };

struct ProbeReport {
  ScaleMode mode = ScaleMode::positive;
  double delta = 0.0;
  double L_additive = 0.0;
  double L_affine = 0.0;
  double nll_change_additive = 0.0;  // mean |NLL(x*) - NLL(x)| in nats
  double nll_change_affine = 0.0;
};

/// One coupling on R^dim sharing its translation net between the additive and
/// the affine variant; the affine scale is exp(s(x1)) with s = softplus(net)
/// (positive) or s = 0.
ProbeReport affine_vs_additive_probe(std::size_t trials, double delta, std::uint64_t seed,
                                     ScaleMode mode = ScaleMode::positive, std::size_t dim = 8,
                                     std::size_t lipschitz_samples = 10000);

CsvTable bound_report_csv(const std::vector<BoundReport>& reports);
CsvTable theorem_csv(const std::vector<TheoremReport>& reports);
CsvTable probe_csv(const std::vector<ProbeReport>& probes);
std::string summary(const BoundReport& r);

struct TheorySuite {
  std::vector<BoundReport> reports;
  std::vector<TheoremReport> theorems;
  std::vector<ProbeReport> probes;
};

/// Lemma 1 (random and linear toys), Lemma 2 (both anchors, trained toy flow)
/// and Theorem 1, each at delta 0.1 and 1.0, plus the coupling probe.
TheorySuite verify_theory(std::size_t trials, std::uint64_t seed);

}  // namespace rifl
