#pragma once

// Training: clean likelihood fitting, R-IDF (weight decay plus squared
// spectral norm on the first factor-out network), adversarial, hybrid and
// R-IDF+hybrid modes.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rifl/csv.hpp"
#include "rifl/flow.hpp"
#include "rifl/image.hpp"

namespace rifl {

enum class TrainMode { clean, ridf, adv, hybrid, ridf_hybrid };

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);
bool uses_regularizer(TrainMode mode);

struct TrainConfig {
  TrainMode mode = TrainMode::clean;
  double rho1 = 2.0;  // squared Frobenius weight
  double rho2 = 0.5;  // squared spectral-norm weight
  int adv_iters = 10;
  int adv_epsilon = 5;
  double mixing_rate = 0.5;  // adversarial share of each hybrid batch

  double learning_rate = 1e-3;
  double lr_decay = 0.999;  // per epoch
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  int epochs = 10;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Raised when a loss turns non-finite; names the batch and component.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Largest singular value of a row-major (rows x cols) matrix by power
/// iteration on W^T W. The right singular vector persists between calls.
class PowerIteration {
 public:
  PowerIteration() = default;
  PowerIteration(std::size_t cols, std::uint64_t seed);

  /// `iters` plain iterations from the stored vector; returns the estimate.
  double step(std::span<const double> w, std::size_t rows, std::size_t cols, int iters = 1);
  /// Iterates until the relative change of the estimate and the relative
  /// eigen-residual fall below `tol` (or max_iters is hit).
  double converge(std::span<const double> w, std::size_t rows, std::size_t cols, double tol = 1e-6,
                  int max_iters = 20000);

  const std::vector<double>& u() const { return u_; }  // left vector, unit norm
  const std::vector<double>& v() const { return v_; }  // right vector, unit norm
  double sigma() const { return sigma_; }
  int last_iterations() const { return last_iters_; }

 private:
  void ensure(std::size_t cols);
  std::vector<double> u_, v_;
  double sigma_ = 0.0;
  std::uint64_t seed_ = 0;
  int last_iters_ = 0;
};

/// Fully converged spectral norm; 0 for the zero matrix.
double spectral_norm(std::span<const double> w, std::size_t rows, std::size_t cols, double tol = 1e-6,
                     int max_iters = 20000);

/// Conv kernels as (out, in*kh*kw) matrices.
std::size_t kernel_rows(const Array& kernel);
std::size_t kernel_cols(const Array& kernel);

/// Regularizer state over the first factor-out network's kernels.
class RidfRegularizer {
 public:
  RidfRegularizer(double rho1, double rho2, std::uint64_t seed = 0);

  /// Differentiable rho1 * sum ||W||_F^2 + rho2 * sum sigma(W)^2, sigma taken as
  /// u^T W v with u, v detached after `power_iters` warm-started iterations
  /// (fully converged on first use).
  Array penalty(const FlowModel& model, int power_iters = 1);
  /// Same quantity as a plain number, with fully converged spectral norms.
  double value(const FlowModel& model);

  double rho1() const { return rho1_; }
  double rho2() const { return rho2_; }

 private:
  double rho1_, rho2_;
  std::uint64_t seed_;
  std::vector<PowerIteration> power_;
  bool warmed_ = false;
};

/// Mean total bpd over the batch (LOSS_IDF).
Array idf_loss(const FlowModel& model, const Array& batch);
/// LOSS_IDF + penalty.
Array ridf_loss(const FlowModel& model, const Array& batch, RidfRegularizer& reg, int power_iters = 1);

/// Mean model bpd over images, no gradient.
double mean_bpd(const FlowModel& model, const std::vector<Image>& images);

struct EpochMetrics {
  int epoch = 0;
  TrainMode mode = TrainMode::clean;
  double clean_bpd = 0.0;  // held-out
  double penalty_value = 0.0;
  double wall_clock_seconds = 0.0;
  double train_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
};

/// Trains in place. `heldout` may be empty (clean_bpd is then NaN).
TrainResult train(FlowModel& model, const std::vector<Image>& train_set, const std::vector<Image>& heldout,
                  const TrainConfig& cfg);

CsvTable epoch_csv(const TrainResult& result);

struct AblationRow {
  double rho1 = 0.0;
  double rho2 = 0.0;
  int epsilon = 0;
  double clean_cr = 0.0;
  double attacked_cr = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;        // 4 variants x 5 epsilons
  std::vector<FlowModel> models;        // one per variant, in variant order
  std::vector<TrainResult> trainings;
};

/// Trains the (rho1, rho2) in {(0,0), (2,0), (0,0.5), (2,0.5)} variants from the
/// same initialization and reports PGD-attacked CR on `test` for epsilon 1..5.
AblationResult ablation_suite(const FlowConfig& arch, const std::vector<Image>& train_set,
                              const std::vector<Image>& test, TrainConfig cfg, int attack_iters = 10);
CsvTable ablation_csv(const AblationResult& result);

}  // namespace rifl
