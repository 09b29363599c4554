#pragma once

// Likelihood attacks on the flow: signed-gradient PGD on the summed component
// losses, the auto-weighted variant (AW-PGD) that reweights components by the
// softmax of their clamped positive increments, uniform random noise, and the
// single-source universality transfer experiment.
//
// Component losses are in bits per dimension of the component itself, so the
// per-component cap `bound` is scale free.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rifl/csv.hpp"
#include "rifl/flow.hpp"
#include "rifl/image.hpp"

namespace rifl {

enum class AttackMode { pgd, awpgd, random };

std::string to_string(AttackMode mode);
/// Accepts "pgd", "awpgd", "random"; throws std::invalid_argument otherwise.
AttackMode parse_attack_mode(const std::string& name);

struct AttackConfig {
  int epsilon = 2;     // l_inf radius in pixel levels
  int alpha = 1;       // step in pixel levels
  int iters = 10;
  double bound = 8.0;  // per-component bpd cap (AW-PGD)
  AttackMode mode = AttackMode::pgd;
  std::uint64_t seed = 0;  // random mode only

  // Switches used to check AW-PGD against PGD; the defaults give full AW-PGD.
  bool clamp_losses = true;
  bool force_uniform_weights = false;

  void validate() const;
};

struct AttackStep {
  int iteration = 0;
  std::array<double, 3> loss{};     // fo1, fo2, mf bpd at the point the gradient was taken
  std::array<double, 3> clamped{};
  std::array<double, 3> delta{};
  std::array<double, 3> weight{};
  double weighted_loss = 0.0;
  int linf = 0;  // ||x_adv - x||_inf after the step
};

struct AttackTrace {
  AttackMode mode = AttackMode::pgd;
  int epsilon = 0;
  std::vector<AttackStep> steps;
  Image adversarial;
  LossBreakdown clean_rate;  // model rates
  LossBreakdown adv_rate;
  double clean_realized_bpd = 0.0;  // from the codec
  double adv_realized_bpd = 0.0;
  double clean_cr = 0.0;
  double adv_cr = 0.0;
};

/// Attacks every image; images are processed in mini-batches but each trace
/// is exactly what a single-image run would produce.
std::vector<AttackTrace> attack_images(const FlowModel& model, const std::vector<Image>& images,
                                       const AttackConfig& cfg);
AttackTrace pgd_attack(const FlowModel& model, const Image& x, AttackConfig cfg);
AttackTrace awpgd_attack(const FlowModel& model, const Image& x, AttackConfig cfg);

/// Adversarial images only (no codec evaluation); used inside training loops.
std::vector<Image> pgd_examples(const FlowModel& model, const std::vector<Image>& images, int epsilon, int iters);

/// Each pixel moves by an integer drawn uniformly from [-epsilon, epsilon], then clamped to [0, 255].
Image random_noise(const Image& x, int epsilon, std::uint64_t seed);

/// Adds a signed perturbation and clamps to [0, 255].
Image apply_perturbation(const Image& x, const std::vector<int>& delta);
std::vector<int> perturbation(const Image& clean, const Image& adv);

/// One row per iteration.
CsvTable trace_csv(const AttackTrace& trace);

struct AttackSummaryRow {
  std::string attack;
  int epsilon = 0;
  double mean_bpd = 0.0;        // realized
  double mean_cr = 0.0;         // realized
  double mean_model_bpd = 0.0;  // from the likelihood
};

/// Clean row (attack "clean", epsilon 0) comes from the clean side of the traces.
AttackSummaryRow summarize(const std::vector<AttackTrace>& traces, bool clean_side);
CsvTable summary_csv(const std::vector<AttackSummaryRow>& rows);

struct UniversalityRow {
  AttackMode attack = AttackMode::pgd;
  int epsilon = 0;
  double clean_cr = 0.0;        // mean over repeats of the clean mean CR of the targets
  double transferred_cr = 0.0;  // mean over repeats of the perturbed mean CR
  std::vector<std::size_t> sources;
};

/// For each attack in {pgd, awpgd} and each epsilon: pick a random source
/// image, attack it, add its perturbation to every other image, and average the
/// realized CR over those; repeat `repeats` times and average the means.
std::vector<UniversalityRow> universality_eval(const FlowModel& model, const std::vector<Image>& dataset,
                                               AttackConfig cfg, const std::vector<int>& epsilons,
                                               int repeats = 20, std::uint64_t seed = 0);
CsvTable universality_csv(const std::vector<UniversalityRow>& rows);

}  // namespace rifl
