// Acceptance run: one PASS/FAIL line per criterion, with the measurements
// behind each verdict. Exit code is nonzero when any criterion fails.

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "fd_oracle.hpp"
#include "model_fixtures.hpp"
#include "rifl/attacks.hpp"
#include "rifl/codec.hpp"
#include "rifl/config.hpp"
#include "rifl/dataset.hpp"
#include "rifl/defense.hpp"
#include "rifl/theory.hpp"

using namespace rifl;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

// Shared state: models are trained once and reused across criteria.
struct World {
  ExperimentConfig cfg;
  std::vector<Image> train_set, test_set;
  std::vector<FlowModel> clean;  // one per training seed
  std::vector<TrainResult> clean_runs;
  std::vector<std::vector<AttackTrace>> pgd, awpgd;  // eps 2, iters 10, per seed
};

constexpr int kSeeds = 5;

double mean_of(const std::vector<AttackTrace>& t, bool adv, bool cr) {
  double s = 0.0;
  for (const auto& x : t) s += cr ? (adv ? x.adv_cr : x.clean_cr) : (adv ? x.adv_realized_bpd : x.clean_realized_bpd);
  return s / static_cast<double>(t.size());
}

AttackConfig attack_cfg(AttackMode mode, int epsilon) {
  AttackConfig a;
  a.mode = mode;
  a.epsilon = epsilon;
  a.iters = 10;
  return a;
}

void prepare(World& w) {
  w.cfg.finalize();
  const auto all = load_dataset(w.cfg.dataset);
  std::tie(w.train_set, w.test_set) = split_dataset(all, w.cfg.train_count);
  for (int s = 0; s < kSeeds; ++s) {
    const auto t0 = Clock::now();
    TrainConfig tc = w.cfg.train;
    tc.seed = static_cast<std::uint64_t>(s);
    FlowModel m(w.cfg.arch, tc.seed);
    w.clean_runs.push_back(train(m, w.train_set, w.test_set, tc));
    w.pgd.push_back(attack_images(m, w.test_set, attack_cfg(AttackMode::pgd, 2)));
    w.awpgd.push_back(attack_images(m, w.test_set, attack_cfg(AttackMode::awpgd, 2)));
    w.clean.push_back(std::move(m));
    std::cout << "  [setup] clean model seed " << s << ": held-out bpd "
              << fmt6(w.clean_runs.back().epochs.back().clean_bpd) << " (" << fmt6(seconds_since(t0)) << " s)" << std::endl;
  }
}

Verdict losslessness(World& w) {
  const auto t0 = Clock::now();
  const FlowModel& model = w.clean[0];
  std::size_t ok = 0, total = 0, raw = 0;
  for (const Image& im : synthetic_textures(1000, 12345)) {
    const auto r = compress(model, im, 1);
    raw += r.stream.mode == CodingMode::raw;
    ok += decompress(model, Bitstream::parse(r.stream.serialize()), 1) == im;
    ++total;
  }
  std::size_t fixtures = 0;
  for (const auto& entry : std::filesystem::directory_iterator(RIFL_FIXTURE_DIR)) {
    const Image im = load_dataset(entry.path().string()).front();
    FlowConfig arch = w.cfg.arch;
    arch.channels = im.channels;
    arch.height = im.height;
    arch.width = im.width;
    // RGB fixtures go through the trained model, grayscale ones through a fresh one.
    const FlowModel fresh(arch, 3);
    const FlowModel& m = arch == model.config() ? model : fresh;
    const auto r = compress(m, im, 2);
    ok += decompress(m, Bitstream::parse(r.stream.serialize()), 2) == im;
    ++total;
    ++fixtures;
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << ok << "/" << total << " exact (1000 synthetic, " << raw << " raw-mode; " << fixtures << " fixtures), "
    << fmt6(secs) << " s";
  return {ok == total && fixtures > 0 && secs < 300.0, d.str()};
}

Verdict bijectivity(World&) {
  const auto t0 = Clock::now();
  FlowModel m(FlowConfig{}, 21);
  testing::randomize_parameters(m, 22, 0.05);  // no identity layers
  std::mt19937_64 rng(23);
  std::size_t ok = 0;
  for (int i = 0; i < 1000; ++i) {
    const Image im = testing::random_image(m.config(), rng);
    ok += flow_inverse_image(m, flow_forward(m, im).first) == im;
  }
  const double secs = seconds_since(t0);
  return {ok == 1000 && secs < 60.0, std::to_string(ok) + "/1000 exact, " + fmt6(secs) + " s"};
}

Verdict rate_fidelity(World& w) {
  std::size_t inside = 0;
  double worst_over = -1e300, worst_under = 1e300;
  for (const auto& model : w.clean)
    for (const Image& im : w.test_set) {
      const auto r = compress(model, im, 1);
      const double nll = r.model_rate.nll_bits();
      inside += r.coded_bits >= nll && r.coded_bits <= 1.01 * nll + 192.0;
      worst_over = std::max(worst_over, r.coded_bits - (1.01 * nll + 192.0));
      worst_under = std::min(worst_under, r.coded_bits - nll);
    }
  const std::size_t n = w.clean.size() * w.test_set.size();
  std::ostringstream d;
  d << inside << "/" << n << " test images in [NLL, 1.01 NLL + 192] over " << w.clean.size()
    << " trained models; min(coded - NLL) " << fmt6(worst_under) << " bits, max(coded - upper) " << fmt6(worst_over)
    << " bits";
  return {inside == n, d.str()};
}

Verdict gradients(World&) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    auto param = [&](Shape s, double lo, double hi) {
      std::uniform_real_distribution<double> u(lo, hi);
      std::vector<double> v(shape_numel(s));
      for (double& x : v) x = u(rng);
      return Array::parameter(std::move(s), std::move(v));
    };
    const std::size_t n = pick(1, 2), c = pick(1, 4), h = pick(2, 5), wd = pick(2, 5), depth = pick(1, 3);
    std::vector<Array> weights, biases;
    std::size_t in = c;
    for (std::size_t l = 0; l < depth; ++l) {
      const std::size_t out = l + 1 == depth ? 2 * c : pick(1, 6);
      weights.push_back(param({out, in, 3, 3}, -0.5, 0.5));
      biases.push_back(param({out}, -0.2, 0.2));
      in = out;
    }
    Array x = param({n, c, h, wd}, -2.0, 2.0);
    std::vector<double> zv(n * c * h * wd);
    for (double& z : zv) z = std::uniform_int_distribution<int>(-3, 3)(rng);
    const Array z({n, c, h, wd}, zv);

    // Conv stack with sigmoid activations feeding a discretized logistic, as in a factor-out prior.
    auto f = [&]() {
      Array a = x;
      for (std::size_t l = 0; l < depth; ++l) {
        a = add_channel_bias(conv2d(a, weights[l], 1), biases[l]);
        if (l + 1 < depth) a = sigmoid(a);
      }
      return sum(disc_logistic_logpmf(z, channel_split(a, 0, c), channel_split(a, c, c)));
    };
    std::vector<Array*> leaves{&x};
    for (auto& p : weights) leaves.push_back(&p);
    for (auto& p : biases) leaves.push_back(&p);
    {
      Tape tape;
      Array root = f();
      tape.backward(root);
    }
    worst = std::max(worst, testing::max_gradient_error(
                                [&]() {
                                  NoGradScope ng;
                                  return f().item();
                                },
                                leaves));
  }
  return {worst < 1e-4, "worst relative error " + fmt6(worst) + " over 100 random conv/logistic nets"};
}

Verdict theory(World& w) {
  const auto t0 = Clock::now();
  const auto suite = verify_theory(w.cfg.theory_trials, 0);
  std::size_t violations = 0, checked = 0;
  double worst_excess = -1e300;
  std::ostringstream d;
  for (const auto& r : suite.reports) {
    violations += r.violations;
    ++checked;
    worst_excess = std::max(worst_excess, r.max_observed - r.bound);
    d << "\n      " << summary(r);
  }
  const bool deltas = std::all_of(suite.reports.begin(), suite.reports.end(),
                                   [&](const BoundReport& r) { return r.trials == w.cfg.theory_trials; });
  const double c111 = lemma1_c(1, 1, 1);
  bool ratios = true;
  for (const auto& t : suite.theorems) ratios = ratios && std::abs(t.dominant_ratio_2b - 32.0) < 1e-9;
  const double secs = seconds_since(t0);
  std::ostringstream head;
  head << checked << " checks x " << w.cfg.theory_trials << " trials, " << violations
       << " violations (tolerance 1e-9), max(observed - bound) " << fmt6(worst_excess) << "; C(1,1,1) = "
       << fmt6(c111) << "; dominant-term ratio at 2b = " << fmt6(suite.theorems.front().dominant_ratio_2b) << "; "
       << fmt6(secs) << " s" << d.str();
  return {violations == 0 && deltas && c111 == 9.0 && ratios && secs < 600.0, head.str()};
}

Verdict attack_direction(World& w) {
  int aw_wins = 0;
  bool below = true;
  std::ostringstream d;
  for (int s = 0; s < kSeeds; ++s) {
    const double clean_cr = mean_of(w.pgd[s], false, true);
    const double pgd_cr = mean_of(w.pgd[s], true, true), aw_cr = mean_of(w.awpgd[s], true, true);
    const double pgd_bpd = mean_of(w.pgd[s], true, false), aw_bpd = mean_of(w.awpgd[s], true, false);
    below = below && pgd_cr < clean_cr && aw_cr < clean_cr;
    aw_wins += aw_bpd >= pgd_bpd;
    d << "\n      seed " << s << ": clean CR " << fmt6(clean_cr) << ", PGD CR " << fmt6(pgd_cr) << ", AW-PGD CR "
      << fmt6(aw_cr) << "; PGD bpd " << fmt6(pgd_bpd) << ", AW-PGD bpd " << fmt6(aw_bpd)
      << (aw_bpd >= pgd_bpd ? " (AW-PGD >= PGD)" : " (AW-PGD < PGD)");
  }
  std::ostringstream head;
  head << "attacked CR below clean on all seeds: " << (below ? "yes" : "no") << "; AW-PGD >= PGD on " << aw_wins << "/"
       << kSeeds << " seeds" << d.str();
  return {below && aw_wins * 2 > kSeeds, head.str()};
}

double mean_epoch_seconds(const TrainResult& r) {
  double s = 0.0;
  for (const auto& e : r.epochs) s += e.wall_clock_seconds;
  return s / static_cast<double>(r.epochs.size());
}

Verdict defense_direction(World& w) {
  TrainConfig tc = w.cfg.train;
  tc.seed = 0;
  tc.mode = TrainMode::ridf;
  FlowModel ridf(w.cfg.arch, 0);
  const TrainResult ridf_run = train(ridf, w.train_set, w.test_set, tc);
  const auto ridf_pgd = attack_images(ridf, w.test_set, attack_cfg(AttackMode::pgd, 2));
  const auto ridf_aw = attack_images(ridf, w.test_set, attack_cfg(AttackMode::awpgd, 2));

  TrainConfig adv = w.cfg.train;
  adv.seed = 0;
  adv.mode = TrainMode::adv;
  adv.epochs = 2;
  FlowModel adv_model(w.cfg.arch, 0);
  const TrainResult adv_run = train(adv_model, w.train_set, {}, adv);

  const double clean_clean = mean_of(w.pgd[0], false, true), ridf_clean = mean_of(ridf_pgd, false, true);
  const double clean_att = mean_of(w.pgd[0], true, true), ridf_att = mean_of(ridf_pgd, true, true);
  const double clean_aw = mean_of(w.awpgd[0], true, true), ridf_aw_cr = mean_of(ridf_aw, true, true);
  const double t_ridf = mean_epoch_seconds(ridf_run), t_clean = mean_epoch_seconds(w.clean_runs[0]);
  const double t_adv = mean_epoch_seconds(adv_run);
  const double clean_gap = std::abs(ridf_clean - clean_clean) / clean_clean;

  // Per-component view of where the attack lands.
  auto increase = [](const std::vector<AttackTrace>& t, std::size_t j) {
    double s = 0.0;
    for (const auto& x : t) s += x.adv_rate.component_bits(j) - x.clean_rate.component_bits(j);
    return s / static_cast<double>(t.size());
  };

  const bool robust = ridf_att > clean_att, cheap_clean = clean_gap <= 0.05, fast = t_ridf < 0.25 * t_adv;
  std::ostringstream d;
  d << "PGD eps 2 attacked CR: R-IDF " << fmt6(ridf_att) << " vs clean " << fmt6(clean_att) << (robust ? " (higher)" : " (not higher)")
    << "; clean CR: R-IDF " << fmt6(ridf_clean) << " vs clean " << fmt6(clean_clean) << " (gap " << fmt6(100 * clean_gap)
    << "%, limit 5%); epoch time: R-IDF " << fmt6(t_ridf) << " s, clean " << fmt6(t_clean) << " s, adv " << fmt6(t_adv)
    << " s (ratio " << fmt6(t_ridf / t_adv) << ", limit 0.25)"
    << "\n      AW-PGD eps 2 attacked CR: R-IDF " << fmt6(ridf_aw_cr) << " vs clean " << fmt6(clean_aw)
    << "\n      mean PGD bit increase per image (fo1, fo2, mf): clean " << fmt6(increase(w.pgd[0], 0)) << ", "
    << fmt6(increase(w.pgd[0], 1)) << ", " << fmt6(increase(w.pgd[0], 2)) << "; R-IDF " << fmt6(increase(ridf_pgd, 0))
    << ", " << fmt6(increase(ridf_pgd, 1)) << ", " << fmt6(increase(ridf_pgd, 2));
  return {robust && cheap_clean && fast, d.str()};
}

Verdict awpgd_mechanics(World& w) {
  std::size_t steps = 0, bad_sum = 0, bad_softmax = 0, bad_increment = 0, bad_clamp = 0;
  auto audit = [&](const AttackTrace& t, double bound) {
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      const AttackStep& s = t.steps[i];
      ++steps;
      bad_sum += std::abs(s.weight[0] + s.weight[1] + s.weight[2] - 1.0) > 1e-12;
      const auto sm = softmax(s.delta);
      for (std::size_t j = 0; j < 3; ++j) {
        bad_softmax += std::abs(sm[j] - s.weight[j]) > 1e-12;
        const double prev = i == 0 ? s.clamped[j] : t.steps[i - 1].clamped[j];
        bad_increment += s.delta[j] != std::max(s.clamped[j] - prev, 0.0);
        // A component clamped now and at the previous iterate has no increment.
        if (s.loss[j] >= bound && (i == 0 || t.steps[i - 1].loss[j] >= bound)) bad_clamp += s.delta[j] != 0.0;
        bad_clamp += s.clamped[j] != std::min(s.loss[j], bound);
      }
    }
  };
  for (const auto& traces : w.awpgd)
    for (const auto& t : traces) audit(t, 8.0);
  // Low caps so clamping is exercised on every component.
  std::size_t clamped_steps = 0;
  for (double bound : {0.5, 3.0, 5.0}) {
    AttackConfig a = attack_cfg(AttackMode::awpgd, 2);
    a.bound = bound;
    for (const auto& t : attack_images(w.clean[0], std::vector<Image>(w.test_set.begin(), w.test_set.begin() + 8), a)) {
      audit(t, bound);
      for (const auto& s : t.steps) clamped_steps += s.loss[0] >= bound || s.loss[1] >= bound || s.loss[2] >= bound;
    }
  }
  const std::array<double, 3> equal{0.7, 0.7, 0.7};
  const auto third = softmax(equal);
  const bool uniform = std::all_of(third.begin(), third.end(), [](double v) { return std::abs(v - 1.0 / 3.0) < 1e-15; });
  std::ostringstream d;
  d << steps << " iterations audited (" << clamped_steps << " with a clamped component): " << bad_sum
    << " weight sums off 1, " << bad_softmax << " weights off softmax(increments), " << bad_increment
    << " increments off max(L_i - L_{i-1}, 0), " << bad_clamp << " clamping errors; equal increments give "
    << fmt6(third[0]) << "," << fmt6(third[1]) << "," << fmt6(third[2]);
  return {bad_sum + bad_softmax + bad_increment + bad_clamp == 0 && uniform && clamped_steps > 0, d.str()};
}

Verdict ablation(World& w) {
  TrainConfig tc = w.cfg.train;
  tc.seed = 0;
  const auto r = ablation_suite(w.cfg.arch, w.train_set, w.test_set, tc, 10);
  bool identical = true;
  const auto base = w.clean[0].parameters();
  const auto zero = r.models.at(0).parameters();
  for (std::size_t k = 0; k < base.size(); ++k)
    identical = identical && std::ranges::equal(base[k].array->values(), zero[k].array->values());
  std::set<std::pair<double, double>> variants;
  std::set<int> eps;
  for (const auto& row : r.rows) {
    variants.insert({row.rho1, row.rho2});
    eps.insert(row.epsilon);
  }
  std::ostringstream d;
  d << r.rows.size() << " rows (" << variants.size() << " variants x " << eps.size()
    << " epsilons); (0,0) variant parameters " << (identical ? "bit-identical to" : "differ from")
    << " the clean baseline";
  for (const auto& row : r.rows)
    if (row.epsilon == 2)
      d << "\n      rho (" << fmt6(row.rho1) << "," << fmt6(row.rho2) << ") eps 2: clean CR " << fmt6(row.clean_cr)
        << ", attacked CR " << fmt6(row.attacked_cr);
  return {r.rows.size() == 20 && variants.size() == 4 && eps.size() == 5 && identical, d.str()};
}

Verdict universality(World& w) {
  const auto rows = universality_eval(w.clean[0], w.test_set, attack_cfg(AttackMode::pgd, 0), {0, 5}, 20, 0);
  bool zero_same = true, five_worse = true;
  std::size_t seen = 0;
  std::ostringstream d;
  for (const auto& r : rows) {
    if (r.epsilon == 0) zero_same = zero_same && r.transferred_cr == r.clean_cr;
    if (r.epsilon == 5) five_worse = five_worse && r.transferred_cr < r.clean_cr;
    seen += r.sources.size() == 20;
    d << "\n      " << to_string(r.attack) << " eps " << r.epsilon << ": clean CR " << fmt6(r.clean_cr)
      << ", transferred CR " << fmt6(r.transferred_cr) << " (" << r.sources.size() << " repeats)";
  }
  return {rows.size() == 4 && seen == 4 && zero_same && five_worse,
          std::string("eps 0 unchanged: ") + (zero_same ? "yes" : "no") + "; eps 5 degrades: " +
              (five_worse ? "yes" : "no") + d.str()};
}

Verdict spectral(World&) {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> dim(1, 64);
  std::normal_distribution<double> g;
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t rows = t == 0 ? 64 : dim(rng), cols = t == 0 ? 64 : dim(rng);
    std::vector<double> v(rows * cols);
    for (double& x : v) x = g(rng);
    Eigen::MatrixXd m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) m(r, c) = v[r * cols + c];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.transpose() * m);
    const double oracle = std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
    worst = std::max(worst, std::abs(spectral_norm(v, rows, cols) - oracle) / oracle);
  }
  return {worst < 1e-6, "worst relative error " + fmt6(worst) + " over 100 matrices up to 64x64"};
}

}  // namespace

// Arguments, if any, select criteria by number (e.g. `acceptance 4 11`).
int main(int argc, char** argv) {
  const auto t0 = Clock::now();
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));
  auto selected = [&](std::size_t n) { return only.empty() || only.contains(n); };

  World w;
  std::cout << "acceptance: dataset " << w.cfg.dataset << ", " << w.cfg.train_count << " train images, "
            << w.cfg.train.epochs << " epochs, batch " << w.cfg.train.batch_size << ", config hash "
            << hex64(w.cfg.hash()) << std::endl;
  // Criteria 2, 4, 5 and 11 need no trained models.
  if (std::ranges::any_of(std::vector<std::size_t>{1, 3, 6, 7, 8, 9, 10}, selected)) prepare(w);

  const std::vector<std::pair<const char*, std::function<Verdict(World&)>>> criteria = {
      {"losslessness", losslessness},
      {"bijectivity", bijectivity},
      {"rate fidelity", rate_fidelity},
      {"gradient correctness", gradients},
      {"theory suite", theory},
      {"attack direction", attack_direction},
      {"defense direction", defense_direction},
      {"AW-PGD mechanics", awpgd_mechanics},
      {"ablation shape", ablation},
      {"universality procedure", universality},
      {"spectral norm", spectral},
  };
  int failed = 0, run = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected(i + 1)) continue;
    ++run;
    const auto start = Clock::now();
    Verdict v;
    try {
      v = criteria[i].second(w);
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << "criterion " << i + 1 << " " << (v.pass ? "PASS" : "FAIL") << " [" << criteria[i].first << "] "
              << v.detail << " (" << fmt6(seconds_since(start)) << " s)\n"
              << std::flush;
  }
  std::cout << "acceptance: " << run - failed << "/" << run << " criteria passed in "
            << fmt6(seconds_since(t0)) << " s\n";
  return failed ? 1 : 0;
}
