#include "rifl/defense.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "rifl/attacks.hpp"

namespace rifl {

namespace {

double norm2(const std::vector<double>& a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

// y = W x for row-major W (rows x cols)
void matvec(std::span<const double> w, std::size_t rows, std::size_t cols, const std::vector<double>& x,
            std::vector<double>& y) {
  y.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = w.data() + r * cols;
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += row[c] * x[c];
    y[r] = s;
  }
}

// y = W^T x
void matvec_t(std::span<const double> w, std::size_t rows, std::size_t cols, const std::vector<double>& x,
              std::vector<double>& y) {
  y.assign(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) y[c] += row[c] * x[r];
  }
}

const char* kComponentNames[3] = {"fo1", "fo2", "mf"};

}  // namespace

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::clean: return "clean";
    case TrainMode::ridf: return "ridf";
    case TrainMode::adv: return "adv";
    case TrainMode::hybrid: return "hybrid";
    case TrainMode::ridf_hybrid: return "ridf_hybrid";
  }
  return "?";
}

TrainMode parse_train_mode(const std::string& name) {
  for (TrainMode m : {TrainMode::clean, TrainMode::ridf, TrainMode::adv, TrainMode::hybrid, TrainMode::ridf_hybrid})
    if (to_string(m) == name) return m;
  throw std::invalid_argument("unknown training mode '" + name + "' (expected clean, ridf, adv, hybrid or ridf_hybrid)");
}

bool uses_regularizer(TrainMode mode) { return mode == TrainMode::ridf || mode == TrainMode::ridf_hybrid; }

void TrainConfig::validate() const {
  if (rho1 < 0.0 || rho2 < 0.0) throw std::invalid_argument("train: rho1 and rho2 must be >= 0");
  if (mixing_rate < 0.0 || mixing_rate > 1.0) throw std::invalid_argument("train: mixing_rate must lie in [0, 1]");
  if (adv_iters < 1 || adv_epsilon < 0) throw std::invalid_argument("train: invalid inner attack settings");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
}

// ---------------------------------------------------------------------------
// Power iteration

PowerIteration::PowerIteration(std::size_t cols, std::uint64_t seed) : seed_(seed) { ensure(cols); }

void PowerIteration::ensure(std::size_t cols) {
  if (v_.size() == cols) return;
  std::mt19937_64 rng(seed_);
  std::normal_distribution<double> d;
  v_.resize(cols);
  for (double& x : v_) x = d(rng);
  const double n = norm2(v_);
  for (double& x : v_) x /= n;
}

double PowerIteration::step(std::span<const double> w, std::size_t rows, std::size_t cols, int iters) {
  if (w.size() != rows * cols) throw ShapeError("power iteration: matrix size does not match rows*cols");
  ensure(cols);
  std::vector<double> wv, wtu;
  for (int k = 0; k < iters; ++k) {
    matvec(w, rows, cols, v_, wv);
    const double nu = norm2(wv);
    if (nu == 0.0) {
      u_.assign(rows, 0.0);
      sigma_ = 0.0;
      return 0.0;
    }
    for (double& x : wv) x /= nu;
    u_ = wv;
    matvec_t(w, rows, cols, u_, wtu);
    // v = W^T u / |W^T u| makes u^T W v equal |W^T u| exactly.
    sigma_ = norm2(wtu);
    if (sigma_ == 0.0) return 0.0;
    for (double& x : wtu) x /= sigma_;
    v_ = wtu;
  }
  return sigma_;
}

double PowerIteration::converge(std::span<const double> w, std::size_t rows, std::size_t cols, double tol,
                                int max_iters) {
  double prev = step(w, rows, cols, 1);
  last_iters_ = 1;
  std::vector<double> wv, wtwv;
  for (int k = 1; k < max_iters; ++k) {
    const double cur = step(w, rows, cols, 1);
    ++last_iters_;
    if (cur == 0.0) return 0.0;
    if (std::abs(cur - prev) <= tol * cur) {
      // residual of W^T W v = sigma^2 v
      matvec(w, rows, cols, v_, wv);
      matvec_t(w, rows, cols, wv, wtwv);
      double r = 0.0;
      for (std::size_t i = 0; i < cols; ++i) r += (wtwv[i] - cur * cur * v_[i]) * (wtwv[i] - cur * cur * v_[i]);
      if (std::sqrt(r) <= tol * cur * cur) return cur;
    }
    prev = cur;
  }
  return sigma_;
}

double spectral_norm(std::span<const double> w, std::size_t rows, std::size_t cols, double tol, int max_iters) {
  PowerIteration p(cols, 0);
  return p.converge(w, rows, cols, tol, max_iters);
}

std::size_t kernel_rows(const Array& kernel) { return kernel.dim(0); }
std::size_t kernel_cols(const Array& kernel) { return kernel.size() / kernel.dim(0); }

// ---------------------------------------------------------------------------
// Regularizer

RidfRegularizer::RidfRegularizer(double rho1, double rho2, std::uint64_t seed)
    : rho1_(rho1), rho2_(rho2), seed_(seed) {}

Array RidfRegularizer::penalty(const FlowModel& model, int power_iters) {
  const auto kernels = model.first_factor_out_kernels();
  if (power_.size() != kernels.size()) {
    power_.clear();
    for (std::size_t i = 0; i < kernels.size(); ++i) power_.emplace_back(kernel_cols(*kernels[i]), seed_ + i);
    warmed_ = false;
  }
  Array total;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    const Array& w = *kernels[i];
    const std::size_t rows = kernel_rows(w), cols = kernel_cols(w);
    if (warmed_)
      power_[i].step(w.values(), rows, cols, power_iters);
    else
      power_[i].converge(w.values(), rows, cols);
    Array wr = reshape(w, {rows, cols});
    Array fro = sum(mul(wr, wr));
    Array u({1, rows}, power_[i].u().empty() ? std::vector<double>(rows, 0.0) : power_[i].u());
    Array v({1, cols}, power_[i].v());
    Array sigma = sum(mul(matmul(u, wr), v));
    if (sigma.item() > std::sqrt(fro.item()) * (1.0 + 1e-9) + 1e-12)
      throw std::logic_error("spectral norm estimate exceeds the Frobenius norm");
    Array term = add(scale(fro, rho1_), scale(mul(sigma, sigma), rho2_));
    total = i == 0 ? term : add(total, term);
  }
  warmed_ = true;
  return total;
}

double RidfRegularizer::value(const FlowModel& model) {
  double total = 0.0;
  for (const Array* k : model.first_factor_out_kernels()) {
    const std::size_t rows = kernel_rows(*k), cols = kernel_cols(*k);
    double fro = 0.0;
    for (double x : k->values()) fro += x * x;
    const double s = spectral_norm(k->values(), rows, cols);
    total += rho1_ * fro + rho2_ * s * s;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

Array total_bits(const FlowOutputs& fo) { return add(add(fo.nll_bits[0], fo.nll_bits[1]), fo.nll_bits[2]); }

Array mean_bpd_of(const FlowModel& model, const FlowOutputs& fo, std::size_t batch) {
  return scale(sum(total_bits(fo)), 1.0 / static_cast<double>(batch * model.input_dims()));
}

}  // namespace

Array idf_loss(const FlowModel& model, const Array& batch) {
  return mean_bpd_of(model, flow_forward_batch(model, batch), batch.dim(0));
}

Array ridf_loss(const FlowModel& model, const Array& batch, RidfRegularizer& reg, int power_iters) {
  return add(idf_loss(model, batch), reg.penalty(model, power_iters));
}

double mean_bpd(const FlowModel& model, const std::vector<Image>& images) {
  if (images.empty()) return std::numeric_limits<double>::quiet_NaN();
  NoGradScope ng;
  double bits = 0.0;
  for (std::size_t b = 0; b < images.size(); b += 32) {
    std::vector<Image> chunk(images.begin() + static_cast<std::ptrdiff_t>(b),
                             images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), b + 32)));
    FlowOutputs fo = flow_forward_batch(model, to_batch(chunk));
    const Array totals = total_bits(fo);
    for (double v : totals.values()) bits += v;
  }
  return bits / static_cast<double>(images.size() * model.input_dims());
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct Adam {
  std::vector<std::vector<double>> m, v;
  long t = 0;

  void update(std::vector<ParamRef>& params, const TrainConfig& cfg, double lr) {
    if (m.empty()) {
      for (auto& p : params) {
        m.emplace_back(p.array->size(), 0.0);
        v.emplace_back(p.array->size(), 0.0);
      }
    }
    ++t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Array& p = *params[k].array;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto x = p.values_mut();
      for (std::size_t i = 0; i < x.size(); ++i) {
        m[k][i] = cfg.beta1 * m[k][i] + (1.0 - cfg.beta1) * g[i];
        v[k][i] = cfg.beta2 * v[k][i] + (1.0 - cfg.beta2) * g[i] * g[i];
        x[i] -= lr * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + cfg.adam_eps);
      }
    }
  }
};

}  // namespace

TrainResult train(FlowModel& model, const std::vector<Image>& train_set, const std::vector<Image>& heldout,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");

  std::mt19937_64 rng(cfg.seed);
  auto params = model.parameters();
  Adam adam;
  RidfRegularizer reg(cfg.rho1, cfg.rho2, cfg.seed);
  const bool regularize = uses_regularizer(cfg.mode);
  const bool hybrid = cfg.mode == TrainMode::hybrid || cfg.mode == TrainMode::ridf_hybrid;

  TrainResult result;
  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.learning_rate * std::pow(cfg.lr_decay, epoch - 1);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size, ++batches) {
      std::vector<Image> imgs;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) imgs.push_back(train_set[order[i]]);

      if (cfg.mode == TrainMode::adv) {
        imgs = pgd_examples(model, imgs, cfg.adv_epsilon, cfg.adv_iters);
      } else if (hybrid) {
        const auto k = static_cast<std::size_t>(std::llround(cfg.mixing_rate * static_cast<double>(imgs.size())));
        if (k > 0) {
          std::vector<Image> head(imgs.begin(), imgs.begin() + static_cast<std::ptrdiff_t>(k));
          head = pgd_examples(model, head, cfg.adv_epsilon, cfg.adv_iters);
          std::copy(head.begin(), head.end(), imgs.begin());
        }
      }

      Tape tape;
      FlowOutputs fo = flow_forward_batch(model, to_batch(imgs));
      Array loss = mean_bpd_of(model, fo, imgs.size());
      Array pen;
      if (regularize) {
        pen = reg.penalty(model);
        loss = add(loss, pen);
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::string where = "penalty";
        for (std::size_t j = 0; j < 3; ++j)
          for (double x : fo.nll_bits[j].values())
            if (!std::isfinite(x)) where = kComponentNames[j];
        throw TrainingError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches) + ", component " + where);
      }
      loss_sum += value;
      tape.backward(loss);
      adam.update(params, cfg, lr);
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.mode = cfg.mode;
    em.train_loss = loss_sum / static_cast<double>(batches);
    em.penalty_value = regularize ? reg.value(model) : 0.0;
    em.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    em.clean_bpd = mean_bpd(model, heldout);
    result.epochs.push_back(em);
  }
  return result;
}

CsvTable epoch_csv(const TrainResult& result) {
  CsvTable t({"epoch", "mode", "clean_bpd", "penalty_value", "wall_clock_seconds"});
  for (const auto& e : result.epochs)
    t.row().add(e.epoch).add(to_string(e.mode)).add(e.clean_bpd).add(e.penalty_value).add(e.wall_clock_seconds);
  return t;
}

AblationResult ablation_suite(const FlowConfig& arch, const std::vector<Image>& train_set,
                              const std::vector<Image>& test, TrainConfig cfg, int attack_iters) {
  if (test.empty()) throw std::invalid_argument("ablation: empty test set");
  const std::pair<double, double> variants[4] = {{0.0, 0.0}, {2.0, 0.0}, {0.0, 0.5}, {2.0, 0.5}};
  AblationResult out;
  for (auto [r1, r2] : variants) {
    FlowModel model(arch, cfg.seed);
    cfg.mode = TrainMode::ridf;
    cfg.rho1 = r1;
    cfg.rho2 = r2;
    out.trainings.push_back(train(model, train_set, test, cfg));
    for (int eps = 1; eps <= 5; ++eps) {
      AttackConfig ac;
      ac.mode = AttackMode::pgd;
      ac.epsilon = eps;
      ac.iters = attack_iters;
      auto traces = attack_images(model, test, ac);
      AblationRow row;
      row.rho1 = r1;
      row.rho2 = r2;
      row.epsilon = eps;
      row.clean_cr = summarize(traces, true).mean_cr;
      row.attacked_cr = summarize(traces, false).mean_cr;
      out.rows.push_back(row);
    }
    out.models.push_back(std::move(model));
  }
  return out;
}

CsvTable ablation_csv(const AblationResult& result) {
  CsvTable t({"rho1", "rho2", "epsilon", "clean_cr", "attacked_cr"});
  for (const auto& r : result.rows) t.row().add(r.rho1).add(r.rho2).add(r.epsilon).add(r.clean_cr).add(r.attacked_cr);
  return t;
}

}  // namespace rifl
