#include "rifl/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "rifl/codec.hpp"

namespace rifl {

namespace {

constexpr std::size_t kChunk = 16;

// Attacks need d loss / d x only; parameter gradients would double the cost.
class FrozenParameters {
 public:
  explicit FrozenParameters(const FlowModel& model) {
    for (const auto& p : model.parameters()) {
      Array handle = *p.array;
      saved_.push_back(handle.requires_grad());
      handle.set_requires_grad(false);
      handles_.push_back(std::move(handle));
    }
  }
  ~FrozenParameters() {
    for (std::size_t i = 0; i < handles_.size(); ++i) handles_[i].set_requires_grad(saved_[i]);
  }
  FrozenParameters(const FrozenParameters&) = delete;
  FrozenParameters& operator=(const FrozenParameters&) = delete;

 private:
  std::vector<Array> handles_;
  std::vector<bool> saved_;
};

int sign(double g) { return (g > 0.0) - (g < 0.0); }

std::array<std::size_t, 3> component_dims(const FlowModel& model) {
  return {model.latent_dims(0), model.latent_dims(1), model.latent_dims(2)};
}

// Signed-gradient iterations on a batch of flattened images. x0 and the result
// are (N*C*H*W) pixel values. `steps`, when given, receives one record list per image.
std::vector<double> run_gradient_attack(const FlowModel& model, const std::vector<double>& x0, const Shape& shape,
                                        const AttackConfig& cfg, std::vector<std::vector<AttackStep>>* steps) {
  const std::size_t n_img = shape[0];
  const std::size_t per = x0.size() / n_img;
  std::vector<double> x = x0;
  if (steps) steps->assign(n_img, {});
  if (cfg.epsilon == 0) return x;

  const auto dims = component_dims(model);
  const bool weighted = cfg.mode == AttackMode::awpgd;
  const bool clamp = weighted && cfg.clamp_losses;
  std::vector<std::array<double, 3>> prev(n_img);
  FrozenParameters frozen(model);

  for (int it = 1; it <= cfg.iters; ++it) {
    Tape tape;
    Array xa = Array::parameter(shape, x);
    FlowOutputs fo = flow_forward_batch(model, xa);

    std::array<std::vector<double>, 3> coef;
    for (auto& c : coef) c.assign(n_img, 0.0);
    for (std::size_t n = 0; n < n_img; ++n) {
      AttackStep st;
      st.iteration = it;
      for (std::size_t j = 0; j < 3; ++j) {
        st.loss[j] = fo.nll_bits[j][n] / static_cast<double>(dims[j]);
        st.clamped[j] = clamp ? std::min(st.loss[j], cfg.bound) : st.loss[j];
      }
      // loss^0 = F(x): the first iteration is evaluated at x itself.
      if (it == 1) prev[n] = st.clamped;
      for (std::size_t j = 0; j < 3; ++j) st.delta[j] = std::max(st.clamped[j] - prev[n][j], 0.0);
      if (weighted && !cfg.force_uniform_weights) {
        auto w = softmax(st.delta);
        std::copy(w.begin(), w.end(), st.weight.begin());
      } else {
        st.weight = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
      }
      for (std::size_t j = 0; j < 3; ++j) {
        st.weighted_loss += st.weight[j] * st.clamped[j];
        // A component held at the cap is a constant: no gradient flows through it.
        const bool active = !(clamp && st.loss[j] >= cfg.bound);
        coef[j][n] = active ? st.weight[j] / static_cast<double>(dims[j]) : 0.0;
      }
      prev[n] = st.clamped;
      if (steps) (*steps)[n].push_back(st);
    }

    Array loss = sum(mul(fo.nll_bits[0], Array({n_img}, coef[0])));
    loss = add(loss, sum(mul(fo.nll_bits[1], Array({n_img}, coef[1]))));
    loss = add(loss, sum(mul(fo.nll_bits[2], Array({n_img}, coef[2]))));
    std::vector<double> grad(x.size(), 0.0);
    if (loss.requires_grad()) {
      tape.backward(loss);
      grad.assign(xa.grad().begin(), xa.grad().end());
    }

    for (std::size_t n = 0; n < n_img; ++n) {
      int linf = 0;
      for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
        const double lo = std::max(0.0, x0[i] - cfg.epsilon);
        const double hi = std::min(255.0, x0[i] + cfg.epsilon);
        x[i] = std::clamp(x[i] + cfg.alpha * sign(grad[i]), lo, hi);
        linf = std::max(linf, static_cast<int>(std::abs(x[i] - x0[i])));
      }
      if (steps) (*steps)[n].back().linf = linf;
    }
  }
  return x;
}

Image image_from(const std::vector<double>& flat, std::size_t offset, const Image& like) {
  Image out(like.channels, like.height, like.width);
  for (std::size_t i = 0; i < out.size(); ++i) out.pixels[i] = static_cast<std::uint8_t>(flat[offset + i]);
  return out;
}

LossBreakdown rate_of(const FlowModel& model, const Image& im) { return flow_forward(model, im).second; }

void fill_rates(const FlowModel& model, const Image& clean, AttackTrace& t) {
  t.clean_rate = rate_of(model, clean);
  t.adv_rate = rate_of(model, t.adversarial);
  const CompressionResult c = compress(model, clean, 0);
  const CompressionResult a = compress(model, t.adversarial, 0);
  t.clean_realized_bpd = c.realized_bpd;
  t.clean_cr = c.cr;
  t.adv_realized_bpd = a.realized_bpd;
  t.adv_cr = a.cr;
}

double realized_cr(const FlowModel& model, const Image& im) { return compress(model, im, 0).cr; }

}  // namespace

std::string to_string(AttackMode mode) {
  switch (mode) {
    case AttackMode::pgd: return "pgd";
    case AttackMode::awpgd: return "awpgd";
    case AttackMode::random: return "random";
  }
  return "?";
}

AttackMode parse_attack_mode(const std::string& name) {
  if (name == "pgd") return AttackMode::pgd;
  if (name == "awpgd") return AttackMode::awpgd;
  if (name == "random") return AttackMode::random;
  throw std::invalid_argument("unknown attack mode '" + name + "' (expected pgd, awpgd or random)");
}

void AttackConfig::validate() const {
  if (epsilon < 0) throw std::invalid_argument("attack: epsilon must be >= 0");
  if (alpha < 1) throw std::invalid_argument("attack: alpha must be >= 1");
  if (iters < 1) throw std::invalid_argument("attack: iters must be >= 1");
  if (!(bound > 0.0)) throw std::invalid_argument("attack: bound must be > 0");
}

std::vector<AttackTrace> attack_images(const FlowModel& model, const std::vector<Image>& images,
                                       const AttackConfig& cfg) {
  cfg.validate();
  std::vector<AttackTrace> out;
  out.reserve(images.size());
  for (std::size_t begin = 0; begin < images.size(); begin += kChunk) {
    const std::size_t end = std::min(images.size(), begin + kChunk);
    std::vector<Image> chunk(images.begin() + static_cast<std::ptrdiff_t>(begin),
                             images.begin() + static_cast<std::ptrdiff_t>(end));
    for (const Image& im : chunk) validate_flow_input(model, to_batch(im));

    std::vector<Image> adv(chunk.size());
    std::vector<std::vector<AttackStep>> steps(chunk.size());
    if (cfg.mode == AttackMode::random) {
      for (std::size_t n = 0; n < chunk.size(); ++n) adv[n] = random_noise(chunk[n], cfg.epsilon, cfg.seed + begin + n);
    } else {
      Array batch = to_batch(chunk);
      std::vector<double> x0(batch.values().begin(), batch.values().end());
      auto x = run_gradient_attack(model, x0, batch.shape(), cfg, &steps);
      for (std::size_t n = 0; n < chunk.size(); ++n) adv[n] = image_from(x, n * chunk[n].size(), chunk[n]);
    }
    for (std::size_t n = 0; n < chunk.size(); ++n) {
      AttackTrace t;
      t.mode = cfg.mode;
      t.epsilon = cfg.epsilon;
      t.steps = std::move(steps[n]);
      t.adversarial = std::move(adv[n]);
      fill_rates(model, chunk[n], t);
      out.push_back(std::move(t));
    }
  }
  return out;
}

AttackTrace pgd_attack(const FlowModel& model, const Image& x, AttackConfig cfg) {
  cfg.mode = AttackMode::pgd;
  return std::move(attack_images(model, {x}, cfg).front());
}

AttackTrace awpgd_attack(const FlowModel& model, const Image& x, AttackConfig cfg) {
  cfg.mode = AttackMode::awpgd;
  return std::move(attack_images(model, {x}, cfg).front());
}

std::vector<Image> pgd_examples(const FlowModel& model, const std::vector<Image>& images, int epsilon, int iters) {
  AttackConfig cfg;
  cfg.mode = AttackMode::pgd;
  cfg.epsilon = epsilon;
  cfg.iters = iters;
  cfg.validate();
  if (images.empty()) return {};
  Array batch = to_batch(images);
  std::vector<double> x0(batch.values().begin(), batch.values().end());
  auto x = run_gradient_attack(model, x0, batch.shape(), cfg, nullptr);
  std::vector<Image> out;
  for (std::size_t n = 0; n < images.size(); ++n) out.push_back(image_from(x, n * images[n].size(), images[n]));
  return out;
}

Image random_noise(const Image& x, int epsilon, std::uint64_t seed) {
  if (epsilon < 0) throw std::invalid_argument("random_noise: epsilon must be >= 0");
  Image out = x;
  if (epsilon == 0) return out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(-epsilon, epsilon);
  for (auto& p : out.pixels) p = static_cast<std::uint8_t>(std::clamp(int(p) + d(rng), 0, 255));
  return out;
}

Image apply_perturbation(const Image& x, const std::vector<int>& delta) {
  if (delta.size() != x.size()) throw std::invalid_argument("apply_perturbation: size mismatch");
  Image out = x;
  for (std::size_t i = 0; i < out.size(); ++i)
    out.pixels[i] = static_cast<std::uint8_t>(std::clamp(int(x.pixels[i]) + delta[i], 0, 255));
  return out;
}

std::vector<int> perturbation(const Image& clean, const Image& adv) {
  if (clean.size() != adv.size()) throw std::invalid_argument("perturbation: size mismatch");
  std::vector<int> d(clean.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = int(adv.pixels[i]) - int(clean.pixels[i]);
  return d;
}

CsvTable trace_csv(const AttackTrace& trace) {
  CsvTable t({"iteration", "loss_fo1", "loss_fo2", "loss_mf", "clamped_fo1", "clamped_fo2", "clamped_mf", "delta_fo1",
              "delta_fo2", "delta_mf", "w_fo1", "w_fo2", "w_mf", "weighted_loss", "linf"});
  for (const AttackStep& s : trace.steps) {
    auto& r = t.row();
    r.add(s.iteration);
    for (double v : s.loss) r.add(v);
    for (double v : s.clamped) r.add(v);
    for (double v : s.delta) r.add(v);
    for (double v : s.weight) r.add(v);
    r.add(s.weighted_loss).add(s.linf);
  }
  return t;
}

AttackSummaryRow summarize(const std::vector<AttackTrace>& traces, bool clean_side) {
  AttackSummaryRow row;
  if (traces.empty()) return row;
  row.attack = clean_side ? "clean" : to_string(traces.front().mode);
  row.epsilon = clean_side ? 0 : traces.front().epsilon;
  for (const AttackTrace& t : traces) {
    row.mean_bpd += clean_side ? t.clean_realized_bpd : t.adv_realized_bpd;
    row.mean_cr += clean_side ? t.clean_cr : t.adv_cr;
    row.mean_model_bpd += clean_side ? t.clean_rate.total_bpd : t.adv_rate.total_bpd;
  }
  const double n = static_cast<double>(traces.size());
  row.mean_bpd /= n;
  row.mean_cr /= n;
  row.mean_model_bpd /= n;
  return row;
}

CsvTable summary_csv(const std::vector<AttackSummaryRow>& rows) {
  CsvTable t({"attack", "epsilon", "mean_bpd", "mean_cr", "mean_model_bpd"});
  for (const auto& r : rows) t.row().add(r.attack).add(r.epsilon).add(r.mean_bpd).add(r.mean_cr).add(r.mean_model_bpd);
  return t;
}

std::vector<UniversalityRow> universality_eval(const FlowModel& model, const std::vector<Image>& dataset,
                                               AttackConfig cfg, const std::vector<int>& epsilons, int repeats,
                                               std::uint64_t seed) {
  if (dataset.size() < 2) throw std::invalid_argument("universality: need at least 2 images");
  if (repeats < 1) throw std::invalid_argument("universality: repeats must be >= 1");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  std::vector<std::size_t> sources(static_cast<std::size_t>(repeats));
  for (auto& s : sources) s = pick(rng);

  std::vector<double> clean_cr(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) clean_cr[i] = realized_cr(model, dataset[i]);

  std::vector<UniversalityRow> rows;
  for (AttackMode mode : {AttackMode::pgd, AttackMode::awpgd}) {
    for (int eps : epsilons) {
      cfg.mode = mode;
      cfg.epsilon = eps;
      UniversalityRow row;
      row.attack = mode;
      row.epsilon = eps;
      row.sources = sources;
      for (std::size_t src : sources) {
        const AttackTrace t = std::move(attack_images(model, {dataset[src]}, cfg).front());
        const std::vector<int> delta = perturbation(dataset[src], t.adversarial);
        double clean_sum = 0.0, adv_sum = 0.0;
        for (std::size_t i = 0; i < dataset.size(); ++i) {
          if (i == src) continue;
          clean_sum += clean_cr[i];
          adv_sum += realized_cr(model, apply_perturbation(dataset[i], delta));
        }
        const double others = static_cast<double>(dataset.size() - 1);
        row.clean_cr += clean_sum / others;
        row.transferred_cr += adv_sum / others;
      }
      row.clean_cr /= repeats;
      row.transferred_cr /= repeats;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

CsvTable universality_csv(const std::vector<UniversalityRow>& rows) {
  CsvTable t({"attack", "epsilon", "clean_cr", "transferred_cr"});
  for (const auto& r : rows) t.row().add(to_string(r.attack)).add(r.epsilon).add(r.clean_cr).add(r.transferred_cr);
  return t;
}

}  // namespace rifl
