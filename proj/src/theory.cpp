#include "rifl/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace rifl {

namespace {

constexpr std::size_t kChunk = 512;

std::vector<double> unit_vector(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> v(d);
  double n = 0.0;
  do {
    n = 0.0;
    for (double& x : v) {
      x = g(rng);
      n += x * x;
    }
  } while (n == 0.0);
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

double row_distance(std::span<const double> a, std::span<const double> b, std::size_t row, std::size_t width) {
  double s = 0.0;
  for (std::size_t j = 0; j < width; ++j) {
    const double d = a[row * width + j] - b[row * width + j];
    s += d * d;
  }
  return std::sqrt(s);
}

double row_norm(std::span<const double> a, std::size_t row, std::size_t width) {
  double s = 0.0;
  for (std::size_t j = 0; j < width; ++j) s += a[row * width + j] * a[row * width + j];
  return std::sqrt(s);
}

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// Uniform points in [-r, r]^d and copies moved by exactly delta along random directions.
struct PerturbedSamples {
  Array clean, moved;
};

PerturbedSamples perturbed_samples(std::size_t n, std::size_t d, double radius, double delta, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-radius, radius);
  std::vector<double> a(n * d), b(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) a[i * d + j] = u(rng);
    const auto dir = unit_vector(d, rng);
    for (std::size_t j = 0; j < d; ++j) b[i * d + j] = a[i * d + j] + delta * dir[j];
  }
  return {Array({n, d}, std::move(a)), Array({n, d}, std::move(b))};
}

void fill_slack(BoundReport& r, std::vector<double> slack) {
  if (slack.empty()) return;
  std::sort(slack.begin(), slack.end());
  auto q = [&](double p) { return slack[static_cast<std::size_t>(p * static_cast<double>(slack.size() - 1))]; };
  r.slack_q50 = q(0.5);
  r.slack_q90 = q(0.9);
  r.slack_q99 = q(0.99);
  r.slack_max = slack.back();
}

double ratio(double observed, double bound) { return bound > 0.0 ? observed / bound : 0.0; }

Array gaussian_log_density(const Array& z) {
  const double c = -0.5 * std::log(2.0 * std::numbers::pi) * static_cast<double>(z.dim(1));
  return add_scalar(scale(sum_per_sample(mul(z, z)), -0.5), c);
}

}  // namespace

// ---------------------------------------------------------------------------
// Lipschitz estimation

LipschitzEstimate estimate_lipschitz(const BatchMap& f, const std::vector<double>& center, double radius,
                                     std::size_t samples, std::uint64_t seed) {
  if (!(radius > 0.0)) throw std::invalid_argument("estimate_lipschitz: radius must be > 0");
  if (center.empty()) throw std::invalid_argument("estimate_lipschitz: empty domain");
  NoGradScope ng;
  const std::size_t d = center.size();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> g;
  const double h = 1e-3 * radius;

  LipschitzEstimate est;
  est.samples = samples;
  est.radius = radius;
  std::vector<double> best_dir = unit_vector(d, rng);
  bool have_best = false;

  for (std::size_t start = 0; start < samples; start += kChunk) {
    const std::size_t m = std::min(kChunk, samples - start);
    std::vector<double> a(m * d), b(m * d);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < d; ++j) a[i * d + j] = center[j] + radius * u(rng);
      if ((start + i) % 2 == 0) {
        for (std::size_t j = 0; j < d; ++j) b[i * d + j] = center[j] + radius * u(rng);
      } else {
        // Hill-climb the probe direction at a spread of noise scales.
        const double spread = have_best ? std::ldexp(1.0, -static_cast<int>((start + i) / 2 % 6)) : 1e6;
        std::vector<double> dir(d);
        double n = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          dir[j] = best_dir[j] + spread * g(rng);
          n += dir[j] * dir[j];
        }
        n = std::sqrt(n);
        for (std::size_t j = 0; j < d; ++j) b[i * d + j] = a[i * d + j] + h * (n > 0.0 ? dir[j] / n : 0.0);
      }
    }
    const Array fa = f(Array({m, d}, a)), fb = f(Array({m, d}, b));
    const std::size_t out = fa.size() / m;
    double chunk_best = -1.0;
    std::size_t chunk_arg = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const double den = row_distance(a, b, i, d);
      if (den == 0.0) continue;
      const double r = row_distance(fa.values(), fb.values(), i, out) / den;
      if (r > chunk_best) {
        chunk_best = r;
        chunk_arg = i;
      }
    }
    if (chunk_best > est.L_hat) {
      est.L_hat = chunk_best;
      const double den = row_distance(a, b, chunk_arg, d);
      for (std::size_t j = 0; j < d; ++j) best_dir[j] = (b[chunk_arg * d + j] - a[chunk_arg * d + j]) / den;
      have_best = true;
    }
  }
  return est;
}

// ---------------------------------------------------------------------------
// Toy networks

Array tanh(const Array& x) { return add_scalar(scale(sigmoid(scale(x, 2.0)), 2.0), -1.0); }

Array softplus(const Array& x) { return log(add_scalar(exp(x), 1.0)); }

DenseNet DenseNet::make(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng, double gain) {
  std::normal_distribution<double> g;
  auto draw = [&](std::size_t n, double sd) {
    std::vector<double> v(n);
    for (double& x : v) x = sd * g(rng);
    return v;
  };
  DenseNet net;
  net.w1 = Array::parameter({in, hidden}, draw(in * hidden, gain / std::sqrt(double(in))));
  net.b1 = Array::parameter({hidden}, draw(hidden, 0.1 * gain));
  net.w2 = Array::parameter({hidden, out}, draw(hidden * out, gain / std::sqrt(double(hidden))));
  net.b2 = Array::parameter({out}, draw(out, 0.1 * gain));
  return net;
}

Array DenseNet::forward(const Array& x) const {
  return add_channel_bias(matmul(tanh(add_channel_bias(matmul(x, w1), b1)), w2), b2);
}

std::vector<Array*> DenseNet::parameters() { return {&w1, &b1, &w2, &b2}; }

AdditiveFlow AdditiveFlow::random(std::size_t dim, std::size_t couplings, std::size_t hidden, std::uint64_t seed,
                                  double gain) {
  if (dim < 2 || dim % 2) throw std::invalid_argument("additive flow: dimension must be even");
  std::mt19937_64 rng(seed);
  AdditiveFlow f;
  f.dim = dim;
  for (std::size_t k = 0; k < couplings; ++k) f.nets.push_back(DenseNet::make(dim / 2, hidden, dim / 2, rng, gain));
  return f;
}

Array AdditiveFlow::forward(const Array& x) const {
  const std::size_t h = dim / 2;
  Array a = channel_split(x, 0, h), b = channel_split(x, h, h);
  for (std::size_t k = 0; k < nets.size(); ++k) {
    if (k % 2 == 0)
      b = add(b, nets[k].forward(a));
    else
      a = add(a, nets[k].forward(b));
  }
  return channel_concat(a, b);
}

std::vector<Array*> AdditiveFlow::parameters() {
  std::vector<Array*> out;
  for (auto& n : nets)
    for (Array* p : n.parameters()) out.push_back(p);
  return out;
}

double fit_gaussian_flow(AdditiveFlow& flow, const Array& data, int steps, double lr) {
  auto params = flow.parameters();
  std::vector<std::vector<double>> m, v;
  for (Array* p : params) {
    m.emplace_back(p->size(), 0.0);
    v.emplace_back(p->size(), 0.0);
  }
  double last = 0.0;
  for (int t = 1; t <= steps; ++t) {
    Tape tape;
    Array z = flow.forward(data);
    Array loss = scale(mean(mul(z, z)), 0.5 * static_cast<double>(flow.dim));
    last = loss.item();
    tape.backward(loss);
    const double c1 = 1.0 - std::pow(0.9, t), c2 = 1.0 - std::pow(0.999, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (!params[k]->has_grad()) continue;
      auto gr = params[k]->grad();
      auto x = params[k]->values_mut();
      for (std::size_t i = 0; i < x.size(); ++i) {
        m[k][i] = 0.9 * m[k][i] + 0.1 * gr[i];
        v[k][i] = 0.999 * v[k][i] + 0.001 * gr[i] * gr[i];
        x[i] -= lr * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + 1e-8);
      }
    }
  }
  return last;
}

GaussianFactorOut GaussianFactorOut::random(std::size_t y_dim, std::size_t z_dim, std::size_t hidden,
                                            std::uint64_t seed, double gain, double sigma_floor) {
  std::mt19937_64 rng(seed);
  auto mu_net = std::make_shared<DenseNet>(DenseNet::make(y_dim, hidden, z_dim, rng, gain));
  auto s_net = std::make_shared<DenseNet>(DenseNet::make(y_dim, hidden, z_dim, rng, gain));
  GaussianFactorOut q;
  q.y_dim = y_dim;
  q.z_dim = z_dim;
  q.mu = [mu_net](const Array& y) { return mu_net->forward(y); };
  q.sigma = [s_net, sigma_floor](const Array& y) { return add_scalar(softplus(s_net->forward(y)), sigma_floor); };
  return q;
}

GaussianFactorOut GaussianFactorOut::linear(std::vector<double> a, std::size_t y_dim, std::size_t z_dim) {
  if (a.size() != y_dim * z_dim) throw std::invalid_argument("linear factor-out: A must be z_dim x y_dim");
  // Stored transposed so mu = y A^T is a plain row-vector product.
  std::vector<double> at(a.size());
  for (std::size_t r = 0; r < z_dim; ++r)
    for (std::size_t c = 0; c < y_dim; ++c) at[c * z_dim + r] = a[r * y_dim + c];
  auto w = std::make_shared<Array>(Shape{y_dim, z_dim}, std::move(at));
  GaussianFactorOut q;
  q.y_dim = y_dim;
  q.z_dim = z_dim;
  q.mu = [w](const Array& y) { return matmul(y, *w); };
  q.sigma = [z_dim](const Array& y) { return Array({y.dim(0), z_dim}, 1.0); };
  return q;
}

Array GaussianFactorOut::log_density(const Array& y, const Array& z) const {
  const Array m = mu(y), s = sigma(y);
  for (double v : s.values())
    if (!(v > 0.0)) throw std::domain_error("factor-out: sigma must be positive everywhere");
  const Array log_s = log(s);
  const Array t = mul(sub(z, m), exp(scale(log_s, -1.0)));
  const double c = -0.5 * std::log(2.0 * std::numbers::pi) * static_cast<double>(z_dim);
  return add_scalar(sub(scale(sum_per_sample(mul(t, t)), -0.5), sum_per_sample(log_s)), c);
}

BatchMap GaussianFactorOut::joint_map() const {
  return [q = *this](const Array& yz) {
    const Array y = channel_split(yz, 0, q.y_dim), z = channel_split(yz, q.y_dim, q.z_dim);
    return channel_concat(z, channel_concat(q.mu(y), q.sigma(y)));
  };
}

// ---------------------------------------------------------------------------
// Bounds

double lemma1_c1(double b1, double b2, double b3) {
  const double s = b1 + b2;
  return s * s * b3 * b3 * b3 + s * b3 * b3 + b3;
}

double lemma1_c2(double b1, double b2, double b3) { return (b1 + b2) * b3; }

double lemma1_dominant(double b1, double b2, double b3) { return (b1 + b2) * (b1 + b2) * b3 * b3 * b3; }

namespace {

struct FactorOutSide {
  double b1 = 0.0, b2 = 0.0, b3 = 0.0;
  Array log_p;
};

FactorOutSide evaluate_factor_out(const GaussianFactorOut& q, const Array& y, const Array& z) {
  FactorOutSide s;
  s.b1 = max_abs(z.values());
  s.b2 = max_abs(q.mu(y).values());
  const Array sigma = q.sigma(y);
  for (double v : sigma.values()) s.b3 = std::max(s.b3, v > 0.0 ? 1.0 / v : INFINITY);
  s.log_p = q.log_density(y, z);
  return s;
}

}  // namespace

BoundReport check_lemma1(const GaussianFactorOut& net, std::size_t trials, double delta, std::uint64_t seed,
                         double radius) {
  if (delta < 0.0) throw std::invalid_argument("lemma1: delta must be >= 0");
  NoGradScope ng;
  std::mt19937_64 rng(seed);
  auto ys = perturbed_samples(trials, net.y_dim, radius, delta, rng);
  auto zs = perturbed_samples(trials, net.z_dim, radius, delta, rng);
  const auto clean = evaluate_factor_out(net, ys.clean, zs.clean);
  const auto moved = evaluate_factor_out(net, ys.moved, zs.moved);

  BoundReport r;
  r.check = "lemma1";
  r.delta = delta;
  r.trials = trials;
  r.lipschitz = estimate_lipschitz(net.joint_map(), std::vector<double>(net.y_dim + net.z_dim, 0.0),
                                   radius + delta, 10000, seed + 1);
  auto& L = r.lipschitz;
  L.b1 = std::max(clean.b1, moved.b1);
  L.b2 = std::max(clean.b2, moved.b2);
  L.b3 = std::max(clean.b3, moved.b3);
  const double base = delta * std::sqrt(double(net.z_dim)) * lemma1_c(L.b1, L.b2, L.b3);
  r.bound = L.L_hat * base;
  std::vector<double> slack;
  for (std::size_t i = 0; i < trials; ++i) {
    const double obs = std::abs(clean.log_p[i] - moved.log_p[i]);
    r.max_observed = std::max(r.max_observed, obs);
    if (obs > r.bound + kBoundTolerance) ++r.violations;
    if (obs > 2.0 * r.bound + kBoundTolerance) ++r.violations_2L;
    slack.push_back(ratio(obs, r.bound));
  }
  fill_slack(r, std::move(slack));
  return r;
}

BoundReport check_lemma2(const AdditiveFlow& flow, std::size_t trials, double delta, std::uint64_t seed,
                         double radius, Lemma2Anchor anchor) {
  if (delta < 0.0) throw std::invalid_argument("lemma2: delta must be >= 0");
  NoGradScope ng;
  std::mt19937_64 rng(seed);
  auto xs = perturbed_samples(trials, flow.dim, radius, delta, rng);
  const Array z = flow.forward(xs.clean), zs = flow.forward(xs.moved);
  const Array lp = gaussian_log_density(z), lps = gaussian_log_density(zs);

  BoundReport r;
  r.check = anchor == Lemma2Anchor::clean ? "lemma2" : "lemma2_anchor_perturbed";
  r.delta = delta;
  r.trials = trials;
  r.lipschitz = estimate_lipschitz([&flow](const Array& x) { return flow.forward(x); },
                                   std::vector<double>(flow.dim, 0.0), radius + delta, 10000, seed + 1);
  const double L = r.lipschitz.L_hat;
  r.lipschitz.b1 = max_abs(z.values());
  std::vector<double> slack;
  for (std::size_t i = 0; i < trials; ++i) {
    const double norm = row_norm((anchor == Lemma2Anchor::clean ? z : zs).values(), i, flow.dim);
    const double change = lps[i] - lp[i];
    const double bound = L * delta * norm + 0.5 * delta * delta;
    const double bound2 = 2.0 * L * delta * norm + 0.5 * delta * delta;
    r.bound = std::max(r.bound, bound);
    r.max_observed = std::max(r.max_observed, std::abs(change));
    if (change < -bound - kBoundTolerance) ++r.violations;
    if (change < -bound2 - kBoundTolerance) ++r.violations_2L;
    slack.push_back(ratio(std::max(0.0, -change), bound));
  }
  fill_slack(r, std::move(slack));
  return r;
}

ToyMultiScale ToyMultiScale::random(std::size_t dim, std::uint64_t seed, double gain) {
  if (dim < 4 || dim % 4) throw std::invalid_argument("toy multi-scale: dimension must be a multiple of 4");
  ToyMultiScale m;
  m.dim = dim;
  m.flow1 = AdditiveFlow::random(dim, 2, 16, seed, gain);
  m.fo1 = GaussianFactorOut::random(dim / 2, dim / 2, 16, seed + 1, gain);
  m.flow2 = AdditiveFlow::random(dim / 2, 2, 16, seed + 2, gain);
  m.fo2 = GaussianFactorOut::random(dim / 4, dim / 4, 16, seed + 3, gain);
  return m;
}

ToyMultiScale::Parts ToyMultiScale::split(const Array& x) const {
  Parts p;
  const Array h1 = flow1.forward(x);
  p.y1 = channel_split(h1, 0, dim / 2);
  p.z1 = channel_split(h1, dim / 2, dim / 2);
  const Array h2 = flow2.forward(p.y1);
  p.y2 = channel_split(h2, 0, dim / 4);
  p.z2 = channel_split(h2, dim / 4, dim / 4);
  return p;
}

Array ToyMultiScale::log_density(const Array& x, Array* components) const {
  const Parts p = split(x);
  Array c1 = fo1.log_density(p.y1, p.z1), c2 = fo2.log_density(p.y2, p.z2), c3 = gaussian_log_density(p.y2);
  if (components) {
    components[0] = c1;
    components[1] = c2;
    components[2] = c3;
  }
  return add(add(c1, c2), c3);
}

TheoremReport check_theorem1(const ToyMultiScale& model, std::size_t trials, double delta, std::uint64_t seed,
                             double radius) {
  if (delta < 0.0) throw std::invalid_argument("theorem1: delta must be >= 0");
  NoGradScope ng;
  std::mt19937_64 rng(seed);
  const std::size_t d = model.dim;
  auto xs = perturbed_samples(trials, d, radius, delta, rng);
  const auto pc = model.split(xs.clean), pm = model.split(xs.moved);
  const Array lp = model.log_density(xs.clean), lpm = model.log_density(xs.moved);

  const std::vector<double> origin(d, 0.0);
  const double dom = radius + delta;
  const auto L_in1 = estimate_lipschitz([&](const Array& x) { return model.flow1.forward(x); }, origin, dom, 10000,
                                        seed + 1);
  const auto L_in2 = estimate_lipschitz(
      [&](const Array& x) {
        const auto p = model.split(x);
        return channel_concat(p.y2, p.z2);
      },
      origin, dom, 10000, seed + 2);
  const auto L_main = estimate_lipschitz([&](const Array& x) { return model.split(x).y2; }, origin, dom, 10000,
                                         seed + 3);

  // Factor-out constants over the inputs actually reached.
  auto term = [&](const GaussianFactorOut& q, const Array& yc, const Array& zc, const Array& ym, const Array& zm,
                  double L_in, std::uint64_t s, LipschitzEstimate& out) {
    const auto a = evaluate_factor_out(q, yc, zc), b = evaluate_factor_out(q, ym, zm);
    const double reach = std::max({max_abs(yc.values()), max_abs(zc.values()), max_abs(ym.values()),
                                   max_abs(zm.values()), 1e-12});
    out = estimate_lipschitz(q.joint_map(), std::vector<double>(q.y_dim + q.z_dim, 0.0), reach, 10000, s);
    out.b1 = std::max(a.b1, b.b1);
    out.b2 = std::max(a.b2, b.b2);
    out.b3 = std::max(a.b3, b.b3);
    return out.L_hat * L_in * delta * std::sqrt(double(q.z_dim)) * lemma1_c(out.b1, out.b2, out.b3);
  };
  LipschitzEstimate e1, e2;
  TheoremReport t;
  t.term_fo1 = term(model.fo1, pc.y1, pc.z1, pm.y1, pm.z1, L_in1.L_hat, seed + 4, e1);
  t.term_fo2 = term(model.fo2, pc.y2, pc.z2, pm.y2, pm.z2, L_in2.L_hat, seed + 5, e2);

  BoundReport& r = t.total;
  r.check = "theorem1";
  r.delta = delta;
  r.trials = trials;
  r.lipschitz = L_main;
  r.lipschitz.b1 = std::max(e1.b1, e2.b1);
  r.lipschitz.b2 = std::max(e1.b2, e2.b2);
  r.lipschitz.b3 = std::max(e1.b3, e2.b3);
  std::vector<double> slack;
  double base_sum = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    const double norm = row_norm(pc.y2.values(), i, d / 4);
    const double base = L_main.L_hat * delta * norm + 0.5 * delta * delta;
    const double bound = t.term_fo1 + t.term_fo2 + base;
    const double bound2 = 2.0 * (t.term_fo1 + t.term_fo2 + L_main.L_hat * delta * norm) + 0.5 * delta * delta;
    base_sum += base;
    const double change = lpm[i] - lp[i];
    r.bound = std::max(r.bound, bound);
    r.max_observed = std::max(r.max_observed, std::abs(change));
    if (change < -bound - kBoundTolerance) ++r.violations;
    if (change < -bound2 - kBoundTolerance) ++r.violations_2L;
    slack.push_back(ratio(std::max(0.0, -change), bound));
  }
  fill_slack(r, std::move(slack));
  t.term_base = trials ? base_sum / double(trials) : 0.0;

  const auto& c = r.lipschitz;
  t.b = std::max({c.b1, c.b2, c.b3});
  const double b1 = std::max(e1.b1, e2.b1), b2 = std::max(e1.b2, e2.b2), b3 = std::max(e1.b3, e2.b3);
  t.dominant_ratio_2b = lemma1_dominant(2 * b1, 2 * b2, 2 * b3) / lemma1_dominant(b1, b2, b3);
  t.c_ratio_2b = lemma1_c(2 * b1, 2 * b2, 2 * b3) / lemma1_c(b1, b2, b3);
  return t;
}

ProbeReport affine_vs_additive_probe(std::size_t trials, double delta, std::uint64_t seed, ScaleMode mode,
                                     std::size_t dim, std::size_t lipschitz_samples) {
  if (dim < 2 || dim % 2) throw std::invalid_argument("probe: dimension must be even");
  NoGradScope ng;
  std::mt19937_64 rng(seed);
  const std::size_t h = dim / 2;
  const DenseNet t_net = DenseNet::make(h, 16, h, rng, 0.5);
  const DenseNet s_net = DenseNet::make(h, 16, h, rng, 0.5);

  auto scale_of = [&](const Array& x1) {
    return mode == ScaleMode::positive ? softplus(s_net.forward(x1)) : Array({x1.dim(0), h}, 0.0);
  };
  const BatchMap additive = [&](const Array& x) {
    const Array x1 = channel_split(x, 0, h), x2 = channel_split(x, h, h);
    return channel_concat(x1, add(x2, t_net.forward(x1)));
  };
  const BatchMap affine = [&](const Array& x) {
    const Array x1 = channel_split(x, 0, h), x2 = channel_split(x, h, h);
    return channel_concat(x1, add(mul(x2, exp(scale_of(x1))), t_net.forward(x1)));
  };

  ProbeReport p;
  p.mode = mode;
  p.delta = delta;
  const std::vector<double> origin(dim, 0.0);
  p.L_additive = estimate_lipschitz(additive, origin, 2.0, lipschitz_samples, seed + 1).L_hat;
  p.L_affine = estimate_lipschitz(affine, origin, 2.0, lipschitz_samples, seed + 1).L_hat;

  auto xs = perturbed_samples(trials, dim, 2.0, delta, rng);
  // NLL under N(0, I) with the change-of-variables term; the additive Jacobian is 1.
  auto nll_add = [&](const Array& x) { return scale(gaussian_log_density(additive(x)), -1.0); };
  auto nll_aff = [&](const Array& x) {
    return sub(scale(gaussian_log_density(affine(x)), -1.0), sum_per_sample(scale_of(channel_split(x, 0, h))));
  };
  const Array a0 = nll_add(xs.clean), a1 = nll_add(xs.moved), f0 = nll_aff(xs.clean), f1 = nll_aff(xs.moved);
  for (std::size_t i = 0; i < trials; ++i) {
    p.nll_change_additive += std::abs(a1[i] - a0[i]) / double(trials);
    p.nll_change_affine += std::abs(f1[i] - f0[i]) / double(trials);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Reports

CsvTable bound_report_csv(const std::vector<BoundReport>& reports) {
  CsvTable t({"check", "delta", "trials", "violations", "violations_2L", "max_observed", "bound", "L_hat", "b1", "b2",
              "b3", "slack_q50", "slack_q90", "slack_q99", "slack_max"});
  for (const auto& r : reports)
    t.row()
        .add(r.check)
        .add(r.delta)
        .add(r.trials)
        .add(r.violations)
        .add(r.violations_2L)
        .add(r.max_observed)
        .add(r.bound)
        .add(r.lipschitz.L_hat)
        .add(r.lipschitz.b1)
        .add(r.lipschitz.b2)
        .add(r.lipschitz.b3)
        .add(r.slack_q50)
        .add(r.slack_q90)
        .add(r.slack_q99)
        .add(r.slack_max);
  return t;
}

CsvTable theorem_csv(const std::vector<TheoremReport>& reports) {
  CsvTable t({"delta", "term_fo1", "term_fo2", "term_base", "b", "dominant_ratio_2b", "c_ratio_2b", "violations"});
  for (const auto& r : reports)
    t.row()
        .add(r.total.delta)
        .add(r.term_fo1)
        .add(r.term_fo2)
        .add(r.term_base)
        .add(r.b)
        .add(r.dominant_ratio_2b)
        .add(r.c_ratio_2b)
        .add(r.total.violations);
  return t;
}

CsvTable probe_csv(const std::vector<ProbeReport>& probes) {
  CsvTable t({"scale", "delta", "L_additive", "L_affine", "nll_change_additive", "nll_change_affine"});
  for (const auto& p : probes)
    t.row()
        .add(p.mode == ScaleMode::positive ? "positive" : "zero")
        .add(p.delta)
        .add(p.L_additive)
        .add(p.L_affine)
        .add(p.nll_change_additive)
        .add(p.nll_change_affine);
  return t;
}

std::string summary(const BoundReport& r) {
  std::ostringstream os;
  os << r.check << " delta=" << fmt6(r.delta) << ": " << r.violations << "/" << r.trials << " violations ("
     << r.violations_2L << " with 2*L_hat), max |change| " << fmt6(r.max_observed) << " vs bound " << fmt6(r.bound)
     << ", L_hat " << fmt6(r.lipschitz.L_hat) << " (lower bound), median observed/bound " << fmt6(r.slack_q50);
  return os.str();
}

TheorySuite verify_theory(std::size_t trials, std::uint64_t seed) {
  TheorySuite s;
  const auto fo = GaussianFactorOut::random(8, 8, 16, seed, 0.8);
  std::mt19937_64 rng(seed + 7);
  std::normal_distribution<double> g;
  std::vector<double> a(64);
  for (double& x : a) x = g(rng) / std::sqrt(8.0);
  const auto fo_linear = GaussianFactorOut::linear(a, 8, 8);

  // Toy main flow fitted to a correlated gaussian.
  AdditiveFlow flow = AdditiveFlow::random(8, 4, 16, seed + 10, 0.5);
  {
    std::vector<double> mix(64, 0.0), data(512 * 8);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c <= r; ++c) mix[r * 8 + c] = r == c ? 1.0 : 0.5 * g(rng);
    for (std::size_t i = 0; i < 512; ++i) {
      double e[8];
      for (double& x : e) x = g(rng);
      for (std::size_t r = 0; r < 8; ++r) {
        double v = 0.0;
        for (std::size_t c = 0; c < 8; ++c) v += mix[r * 8 + c] * e[c];
        data[i * 8 + r] = v;
      }
    }
    fit_gaussian_flow(flow, Array({512, 8}, data), 200, 1e-2);
  }
  const auto toy = ToyMultiScale::random(16, seed + 20);

  for (double delta : {0.1, 1.0}) {
    s.reports.push_back(check_lemma1(fo, trials, delta, seed + 30));
    auto lin = check_lemma1(fo_linear, trials, delta, seed + 31);
    lin.check = "lemma1_linear";
    s.reports.push_back(lin);
    s.reports.push_back(check_lemma2(flow, trials, delta, seed + 32, 2.0, Lemma2Anchor::clean));
    s.reports.push_back(check_lemma2(flow, trials, delta, seed + 32, 2.0, Lemma2Anchor::perturbed));
    s.theorems.push_back(check_theorem1(toy, trials, delta, seed + 33));
    s.reports.push_back(s.theorems.back().total);
    s.probes.push_back(affine_vs_additive_probe(trials, delta, seed + 34, ScaleMode::positive));
    s.probes.push_back(affine_vs_additive_probe(trials, delta, seed + 34, ScaleMode::zero));
  }
  return s;
}

}  // namespace rifl
