#include "rifl/flow.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rifl {

namespace {

constexpr double kBitsPerNat = 1.0 / std::numbers::ln2;

Array normalized(const Array& v) { return scale(add_scalar(v, -kPixelCenter), 1.0 / kPixelScale); }

Array component_bits(const Array& z, const PriorParams& p) {
  return sum_per_sample(scale(disc_logistic_logpmf(z, p.mu, p.log_scale), -kBitsPerNat));
}

Latent to_latent(const Array& z) {
  Latent out;
  out.shape.assign(z.shape().begin() + 1, z.shape().end());
  out.values.reserve(z.size());
  for (double v : z.values()) out.values.push_back(static_cast<std::int64_t>(v));
  return out;
}

Array from_latent(const Latent& z, const Shape& expected, const char* which) {
  if (z.shape != expected || z.values.size() != shape_numel(expected))
    throw ShapeError(std::string("flow_inverse: latent ") + which + " has shape " + shape_string(z.shape) +
                     ", model expects " + shape_string(expected));
  Shape s{1};
  s.insert(s.end(), expected.begin(), expected.end());
  std::vector<double> v(z.values.begin(), z.values.end());
  return Array(std::move(s), std::move(v));
}

}  // namespace

Array to_batch(const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("to_batch: no images");
  const Image& f = images.front();
  std::vector<double> v;
  v.reserve(images.size() * f.size());
  for (const Image& im : images) {
    if (im.channels != f.channels || im.height != f.height || im.width != f.width)
      throw ShapeError("to_batch: images differ in shape");
    v.insert(v.end(), im.pixels.begin(), im.pixels.end());
  }
  return Array({images.size(), f.channels, f.height, f.width}, std::move(v));
}

Array to_batch(const Image& image) { return to_batch(std::vector<Image>{image}); }

// ---------------------------------------------------------------------------
// ConvNet

ConvNet ConvNet::make(const std::vector<std::size_t>& widths, std::mt19937_64& rng, bool zero_last) {
  ConvNet net;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t in = widths[l], out = widths[l + 1];
    std::vector<double> w(out * in * 9, 0.0);
    const bool last = l + 2 == widths.size();
    if (!(last && zero_last)) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in * 9)));
      for (double& x : w) x = dist(rng);
    }
    net.weights.push_back(Array::parameter({out, in, 3, 3}, std::move(w)));
    net.biases.push_back(Array::parameter({out}, std::vector<double>(out, 0.0)));
  }
  return net;
}

Array ConvNet::forward(const Array& x) const {
  Array h = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    h = add_channel_bias(conv2d(h, weights[l], 1), biases[l]);
    if (l + 1 < weights.size()) h = relu(h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// FlowModel

FlowModel::FlowModel(FlowConfig config, std::uint64_t seed) : config_(config) {
  if (config_.channels == 0 || config_.height == 0 || config_.width == 0 || config_.height % 4 ||
      config_.width % 4)
    throw std::invalid_argument("FlowModel: spatial dims must be positive multiples of 4");
  if (config_.couplings_per_stage == 0 || config_.hidden == 0 || config_.factor_hidden == 0)
    throw std::invalid_argument("FlowModel: empty layer configuration");

  std::mt19937_64 rng(seed);
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::size_t half = stage_shape(s)[0] / 2;
    for (std::size_t l = 0; l < config_.couplings_per_stage; ++l) {
      CouplingLayer layer;
      layer.net = ConvNet::make({half, config_.hidden, config_.hidden, half}, rng, true);
      layer.update_second_half = l % 2 == 0;
      stages[s].push_back(std::move(layer));
    }
  }
  for (std::size_t f = 0; f < kFactorOuts; ++f) {
    const std::size_t half = stage_shape(f)[0] / 2;
    factor_outs[f] = ConvNet::make({half, config_.factor_hidden, 2 * half}, rng, true);
  }
  const Shape zs = latent_shape(2);
  base_mu = Array::parameter(zs, std::vector<double>(shape_numel(zs), 0.0));
  base_log_scale = Array::parameter(zs, std::vector<double>(shape_numel(zs), 0.0));
}

Shape FlowModel::stage_shape(std::size_t stage) const {
  const std::size_t c0 = 4 * config_.channels;
  switch (stage) {
    case 0: return {c0, config_.height / 2, config_.width / 2};
    case 1: return {2 * c0, config_.height / 4, config_.width / 4};
    case 2: return {c0, config_.height / 4, config_.width / 4};
    default: throw std::out_of_range("stage_shape: no stage " + std::to_string(stage));
  }
}

Shape FlowModel::latent_shape(std::size_t level) const {
  if (level < kFactorOuts) {
    Shape s = stage_shape(level);
    s[0] /= 2;
    return s;
  }
  if (level == 2) return stage_shape(2);
  throw std::out_of_range("latent_shape: no level " + std::to_string(level));
}

Array FlowModel::couple(std::size_t stage, const Array& h) const {
  const std::size_t half = h.dim(1) / 2;
  Array a = channel_split(h, 0, half);
  Array b = channel_split(h, half, half);
  for (const CouplingLayer& layer : stages.at(stage)) {
    Array& cond = layer.update_second_half ? a : b;
    Array& upd = layer.update_second_half ? b : a;
    Array t = round_ste(scale(layer.net.forward(normalized(cond)), kPixelScale));
    upd = add(upd, t);
  }
  return channel_concat(a, b);
}

Array FlowModel::uncouple(std::size_t stage, const Array& h) const {
  const std::size_t half = h.dim(1) / 2;
  Array a = channel_split(h, 0, half);
  Array b = channel_split(h, half, half);
  const auto& layers = stages.at(stage);
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    Array& cond = it->update_second_half ? a : b;
    Array& upd = it->update_second_half ? b : a;
    Array t = round_ste(scale(it->net.forward(normalized(cond)), kPixelScale));
    upd = sub(upd, t);
  }
  return channel_concat(a, b);
}

PriorParams FlowModel::factor_out_prior(std::size_t level, const Array& y) const {
  Array raw = factor_outs.at(level).forward(normalized(y));
  const std::size_t c = raw.dim(1) / 2;
  return {add_scalar(scale(channel_split(raw, 0, c), kPixelScale), kPixelCenter),
          add_scalar(channel_split(raw, c, c), kLogScaleOffset)};
}

PriorParams FlowModel::base_prior(std::size_t batch) const {
  return {add_scalar(scale(tile_batch(base_mu, batch), kPixelScale), kPixelCenter),
          add_scalar(tile_batch(base_log_scale, batch), kLogScaleOffset)};
}

std::vector<ParamRef> FlowModel::parameters() {
  std::vector<ParamRef> out;
  for (std::size_t s = 0; s < kStages; ++s)
    for (std::size_t l = 0; l < stages[s].size(); ++l) {
      auto& net = stages[s][l].net;
      const std::string prefix = "stage" + std::to_string(s) + ".coupling" + std::to_string(l) + ".conv";
      for (std::size_t k = 0; k < net.weights.size(); ++k) {
        out.push_back({prefix + std::to_string(k) + ".weight", &net.weights[k]});
        out.push_back({prefix + std::to_string(k) + ".bias", &net.biases[k]});
      }
    }
  for (std::size_t f = 0; f < kFactorOuts; ++f) {
    auto& net = factor_outs[f];
    const std::string prefix = "factor_out" + std::to_string(f) + ".conv";
    for (std::size_t k = 0; k < net.weights.size(); ++k) {
      out.push_back({prefix + std::to_string(k) + ".weight", &net.weights[k]});
      out.push_back({prefix + std::to_string(k) + ".bias", &net.biases[k]});
    }
  }
  out.push_back({"base.mu", &base_mu});
  out.push_back({"base.log_scale", &base_log_scale});
  return out;
}

std::vector<ConstParamRef> FlowModel::parameters() const {
  std::vector<ConstParamRef> out;
  for (const ParamRef& p : const_cast<FlowModel*>(this)->parameters()) out.push_back({p.name, p.array});
  return out;
}

std::vector<Array*> FlowModel::first_factor_out_kernels() {
  std::vector<Array*> out;
  for (Array& w : factor_outs[0].weights) out.push_back(&w);
  return out;
}

std::vector<const Array*> FlowModel::first_factor_out_kernels() const {
  std::vector<const Array*> out;
  for (const Array& w : factor_outs[0].weights) out.push_back(&w);
  return out;
}

// ---------------------------------------------------------------------------
// Forward / inverse

FlowOutputs flow_forward_batch(const FlowModel& model, const Array& x) {
  const FlowConfig& cfg = model.config();
  if (x.rank() != 4 || x.dim(1) != cfg.channels || x.dim(2) != cfg.height || x.dim(3) != cfg.width)
    throw ShapeError("flow_forward: input shape " + shape_string(x.shape()) + " does not match model (" +
                     std::to_string(cfg.channels) + ", " + std::to_string(cfg.height) + ", " +
                     std::to_string(cfg.width) + ")");
  const std::size_t n = x.dim(0);
  FlowOutputs out;
  Array h = x;
  for (std::size_t level = 0; level < kFactorOuts; ++level) {
    h = model.couple(level, space_to_depth(h));
    const std::size_t half = h.dim(1) / 2;
    Array y = channel_split(h, 0, half);
    out.latents[level] = channel_split(h, half, half);
    out.priors[level] = model.factor_out_prior(level, y);
    out.nll_bits[level] = component_bits(out.latents[level], out.priors[level]);
    h = y;
  }
  out.latents[2] = model.couple(2, h);
  out.priors[2] = model.base_prior(n);
  out.nll_bits[2] = component_bits(out.latents[2], out.priors[2]);
  return out;
}

void validate_flow_input(const FlowModel& model, const Array& x) {
  const FlowConfig& cfg = model.config();
  const bool batched = x.rank() == 4;
  if (!(x.rank() == 3 || (batched && x.dim(0) == 1)))
    throw ShapeError("flow_forward: expected a (C, H, W) image, got " + shape_string(x.shape()));
  const std::size_t off = batched ? 1 : 0;
  const std::size_t c = x.dim(off), h = x.dim(off + 1), w = x.dim(off + 2);
  if (h % 4 || w % 4)
    throw ShapeError("flow_forward: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                     " are not divisible by 4");
  if (c != cfg.channels || h != cfg.height || w != cfg.width)
    throw ShapeError("flow_forward: image shape " + shape_string(x.shape()) + " does not match model");
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (v != std::floor(v) || v < 0.0 || v > 255.0)
      throw std::invalid_argument("flow_forward: value " + std::to_string(v) + " at index " + std::to_string(i) +
                                  " is not an integer pixel in [0, 255]");
  }
}

std::pair<LatentStack, LossBreakdown> flow_forward(const FlowModel& model, const Array& x) {
  validate_flow_input(model, x);
  NoGradScope no_grad;
  Array batch = x.rank() == 4 ? x.detach() : reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  FlowOutputs fo = flow_forward_batch(model, batch);
  LatentStack stack;
  std::array<double, 3> bits{};
  std::array<std::size_t, 3> dims{};
  for (std::size_t j = 0; j < 3; ++j) {
    stack.z[j] = to_latent(fo.latents[j]);
    bits[j] = fo.nll_bits[j][0];
    dims[j] = model.latent_dims(j);
  }
  return {std::move(stack), breakdown_from_bits(bits, dims)};
}

std::pair<LatentStack, LossBreakdown> flow_forward(const FlowModel& model, const Image& image) {
  return flow_forward(model, to_batch(image));
}

Array flow_inverse(const FlowModel& model, const LatentStack& latents) {
  NoGradScope no_grad;
  Array z1 = from_latent(latents.z[0], model.latent_shape(0), "z1");
  Array z2 = from_latent(latents.z[1], model.latent_shape(1), "z2");
  Array z3 = from_latent(latents.z[2], model.latent_shape(2), "z3");
  Array y2 = model.uncouple(2, z3);
  Array y1 = depth_to_space(model.uncouple(1, channel_concat(y2, z2)));
  Array x = depth_to_space(model.uncouple(0, channel_concat(y1, z1)));
  return reshape(x, {x.dim(1), x.dim(2), x.dim(3)});
}

Image flow_inverse_image(const FlowModel& model, const LatentStack& latents) {
  Array x = flow_inverse(model, latents);
  Image im(x.dim(0), x.dim(1), x.dim(2));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (v < 0.0 || v > 255.0) throw std::runtime_error("flow_inverse: reconstructed value out of pixel range");
    im.pixels[i] = static_cast<std::uint8_t>(v);
  }
  return im;
}

std::size_t LatentStack::total_size() const {
  std::size_t n = 0;
  for (const Latent& l : z) n += l.values.size();
  return n;
}

// ---------------------------------------------------------------------------
// Likelihood and rates

double disc_logistic_logpmf(double z, double mu, double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("disc_logistic_logpmf: scale must be positive");
  Array out = disc_logistic_logpmf(Array::scalar(z), Array::scalar(mu), Array::scalar(std::log(scale)));
  return out[0];
}

double LossBreakdown::component_bpd(std::size_t j) const {
  switch (j) {
    case 0: return fo1_bpd;
    case 1: return fo2_bpd;
    case 2: return mf_bpd;
    default: throw std::out_of_range("component_bpd");
  }
}

double LossBreakdown::component_bits(std::size_t j) const {
  return component_bpd(j) * static_cast<double>(dims.at(j));
}

double LossBreakdown::nll_bits() const {
  return component_bits(0) + component_bits(1) + component_bits(2);
}

LossBreakdown breakdown_from_bits(const std::array<double, 3>& bits, const std::array<std::size_t, 3>& dims) {
  LossBreakdown lb;
  lb.dims = dims;
  lb.fo1_bpd = bits[0] / static_cast<double>(dims[0]);
  lb.fo2_bpd = bits[1] / static_cast<double>(dims[1]);
  lb.mf_bpd = bits[2] / static_cast<double>(dims[2]);
  lb.total_bpd = (bits[0] + bits[1] + bits[2]) / static_cast<double>(dims[0] + dims[1] + dims[2]);
  return lb;
}

double compression_ratio(double bpd) {
  if (bpd >= 8.0) return 1.0;
  return 8.0 / bpd;
}

RateMetrics metrics(const LossBreakdown& lb) { return {lb.total_bpd, compression_ratio(lb.total_bpd)}; }

}  // namespace rifl
