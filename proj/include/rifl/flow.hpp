#pragma once

// Integer discrete flow with a three-stage multi-scale layout.
//
//   x -> squeeze -> 4 additive couplings -> split (y1 | z1)
//   y1 -> squeeze -> 4 additive couplings -> split (y2 | z2)
//   y2 -> 4 additive couplings -> z3
//
// z1 and z2 are scored by discretized logistics whose parameters come from
// factor-out networks applied to y1 and y2; z3 is scored by a learned
// per-dimension base prior. Translations are rounded, so the whole map is an
// exact bijection on integer arrays.

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rifl/image.hpp"
#include "rifl/tensor.hpp"

namespace rifl {

/// Architecture descriptor. Stored verbatim in checkpoints.
struct FlowConfig {
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t couplings_per_stage = 4;
  std::size_t hidden = 32;         // translation-net width
  std::size_t factor_hidden = 32;  // factor-out net width

  bool operator==(const FlowConfig&) const = default;
};

inline constexpr std::size_t kStages = 3;
inline constexpr std::size_t kFactorOuts = 2;

// Pixel values are fed to networks as (v - kPixelCenter) / kPixelScale and
// network outputs are mapped back to pixel units with the same constants.
inline constexpr double kPixelCenter = 128.0;
inline constexpr double kPixelScale = 128.0;
// log-scale offset of every prior: an untrained prior has scale e^kLogScaleOffset.
inline constexpr double kLogScaleOffset = 2.772588722239781;  // ln 16

/// Stack of 3x3 same-padded convolutions with relu between layers.
struct ConvNet {
  std::vector<Array> weights;  // (out, in, 3, 3)
  std::vector<Array> biases;   // (out)

  static ConvNet make(const std::vector<std::size_t>& widths, std::mt19937_64& rng, bool zero_last);
  Array forward(const Array& x) const;
};

struct CouplingLayer {
  ConvNet net;
  bool update_second_half = true;  // otherwise the first half is shifted
};

struct PriorParams {
  Array mu;
  Array log_scale;
};

/// One named, mutable parameter.
struct ParamRef {
  std::string name;
  Array* array;
};

struct ConstParamRef {
  std::string name;
  const Array* array;
};

class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(FlowConfig config, std::uint64_t seed);

  const FlowConfig& config() const { return config_; }

  /// Shape (C, H, W) of the working array at the entry of stage s, after squeeze.
  Shape stage_shape(std::size_t stage) const;
  /// Shape (C, H, W) of latent z_i, i in {0, 1, 2}.
  Shape latent_shape(std::size_t level) const;
  std::size_t latent_dims(std::size_t level) const { return shape_numel(latent_shape(level)); }
  std::size_t input_dims() const { return config_.channels * config_.height * config_.width; }

  /// Forward couplings of one stage on a (N, C, H, W) array (already squeezed).
  Array couple(std::size_t stage, const Array& h) const;
  /// Exact inverse of couple().
  Array uncouple(std::size_t stage, const Array& h) const;

  /// Discretized-logistic parameters for z_{level+1} given y_{level+1}.
  PriorParams factor_out_prior(std::size_t level, const Array& y) const;
  PriorParams base_prior(std::size_t batch) const;

  std::vector<ParamRef> parameters();
  std::vector<ConstParamRef> parameters() const;

  /// Conv kernels of the first factor-out network.
  std::vector<Array*> first_factor_out_kernels();
  std::vector<const Array*> first_factor_out_kernels() const;

  // Exposed for tests and tooling that hand-build models.
  std::array<std::vector<CouplingLayer>, kStages> stages;
  std::array<ConvNet, kFactorOuts> factor_outs;
  Array base_mu;         // (C3, H3, W3), mapped as kPixelCenter + kPixelScale * p
  Array base_log_scale;  // (C3, H3, W3), offset by kLogScaleOffset

 private:
  FlowConfig config_;
};

/// Differentiable batched forward pass.
struct FlowOutputs {
  std::array<Array, 3> latents;   // z1, z2, z3 as (N, c, h, w)
  std::array<PriorParams, 3> priors;
  std::array<Array, 3> nll_bits;  // per-sample component NLL in bits, shape (N)
};

FlowOutputs flow_forward_batch(const FlowModel& model, const Array& x);

/// Integer latents of one image.
struct Latent {
  Shape shape;
  std::vector<std::int64_t> values;
};

struct LatentStack {
  std::array<Latent, 3> z;
  std::size_t total_size() const;
};

/// Per-component rates; each component's bpd is relative to its own dims.
struct LossBreakdown {
  double fo1_bpd = 0.0;
  double fo2_bpd = 0.0;
  double mf_bpd = 0.0;
  double total_bpd = 0.0;
  std::array<std::size_t, 3> dims{};

  double nll_bits() const;
  double component_bits(std::size_t j) const;
  double component_bpd(std::size_t j) const;
};

LossBreakdown breakdown_from_bits(const std::array<double, 3>& bits, const std::array<std::size_t, 3>& dims);

/// (N, C, H, W) or (C, H, W) integer array in [0, 255] for a single image.
std::pair<LatentStack, LossBreakdown> flow_forward(const FlowModel& model, const Array& x);
std::pair<LatentStack, LossBreakdown> flow_forward(const FlowModel& model, const Image& image);

/// Exact integer inverse; returns a (C, H, W) array.
Array flow_inverse(const FlowModel& model, const LatentStack& latents);
Image flow_inverse_image(const FlowModel& model, const LatentStack& latents);

/// log P(z) under a discretized logistic; throws if scale <= 0.
double disc_logistic_logpmf(double z, double mu, double scale);

struct RateMetrics {
  double bpd = 0.0;
  double cr = 0.0;
};

/// cr = 8 / bpd, floored at 1 once bpd reaches 8.
RateMetrics metrics(const LossBreakdown& lb);
double compression_ratio(double bpd);

/// Throws unless every value is an integer in [0, 255] and the shape is (C, H, W)
/// with H and W divisible by 4, matching the model.
void validate_flow_input(const FlowModel& model, const Array& x);

}  // namespace rifl
