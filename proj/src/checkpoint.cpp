#include "rifl/checkpoint.hpp"

#include <algorithm>

namespace rifl {

namespace {

constexpr std::size_t kTrailer = 8;

struct Blob {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Parsed {
  FlowConfig arch;
  CheckpointMeta meta;
  std::vector<Blob> blobs;
};

Parsed parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 + kTrailer || !std::equal(bytes.begin(), bytes.begin() + 4, "RIFM"))
    throw CheckpointIntegrityError("checkpoint: not a RIFM file at byte offset 0");
  const auto body = bytes.first(bytes.size() - kTrailer);
  ByteReader trailer(bytes.last(kTrailer), "checkpoint");
  if (trailer.u64() != fnv1a64(body))
    throw CheckpointIntegrityError("checkpoint: content hash mismatch (truncated or corrupted file) at byte offset " +
                                   std::to_string(body.size()));

  ByteReader r(body, "checkpoint");
  r.raw(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint: version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  Parsed p;
  p.arch.channels = r.u32();
  p.arch.height = r.u32();
  p.arch.width = r.u32();
  const std::uint32_t stages = r.u32(), factor_outs = r.u32();
  p.arch.couplings_per_stage = r.u32();
  p.arch.hidden = r.u32();
  p.arch.factor_hidden = r.u32();
  if (stages != kStages || factor_outs != kFactorOuts)
    throw CheckpointShapeError("checkpoint: stored model has " + std::to_string(stages) + " stages and " +
                               std::to_string(factor_outs) + " factor-outs; this build supports " +
                               std::to_string(kStages) + " and " + std::to_string(kFactorOuts));
  p.meta.mode = r.str();
  p.meta.seed = r.u64();
  p.meta.config_hash = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    Blob b;
    b.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank));
    for (std::uint32_t i = 0; i < rank; ++i) b.shape.push_back(r.u32());
    const std::size_t n = shape_numel(b.shape);
    if (n > r.remaining() / 8) r.fail("parameter '" + b.name + "' overruns the file");
    b.values.resize(n);
    for (double& v : b.values) v = r.f64();
    p.blobs.push_back(std::move(b));
  }
  if (r.remaining() != 0) r.fail("trailing bytes after the last parameter");
  return p;
}

void assign(FlowModel& model, const Parsed& p) {
  if (!(model.config() == p.arch))
    throw CheckpointShapeError("checkpoint: architecture mismatch: file has " + describe(p.arch) +
                               ", model has " + describe(model.config()));
  auto params = model.parameters();
  if (params.size() != p.blobs.size())
    throw CheckpointShapeError("checkpoint: file has " + std::to_string(p.blobs.size()) + " parameters, model has " +
                               std::to_string(params.size()));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Blob& b = p.blobs[k];
    if (b.name != params[k].name || b.shape != params[k].array->shape())
      throw CheckpointShapeError("checkpoint: parameter " + std::to_string(k) + " is '" + b.name + "' " +
                                 shape_string(b.shape) + ", model expects '" + params[k].name + "' " +
                                 shape_string(params[k].array->shape()));
  }
  for (std::size_t k = 0; k < params.size(); ++k)
    std::copy(p.blobs[k].values.begin(), p.blobs[k].values.end(), params[k].array->values_mut().begin());
}

}  // namespace

std::string describe(const FlowConfig& a) {
  return std::to_string(a.channels) + "x" + std::to_string(a.height) + "x" + std::to_string(a.width) + ", " +
         std::to_string(a.couplings_per_stage) + " couplings/stage, hidden " + std::to_string(a.hidden) +
         ", factor hidden " + std::to_string(a.factor_hidden);
}

std::vector<std::uint8_t> save_checkpoint(const FlowModel& model, const CheckpointMeta& meta) {
  ByteWriter w;
  for (char c : {'R', 'I', 'F', 'M'}) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  const FlowConfig& a = model.config();
  for (std::size_t v : {a.channels, a.height, a.width, kStages, kFactorOuts, a.couplings_per_stage, a.hidden,
                        a.factor_hidden})
    w.u32(static_cast<std::uint32_t>(v));
  w.str(meta.mode);
  w.u64(meta.seed);
  w.u64(meta.config_hash);
  const auto params = model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.array->rank()));
    for (std::size_t d : p.array->shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : p.array->values()) w.f64(v);
  }
  const std::uint64_t h = fnv1a64(w.bytes());
  w.u64(h);
  return w.take();
}

LoadedCheckpoint load_checkpoint(std::span<const std::uint8_t> bytes) {
  const Parsed p = parse(bytes);
  LoadedCheckpoint out;
  out.model = FlowModel(p.arch, 0);
  assign(out.model, p);
  out.meta = p.meta;
  out.fingerprint = checkpoint_fingerprint(bytes);
  return out;
}

CheckpointMeta load_checkpoint_into(FlowModel& model, std::span<const std::uint8_t> bytes) {
  const Parsed p = parse(bytes);
  assign(model, p);
  return p.meta;
}

std::uint64_t checkpoint_fingerprint(std::span<const std::uint8_t> bytes) { return fnv1a64(bytes); }

}  // namespace rifl
