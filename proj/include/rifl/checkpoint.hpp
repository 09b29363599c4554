#pragma once

// RIFM checkpoint (little-endian):
//   "RIFM" | version u32
//   | architecture: channels, height, width, stages, factor_outs, couplings_per_stage, hidden, factor_hidden (u32 each)
//   | mode str | seed u64 | config_hash u64
//   | parameter count u32 | per parameter: name str | rank u32 | dims u32... | values f64...
//   | FNV-1a 64 of every preceding byte
// str = u32 length + bytes.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rifl/byteio.hpp"
#include "rifl/flow.hpp"

namespace rifl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Truncated, corrupted or non-RIFM bytes.
class CheckpointIntegrityError : public FormatError {
 public:
  using FormatError::FormatError;
};

class CheckpointVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Architecture or parameter shapes disagree with the target model.
class CheckpointShapeError : public FormatError {
 public:
  using FormatError::FormatError;
};

struct CheckpointMeta {
  std::string mode = "untrained";  // training-mode provenance
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

std::vector<std::uint8_t> save_checkpoint(const FlowModel& model, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  FlowModel model;
  CheckpointMeta meta;
  std::uint64_t fingerprint = 0;  // identifies the model inside bitstreams
};

/// Builds the model from the stored architecture. Nothing is returned unless
/// the whole file validates.
LoadedCheckpoint load_checkpoint(std::span<const std::uint8_t> bytes);
/// Loads into an existing model, which must have the stored architecture.
CheckpointMeta load_checkpoint_into(FlowModel& model, std::span<const std::uint8_t> bytes);

std::uint64_t checkpoint_fingerprint(std::span<const std::uint8_t> bytes);

std::string describe(const FlowConfig& arch);

}  // namespace rifl
