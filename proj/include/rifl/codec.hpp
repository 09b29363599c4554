#pragma once

// Lossless coding of flow latents with rANS under per-element discretized
// logistic models, and the RIFL container format.
//
// Container layout (little-endian):
//   "RIFL" | version u8 | mode u8 | C u32 | H u32 | W u32 | fingerprint u64 |
//   payload length u64 | payload

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "rifl/flow.hpp"
#include "rifl/image.hpp"

namespace rifl {

class CodecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr unsigned kCdfPrecisionBits = 12;
inline constexpr std::uint32_t kCdfTotal = 1u << kCdfPrecisionBits;
inline constexpr unsigned kEscapeRawBits = 16;
inline constexpr std::int64_t kLatentMin = -32768;
inline constexpr std::int64_t kLatentMax = 32767;
/// Widest symbol window; one slot of the 4096 is always the escape.
inline constexpr std::size_t kMaxWindow = kCdfTotal - 1;
inline constexpr double kWindowHalfWidthScales = 16.0;

/// 12-bit quantized model over the integer window [lo, hi] plus an escape slot
/// (the last slot) standing for every value outside the window.
struct QuantizedCdf {
  std::int64_t lo = 0;
  std::int64_t hi = -1;
  std::vector<std::uint32_t> freq;  // window symbols then escape
  std::vector<std::uint32_t> cum;   // cum[i] = sum of freq[0..i), cum.back() == kCdfTotal

  std::size_t slots() const { return freq.size(); }
  std::size_t escape_slot() const { return freq.size() - 1; }
  bool in_window(std::int64_t z) const { return z >= lo && z <= hi; }
  std::size_t slot_of(std::int64_t z) const { return in_window(z) ? static_cast<std::size_t>(z - lo) : escape_slot(); }
  /// Slot whose cumulative range contains c, for c in [0, kCdfTotal).
  std::size_t slot_at(std::uint32_t c) const;
};

/// Window [mu - 16s, mu + 16s] clipped to the latent range and to kMaxWindow symbols.
QuantizedCdf build_cdf(double mu, double scale);
/// Explicit window; throws CodecError if empty or wider than kMaxWindow.
QuantizedCdf build_cdf(double mu, double scale, std::int64_t lo, std::int64_t hi);

/// rANS with a 64-bit state emitting 32-bit words. Symbols are pushed in
/// reverse decode order; finish() yields the byte stream the decoder reads forward.
class RansEncoder {
 public:
  void put(std::uint32_t start, std::uint32_t freq, unsigned scale_bits);
  std::vector<std::uint8_t> finish();

 private:
  std::uint64_t state_ = 1ull << 31;
  std::vector<std::uint32_t> words_;
};

class RansDecoder {
 public:
  explicit RansDecoder(std::span<const std::uint8_t> bytes);
  std::uint32_t peek(unsigned scale_bits) const;
  void advance(std::uint32_t start, std::uint32_t freq, unsigned scale_bits);
  /// True once every payload word has been consumed.
  bool exhausted() const { return pos_ == bytes_.size(); }
  /// Throws CodecError unless the stream was consumed exactly back to the
  /// encoder's initial state.
  void check_complete() const;

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::uint64_t state_ = 0;
};

/// Pushes one latent value (escape + raw 16-bit value when out of window).
void encode_symbol(RansEncoder& enc, const QuantizedCdf& cdf, std::int64_t value);
std::int64_t decode_symbol(RansDecoder& dec, const QuantizedCdf& cdf);

/// values[i] coded under cdfs[i]; decoding returns them in the same order.
std::vector<std::uint8_t> rans_encode(std::span<const std::int64_t> values, std::span<const QuantizedCdf> cdfs);
std::vector<std::int64_t> rans_decode(std::span<const std::uint8_t> bytes, std::span<const QuantizedCdf> cdfs);

enum class CodingMode : std::uint8_t { coded = 0, raw = 1 };

struct Bitstream {
  static constexpr std::uint8_t kVersion = 1;
  static constexpr std::size_t kHeaderBytes = 4 + 1 + 1 + 12 + 8 + 8;

  CodingMode mode = CodingMode::coded;
  std::uint32_t channels = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint64_t fingerprint = 0;
  std::vector<std::uint8_t> payload;

  std::size_t dims() const { return std::size_t{channels} * height * width; }
  std::vector<std::uint8_t> serialize() const;
  static Bitstream parse(std::span<const std::uint8_t> bytes);
};

struct CompressionResult {
  Bitstream stream;
  LossBreakdown model_rate;
  double coded_bits = 0.0;    // rANS payload size, even when raw passthrough won
  double realized_bpd = 0.0;  // payload bits per input dimension
  double cr = 0.0;            // 8 / realized_bpd, floored at 1
};

CompressionResult compress(const FlowModel& model, const Image& image, std::uint64_t fingerprint);
/// `decoded_latents`, when given, receives the latents as the decoder rebuilt them.
Image decompress(const FlowModel& model, const Bitstream& stream, std::uint64_t fingerprint,
                 LatentStack* decoded_latents = nullptr);

/// Latents as the encoder saw them (same path compress() uses).
LatentStack encoder_latents(const FlowModel& model, const Image& image);

}  // namespace rifl
