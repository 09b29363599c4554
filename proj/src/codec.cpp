#include "rifl/codec.hpp"

#include <algorithm>
#include <cassert>
#include <array>
#include <cmath>
#include <limits>
#include <queue>
#include <string>

#include "rifl/byteio.hpp"

namespace rifl {

namespace {

constexpr std::uint64_t kRansLow = 1ull << 31;

double logistic(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

std::uint32_t escape_word(std::int64_t v) { return static_cast<std::uint16_t>(static_cast<std::int16_t>(v)); }

}  // namespace

// ---------------------------------------------------------------------------
// Quantized CDFs

std::size_t QuantizedCdf::slot_at(std::uint32_t c) const {
  auto it = std::upper_bound(cum.begin(), cum.end(), c);
  return static_cast<std::size_t>(it - cum.begin()) - 1;
}

QuantizedCdf build_cdf(double mu, double scale) {
  if (!std::isfinite(mu) || !(scale > 0.0) || !std::isfinite(scale))
    throw CodecError("build_cdf: invalid parameters mu=" + std::to_string(mu) + " scale=" + std::to_string(scale));
  const double lo_f = std::clamp(std::floor(mu - kWindowHalfWidthScales * scale), double(kLatentMin), double(kLatentMax));
  const double hi_f = std::clamp(std::ceil(mu + kWindowHalfWidthScales * scale), double(kLatentMin), double(kLatentMax));
  auto lo = static_cast<std::int64_t>(lo_f);
  auto hi = static_cast<std::int64_t>(hi_f);
  if (static_cast<std::size_t>(hi - lo + 1) > kMaxWindow) {
    const auto half = static_cast<std::int64_t>(kMaxWindow / 2);
    const auto center =
        std::clamp(static_cast<std::int64_t>(std::llround(std::clamp(mu, double(kLatentMin), double(kLatentMax)))),
                   kLatentMin + half, kLatentMax - half);
    lo = center - half;
    hi = lo + static_cast<std::int64_t>(kMaxWindow) - 1;
  }
  return build_cdf(mu, scale, lo, hi);
}

QuantizedCdf build_cdf(double mu, double scale, std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw CodecError("build_cdf: empty window [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  const auto n = static_cast<std::size_t>(hi - lo + 1);
  if (n > kMaxWindow) throw CodecError("build_cdf: window of " + std::to_string(n) + " symbols exceeds " + std::to_string(kMaxWindow));
  if (!(scale > 0.0)) throw CodecError("build_cdf: scale must be positive");

  // Boundary b sits at lo - 0.5 + b. Lower and upper tail masses are both kept
  // so each bin is differenced on the side where it is well conditioned.
  std::vector<double> lower(n + 1), upper(n + 1), t(n + 1);
  for (std::size_t b = 0; b <= n; ++b) {
    t[b] = (static_cast<double>(lo) - 0.5 + static_cast<double>(b) - mu) / scale;
    lower[b] = logistic(t[b]);
    upper[b] = logistic(-t[b]);
  }
  std::vector<double> p(n);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (t[k + 1] <= 0.0)
      p[k] = lower[k + 1] - lower[k];
    else if (t[k] >= 0.0)
      p[k] = upper[k] - upper[k + 1];
    else
      p[k] = 1.0 - lower[k] - upper[k + 1];
    p[k] = std::max(p[k], 0.0);
    total += p[k];
  }
  const double p_escape = lower[0] + upper[n];

  QuantizedCdf cdf;
  cdf.lo = lo;
  cdf.hi = hi;
  cdf.freq.assign(n + 1, 0);

  const auto max_escape = static_cast<long long>(kCdfTotal - n);
  const long long f_escape = std::clamp(std::llround(kCdfTotal * p_escape), 1LL, max_escape);
  cdf.freq[n] = static_cast<std::uint32_t>(f_escape);
  const auto budget = static_cast<std::uint32_t>(kCdfTotal - f_escape);

  // Largest-remainder apportionment of the symbol budget; ties go to the lower index.
  std::vector<double> rem(n);
  std::uint32_t assigned = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double share = total > 0.0 ? budget * (p[k] / total) : double(budget) / double(n);
    const double fl = std::floor(share);
    cdf.freq[k] = static_cast<std::uint32_t>(fl);
    rem[k] = share - fl;
    assigned += cdf.freq[k];
  }
  std::uint32_t leftover = budget - std::min(assigned, budget);
  if (leftover > 0) {
    std::vector<std::size_t> order(n);
    for (std::size_t k = 0; k < n; ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t i = 0; i < leftover; ++i) ++cdf.freq[order[i % n]];
  }

  // Floor every symbol at 1, paying for it from the largest frequencies.
  std::uint32_t deficit = 0;
  for (std::size_t k = 0; k < n; ++k)
    if (cdf.freq[k] == 0) {
      cdf.freq[k] = 1;
      ++deficit;
    }
  if (deficit > 0) {
    auto cmp = [&](std::size_t a, std::size_t b) {
      return cdf.freq[a] != cdf.freq[b] ? cdf.freq[a] < cdf.freq[b] : a > b;
    };
    std::priority_queue<std::size_t, std::vector<std::size_t>, decltype(cmp)> heap(cmp);
    for (std::size_t k = 0; k < n; ++k)
      if (cdf.freq[k] > 1) heap.push(k);
    while (deficit > 0) {
      assert(!heap.empty());
      const std::size_t k = heap.top();
      heap.pop();
      --cdf.freq[k];
      --deficit;
      if (cdf.freq[k] > 1) heap.push(k);
    }
  }

  cdf.cum.assign(n + 2, 0);
  for (std::size_t k = 0; k <= n; ++k) cdf.cum[k + 1] = cdf.cum[k] + cdf.freq[k];
  assert(cdf.cum.back() == kCdfTotal);
  return cdf;
}

// ---------------------------------------------------------------------------
// rANS

void RansEncoder::put(std::uint32_t start, std::uint32_t freq, unsigned scale_bits) {
  assert(freq > 0 && "rANS: zero-frequency symbol");
  const std::uint64_t x_max = ((kRansLow >> scale_bits) << 32) * freq;
  if (state_ >= x_max) {
    words_.push_back(static_cast<std::uint32_t>(state_));
    state_ >>= 32;
  }
  state_ = ((state_ / freq) << scale_bits) + (state_ % freq) + start;
}

std::vector<std::uint8_t> RansEncoder::finish() {
  ByteWriter w;
  w.u64(state_);
  for (auto it = words_.rbegin(); it != words_.rend(); ++it) w.u32(*it);
  words_.clear();
  state_ = kRansLow;
  return w.take();
}

RansDecoder::RansDecoder(std::span<const std::uint8_t> bytes) : bytes_(bytes) {
  if (bytes_.size() < 8) throw CodecError("rANS: truncated payload (no state)");
  for (int i = 0; i < 8; ++i) state_ |= std::uint64_t{bytes_[i]} << (8 * i);
  pos_ = 8;
}

std::uint32_t RansDecoder::peek(unsigned scale_bits) const {
  return static_cast<std::uint32_t>(state_ & ((1ull << scale_bits) - 1));
}

void RansDecoder::advance(std::uint32_t start, std::uint32_t freq, unsigned scale_bits) {
  const std::uint64_t mask = (1ull << scale_bits) - 1;
  state_ = freq * (state_ >> scale_bits) + (state_ & mask) - start;
  if (state_ < kRansLow) {
    if (bytes_.size() - pos_ < 4) throw CodecError("rANS: truncated payload at byte " + std::to_string(pos_));
    std::uint32_t word = 0;
    for (int i = 0; i < 4; ++i) word |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 4;
    state_ = (state_ << 32) | word;
  }
}

void RansDecoder::check_complete() const {
  if (!exhausted() || state_ != kRansLow) throw CodecError("rANS: payload does not end at the initial state (corrupt)");
}

void encode_symbol(RansEncoder& enc, const QuantizedCdf& cdf, std::int64_t value) {
  const std::size_t slot = cdf.slot_of(value);
  if (slot == cdf.escape_slot()) {
    if (value < kLatentMin || value > kLatentMax)
      throw CodecError("encode_symbol: value " + std::to_string(value) + " outside the escape range");
    enc.put(escape_word(value), 1, kEscapeRawBits);
  }
  enc.put(cdf.cum[slot], cdf.freq[slot], kCdfPrecisionBits);
}

std::int64_t decode_symbol(RansDecoder& dec, const QuantizedCdf& cdf) {
  const std::size_t slot = cdf.slot_at(dec.peek(kCdfPrecisionBits));
  dec.advance(cdf.cum[slot], cdf.freq[slot], kCdfPrecisionBits);
  if (slot != cdf.escape_slot()) return cdf.lo + static_cast<std::int64_t>(slot);
  const std::uint32_t raw = dec.peek(kEscapeRawBits);
  dec.advance(raw, 1, kEscapeRawBits);
  const std::int64_t value = static_cast<std::int16_t>(static_cast<std::uint16_t>(raw));
  if (cdf.in_window(value)) throw CodecError("decode_symbol: escaped value lies inside the window (corrupt)");
  return value;
}

std::vector<std::uint8_t> rans_encode(std::span<const std::int64_t> values, std::span<const QuantizedCdf> cdfs) {
  if (values.size() != cdfs.size()) throw CodecError("rans_encode: one cdf per value required");
  RansEncoder enc;
  for (std::size_t i = values.size(); i-- > 0;) encode_symbol(enc, cdfs[i], values[i]);
  return enc.finish();
}

std::vector<std::int64_t> rans_decode(std::span<const std::uint8_t> bytes, std::span<const QuantizedCdf> cdfs) {
  RansDecoder dec(bytes);
  std::vector<std::int64_t> out;
  out.reserve(cdfs.size());
  for (const QuantizedCdf& cdf : cdfs) out.push_back(decode_symbol(dec, cdf));
  dec.check_complete();
  return out;
}

// ---------------------------------------------------------------------------
// Container

std::vector<std::uint8_t> Bitstream::serialize() const {
  ByteWriter w;
  for (char c : {'R', 'I', 'F', 'L'}) w.u8(static_cast<std::uint8_t>(c));
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(mode));
  w.u32(channels);
  w.u32(height);
  w.u32(width);
  w.u64(fingerprint);
  w.u64(payload.size());
  w.raw(payload);
  return w.take();
}

Bitstream Bitstream::parse(std::span<const std::uint8_t> bytes) {
  try {
    ByteReader r(bytes, "bitstream");
    auto magic = r.raw(4);
    if (!std::equal(magic.begin(), magic.end(), "RIFL")) r.fail("bad magic");
    if (r.u8() != kVersion) r.fail("unsupported version");
    Bitstream bs;
    const std::uint8_t mode = r.u8();
    if (mode > 1) r.fail("unknown mode " + std::to_string(mode));
    bs.mode = static_cast<CodingMode>(mode);
    bs.channels = r.u32();
    bs.height = r.u32();
    bs.width = r.u32();
    bs.fingerprint = r.u64();
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) r.fail("truncated payload");
    auto payload = r.raw(static_cast<std::size_t>(len));
    bs.payload.assign(payload.begin(), payload.end());
    if (r.remaining() != 0) r.fail("trailing bytes");
    return bs;
  } catch (const FormatError& e) {
    throw CodecError(e.what());
  }
}

// ---------------------------------------------------------------------------
// compress / decompress

namespace {

std::vector<QuantizedCdf> cdfs_for(const PriorParams& prior) {
  std::vector<QuantizedCdf> out;
  out.reserve(prior.mu.size());
  for (std::size_t i = 0; i < prior.mu.size(); ++i)
    out.push_back(build_cdf(prior.mu[i], std::exp(prior.log_scale[i])));
  return out;
}

Array decode_latent(RansDecoder& dec, const PriorParams& prior, Latent* record) {
  auto cdfs = cdfs_for(prior);
  std::vector<double> v(cdfs.size());
  for (std::size_t i = 0; i < cdfs.size(); ++i) v[i] = static_cast<double>(decode_symbol(dec, cdfs[i]));
  Shape shape = prior.mu.shape();
  if (record) {
    record->shape.assign(shape.begin() + 1, shape.end());
    record->values.assign(v.begin(), v.end());
  }
  return Array(std::move(shape), std::move(v));
}

}  // namespace

LatentStack encoder_latents(const FlowModel& model, const Image& image) { return flow_forward(model, image).first; }

CompressionResult compress(const FlowModel& model, const Image& image, std::uint64_t fingerprint) {
  Array x = to_batch(image);
  validate_flow_input(model, x);
  NoGradScope no_grad;
  FlowOutputs fo = flow_forward_batch(model, x);

  CompressionResult res;
  std::array<double, 3> bits{};
  std::array<std::size_t, 3> dims{};
  for (std::size_t j = 0; j < 3; ++j) {
    bits[j] = fo.nll_bits[j][0];
    dims[j] = model.latent_dims(j);
  }
  res.model_rate = breakdown_from_bits(bits, dims);

  Bitstream& bs = res.stream;
  bs.channels = static_cast<std::uint32_t>(image.channels);
  bs.height = static_cast<std::uint32_t>(image.height);
  bs.width = static_cast<std::uint32_t>(image.width);
  bs.fingerprint = fingerprint;

  bool representable = true;
  for (const Array& z : fo.latents)
    for (double v : z.values()) representable &= v >= double(kLatentMin) && v <= double(kLatentMax);

  if (representable) {
    // Pushed z1, z2, z3 so the decoder pops z3 first.
    RansEncoder enc;
    for (std::size_t j = 0; j < 3; ++j) {
      auto cdfs = cdfs_for(fo.priors[j]);
      const Array& z = fo.latents[j];
      for (std::size_t i = z.size(); i-- > 0;) encode_symbol(enc, cdfs[i], static_cast<std::int64_t>(z[i]));
    }
    bs.payload = enc.finish();
    res.coded_bits = 8.0 * static_cast<double>(bs.payload.size());
  } else {
    res.coded_bits = std::numeric_limits<double>::infinity();
  }

  if (!representable || bs.payload.size() >= image.size()) {
    bs.mode = CodingMode::raw;
    bs.payload = image.pixels;
  }
  res.realized_bpd = 8.0 * static_cast<double>(bs.payload.size()) / static_cast<double>(image.size());
  res.cr = compression_ratio(res.realized_bpd);
  return res;
}

Image decompress(const FlowModel& model, const Bitstream& bs, std::uint64_t fingerprint, LatentStack* decoded) {
  if (bs.fingerprint != fingerprint) throw CodecError("decompress: model fingerprint mismatch");
  const FlowConfig& cfg = model.config();
  if (bs.channels != cfg.channels || bs.height != cfg.height || bs.width != cfg.width)
    throw CodecError("decompress: stream shape does not match the model");
  Image out(cfg.channels, cfg.height, cfg.width);

  if (bs.mode == CodingMode::raw) {
    if (bs.payload.size() != out.size()) throw CodecError("decompress: raw payload has the wrong length");
    out.pixels = bs.payload;
    return out;
  }

  NoGradScope no_grad;
  RansDecoder dec(bs.payload);
  LatentStack local;
  LatentStack& rec = decoded ? *decoded : local;

  Array z3 = decode_latent(dec, model.base_prior(1), &rec.z[2]);
  Array y2 = model.uncouple(2, z3);
  Array z2 = decode_latent(dec, model.factor_out_prior(1, y2), &rec.z[1]);
  Array y1 = depth_to_space(model.uncouple(1, channel_concat(y2, z2)));
  Array z1 = decode_latent(dec, model.factor_out_prior(0, y1), &rec.z[0]);
  Array x = depth_to_space(model.uncouple(0, channel_concat(y1, z1)));
  dec.check_complete();

  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < 0.0 || x[i] > 255.0) throw CodecError("decompress: reconstructed pixel out of range (corrupt stream)");
    out.pixels[i] = static_cast<std::uint8_t>(x[i]);
  }
  return out;
}

}  // namespace rifl
