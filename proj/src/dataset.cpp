#include "rifl/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

namespace rifl {

std::vector<Image> synthetic_textures(std::size_t n, std::uint64_t seed, std::size_t height, std::size_t width) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> base_d(50.0, 205.0), slope_d(-3.0, 3.0), amp_d(0.0, 12.0),
      freq_d(0.2, 0.9), phase_d(0.0, 2.0 * std::numbers::pi), sigma_d(0.5, 2.5), tint_d(0.6, 1.2);
  std::normal_distribution<double> unit;
  std::vector<Image> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    Image im(3, height, width);
    const double gx = slope_d(rng), gy = slope_d(rng);
    const double amp = amp_d(rng), fx = freq_d(rng), fy = freq_d(rng), phase = phase_d(rng);
    const double sigma = sigma_d(rng);
    for (std::size_t c = 0; c < 3; ++c) {
      const double base = base_d(rng), tint = tint_d(rng);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double smooth = base + tint * (gx * double(x) + gy * double(y) +
                                               amp * std::sin(fx * double(x) + fy * double(y) + phase));
          const double v = std::round(smooth) + std::round(sigma * unit(rng));
          im.at(c, y, x) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
        }
    }
    out.push_back(std::move(im));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNM

namespace {

class PnmCursor {
 public:
  explicit PnmCursor(std::span<const std::uint8_t> b) : b_(b) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > (1u << 24)) fail(std::string(what) + " too large", start);
      ++pos_;
    }
    if (pos_ == start) fail(std::string("expected ") + what, start);
    return v;
  }

  [[noreturn]] void fail(const std::string& why, std::size_t at) const {
    throw FormatError("pnm: " + why + " at byte offset " + std::to_string(at));
  }

  std::size_t pos_ = 0;
  std::span<const std::uint8_t> b_;
};

}  // namespace

Image parse_pnm(std::span<const std::uint8_t> bytes) {
  PnmCursor cur(bytes);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    cur.fail("expected magic P5 or P6", 0);
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  cur.pos_ = 2;
  const std::size_t w = cur.number("width");
  const std::size_t h = cur.number("height");
  const std::size_t maxval_at = cur.pos_;
  const std::size_t maxval = cur.number("maxval");
  if (w == 0 || h == 0) cur.fail("zero image dimension", maxval_at);
  if (maxval != 255) cur.fail("only maxval 255 is supported, got " + std::to_string(maxval), maxval_at);
  if (cur.pos_ >= bytes.size() || !std::isspace(bytes[cur.pos_])) cur.fail("expected whitespace after header", cur.pos_);
  ++cur.pos_;
  const std::size_t need = w * h * channels;
  if (bytes.size() - cur.pos_ < need)
    cur.fail("truncated pixel data (need " + std::to_string(need) + " bytes, " +
                 std::to_string(bytes.size() - cur.pos_) + " left)",
             cur.pos_);
  Image im(channels, h, w);
  // PNM is interleaved; Image is planar.
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) im.at(c, y, x) = bytes[cur.pos_ + (y * w + x) * channels + c];
  return im;
}

std::vector<std::uint8_t> encode_pnm(const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw std::invalid_argument("pnm: only 1 or 3 channels");
  const std::string header = std::string(image.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(image.width) +
                             " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < image.channels; ++c) out.push_back(image.at(c, y, x));
  return out;
}

// ---------------------------------------------------------------------------
// RIFD

std::vector<Image> parse_rifd(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "rifd");
  auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), "RIFD")) r.fail("bad magic");
  const std::uint32_t n = r.u32(), c = r.u32(), h = r.u32(), w = r.u32();
  if (c == 0 || h == 0 || w == 0) r.fail("zero dimension");
  const std::uint64_t per = std::uint64_t{c} * h * w;
  if (per * n != r.remaining())
    r.fail("payload holds " + std::to_string(r.remaining()) + " bytes, header promises " + std::to_string(per * n));
  std::vector<Image> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    Image im(c, h, w);
    auto px = r.raw(per);
    std::copy(px.begin(), px.end(), im.pixels.begin());
    out.push_back(std::move(im));
  }
  return out;
}

std::vector<std::uint8_t> encode_rifd(const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("rifd: no images");
  ByteWriter w;
  for (char ch : {'R', 'I', 'F', 'D'}) w.u8(static_cast<std::uint8_t>(ch));
  const Image& f = images.front();
  w.u32(static_cast<std::uint32_t>(images.size()));
  w.u32(static_cast<std::uint32_t>(f.channels));
  w.u32(static_cast<std::uint32_t>(f.height));
  w.u32(static_cast<std::uint32_t>(f.width));
  for (const Image& im : images) {
    if (im.channels != f.channels || im.height != f.height || im.width != f.width)
      throw std::invalid_argument("rifd: images differ in shape");
    w.raw(im.pixels);
  }
  return w.take();
}

// ---------------------------------------------------------------------------
// Files

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

namespace {

bool is_pnm_path(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

std::vector<Image> load_file(const std::string& path) {
  auto bytes = read_file(path);
  if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, "RIFD")) return parse_rifd(bytes);
  try {
    return {parse_pnm(bytes)};
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace

std::vector<Image> load_dataset(const std::string& source) {
  std::vector<Image> out;
  if (source.rfind(kSyntheticName, 0) == 0) {
    std::size_t n = 256;
    std::uint64_t seed = 0;
    const std::string rest = source.substr(std::string(kSyntheticName).size());
    if (!rest.empty()) {
      if (rest[0] != ':') throw std::invalid_argument("dataset: expected synthetic-textures[:N[:SEED]]");
      const auto colon = rest.find(':', 1);
      try {
        n = std::stoul(rest.substr(1, colon == std::string::npos ? std::string::npos : colon - 1));
        if (colon != std::string::npos) seed = std::stoull(rest.substr(colon + 1));
      } catch (const std::logic_error&) {
        throw std::invalid_argument("dataset: bad synthetic-textures spec '" + source + "'");
      }
    }
    out = synthetic_textures(n, seed);
  } else if (std::filesystem::is_directory(source)) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(source))
      if (e.is_regular_file() && is_pnm_path(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto ims = load_file(f.string());
      out.insert(out.end(), ims.begin(), ims.end());
    }
  } else {
    out = load_file(source);
  }
  if (out.empty()) throw std::invalid_argument("dataset '" + source + "' is empty");
  return out;
}

std::pair<std::vector<Image>, std::vector<Image>> split_dataset(const std::vector<Image>& all, std::size_t count) {
  count = std::min(count, all.size());
  return {std::vector<Image>(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count)),
          std::vector<Image>(all.begin() + static_cast<std::ptrdiff_t>(count), all.end())};
}

}  // namespace rifl
