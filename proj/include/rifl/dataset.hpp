#pragma once

// Image sources: binary PPM (P6) / PGM (P5), the RIFD raw tensor file, and the
// builtin deterministic synthetic corpus.
//
// RIFD layout (little-endian): "RIFD" | N u32 | C u32 | H u32 | W u32 | N*C*H*W bytes

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rifl/byteio.hpp"
#include "rifl/image.hpp"

namespace rifl {

inline constexpr const char* kSyntheticName = "synthetic-textures";

/// `n` seeded 16x16 RGB patches: smooth gradients, a low-frequency ripple and
/// quantized gaussian noise.
std::vector<Image> synthetic_textures(std::size_t n, std::uint64_t seed, std::size_t height = 16,
                                      std::size_t width = 16);

Image parse_pnm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_pnm(const Image& image);

std::vector<Image> parse_rifd(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_rifd(const std::vector<Image>& images);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

/// `source` is "synthetic-textures[:N[:SEED]]", a .ppm/.pgm file, a RIFD file,
/// or a directory of .ppm/.pgm files (sorted by name). Throws FormatError on
/// malformed input and std::invalid_argument on an empty result.
std::vector<Image> load_dataset(const std::string& source);

/// First `count` images for training, the rest held out.
std::pair<std::vector<Image>, std::vector<Image>> split_dataset(const std::vector<Image>& all, std::size_t count);

}  // namespace rifl
