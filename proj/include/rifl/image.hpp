#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "rifl/tensor.hpp"

namespace rifl {

/// 8-bit image in planar (channels, height, width) order.
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  std::size_t size() const { return pixels.size(); }
  std::uint8_t& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }

  bool operator==(const Image&) const = default;
};

/// Stacks images into a (N, C, H, W) array. All images must share a shape.
Array to_batch(const std::vector<Image>& images);
Array to_batch(const Image& image);

}  // namespace rifl
