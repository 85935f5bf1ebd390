#pragma once

#include <cstddef>
#include <vector>

namespace mmim {

/// Dense grayscale-or-multichannel image, channel-major (c, y, x), values
/// nominally in [0, 1].
struct Image {
  size_t channels = 0;
  size_t height = 0;
  size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(size_t c, size_t h, size_t w) : channels(c), height(h), width(w), pixels(c * h * w, 0.0) {}

  double& at(size_t c, size_t y, size_t x) { return pixels[(c * height + y) * width + x]; }
  double at(size_t c, size_t y, size_t x) const { return pixels[(c * height + y) * width + x]; }
  size_t size() const { return pixels.size(); }
};

}  // namespace mmim
