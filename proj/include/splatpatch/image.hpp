#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

#include "splatpatch/error.hpp"

namespace splatpatch {

/// Interleaved rgb image, row-major, origin at the top-left pixel.
template <typename T = float>
struct ImageBuffer {
  int width = 0;
  int height = 0;
  std::vector<T> rgb;

  ImageBuffer() = default;
  ImageBuffer(int w, int h, T fill = T(0))
      : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  std::size_t index(int x, int y) const { return (static_cast<std::size_t>(y) * width + x) * 3; }

  T& at(int x, int y, int c) { return rgb[index(x, y) + c]; }
  const T& at(int x, int y, int c) const { return rgb[index(x, y) + c]; }

  Eigen::Matrix<T, 3, 1> pixel(int x, int y) const {
    const auto i = index(x, y);
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
  }

  void set_pixel(int x, int y, const Eigen::Matrix<T, 3, 1>& c) {
    const auto i = index(x, y);
    rgb[i] = c.x();
    rgb[i + 1] = c.y();
    rgb[i + 2] = c.z();
  }

  bool same_shape(const ImageBuffer& o) const { return width == o.width && height == o.height; }

  template <typename U>
  ImageBuffer<U> cast() const {
    ImageBuffer<U> out(width, height);
    std::transform(rgb.begin(), rgb.end(), out.rgb.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const ImageBuffer&) const = default;
};

template <typename T>
ImageBuffer<T> solid_image(int width, int height, const Eigen::Matrix<T, 3, 1>& color) {
  ImageBuffer<T> img(width, height);
  for (std::size_t p = 0; p < img.pixel_count(); ++p)
    for (int c = 0; c < 3; ++c) img.rgb[3 * p + c] = color[c];
  return img;
}

}  // namespace splatpatch
