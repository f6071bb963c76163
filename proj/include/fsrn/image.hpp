#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fsrn/tensor.hpp"

namespace fsrn {

/// Axis-aligned box, top-left origin, half-open extents [x, x+w) x [y, y+h).
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  [[nodiscard]] double area() const { return w * h; }
  [[nodiscard]] double cx() const { return x + 0.5 * w; }
  [[nodiscard]] double cy() const { return y + 0.5 * h; }
  [[nodiscard]] bool valid() const { return w > 0.0 && h > 0.0; }
  static Box from_center(double cx, double cy, double w, double h) {
    return Box{cx - 0.5 * w, cy - 0.5 * h, w, h};
  }
  friend bool operator==(const Box&, const Box&) = default;
};

/// 8-bit RGB image stored channel-major (CHW). Pixel value v maps to v/255.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // 3 * height * width

  static constexpr int kChannels = 3;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(kChannels) * h * w, 0) {}

  [[nodiscard]] bool empty() const { return pixels.empty(); }
  std::uint8_t& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  [[nodiscard]] std::uint8_t at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

/// (1, 3, H, W) tensor with values in [0, 1].
Tensor to_tensor(const Image& img);
/// Stacks equally sized images into an (N, 3, H, W) tensor.
Tensor to_batch(const std::vector<const Image*>& imgs);

/// Bilinear resample of `region` (clamped to the region's own pixels) into an
/// out_w x out_h image.
Image crop_resize(const Image& img, const Box& region, int out_w, int out_h);
Image resize(const Image& img, int out_w, int out_h);
Image flip_horizontal(const Image& img);
/// Zero-pads on the right and bottom.
Image pad_to(const Image& img, int out_h, int out_w);

void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

}  // namespace fsrn
