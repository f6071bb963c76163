#include "fsrn/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "fsrn/error.hpp"

namespace fsrn {

Tensor to_tensor(const Image& img) { return to_batch({&img}); }

Tensor to_batch(const std::vector<const Image*>& imgs) {
  if (imgs.empty()) throw ShapeError("to_batch: no images");
  const int h = imgs[0]->height;
  const int w = imgs[0]->width;
  Tensor t(Shape{static_cast<int>(imgs.size()), Image::kChannels, h, w});
  std::size_t k = 0;
  for (const Image* im : imgs) {
    if (im->height != h || im->width != w) throw ShapeError("to_batch: images differ in size");
    for (std::uint8_t v : im->pixels) t[k++] = static_cast<double>(v) / 255.0;
  }
  return t;
}

Image crop_resize(const Image& img, const Box& region, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0 || !region.valid()) throw UsageError("crop_resize: empty output or region");
  Image out(out_h, out_w);
  // Sample positions are expressed in pixel-index space (pixel p sits at p).
  const double lo_x = std::max(0.0, std::floor(region.x));
  const double lo_y = std::max(0.0, std::floor(region.y));
  const double hi_x = std::min<double>(img.width - 1, std::ceil(region.x + region.w) - 1);
  const double hi_y = std::min<double>(img.height - 1, std::ceil(region.y + region.h) - 1);
  if (hi_x < lo_x || hi_y < lo_y) throw UsageError("crop_resize: region outside image");
  const double sx = region.w / out_w;
  const double sy = region.h / out_h;
  for (int oy = 0; oy < out_h; ++oy) {
    const double v = std::clamp(region.y + (oy + 0.5) * sy - 0.5, lo_y, hi_y);
    const int y0 = static_cast<int>(std::floor(v));
    const int y1 = std::min(y0 + 1, static_cast<int>(hi_y));
    const double fy = v - y0;
    for (int ox = 0; ox < out_w; ++ox) {
      const double u = std::clamp(region.x + (ox + 0.5) * sx - 0.5, lo_x, hi_x);
      const int x0 = static_cast<int>(std::floor(u));
      const int x1 = std::min(x0 + 1, static_cast<int>(hi_x));
      const double fx = u - x0;
      for (int c = 0; c < Image::kChannels; ++c) {
        const double top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
        const double bot = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
        const double val = top * (1.0 - fy) + bot * fy;
        out.at(c, oy, ox) = static_cast<std::uint8_t>(std::clamp(std::lround(val), 0L, 255L));
      }
    }
  }
  return out;
}

Image resize(const Image& img, int out_w, int out_h) {
  return crop_resize(img, Box{0.0, 0.0, static_cast<double>(img.width), static_cast<double>(img.height)},
                     out_w, out_h);
}

Image flip_horizontal(const Image& img) {
  Image out(img.height, img.width);
  for (int c = 0; c < Image::kChannels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

Image pad_to(const Image& img, int out_h, int out_w) {
  if (out_h < img.height || out_w < img.width) throw UsageError("pad_to: target smaller than image");
  Image out(out_h, out_w);
  for (int c = 0; c < Image::kChannels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, x);
  return out;
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < Image::kChannels; ++c) os.put(static_cast<char>(img.at(c, y, x)));
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open image " + path.string());
  std::string magic;
  int w = 0;
  int h = 0;
  int maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) {
    throw ParseError("unsupported image format in " + path.string());
  }
  is.get();
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < Image::kChannels; ++c) {
        const int v = is.get();
        if (v == std::char_traits<char>::eof()) throw ParseError("truncated image " + path.string());
        img.at(c, y, x) = static_cast<std::uint8_t>(v);
      }
  return img;
}

}  // namespace fsrn
