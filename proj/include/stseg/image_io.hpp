#pragma once

// 8-bit PNG in and out (RGB images, grayscale {0,255} label masks).

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <vector>

#include "stseg/raster.hpp"
#include "stseg/tensor.hpp"

namespace stseg {

struct Image8 {
  std::size_t height = 0, width = 0, channels = 0;  // channels: 1 or 3, interleaved
  std::vector<std::uint8_t> px;
};

inline Image8 read_png(const std::filesystem::path& path, std::size_t channels) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out{img.height, img.width, channels, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(img))};
  if (!png_image_finish_read(&img, nullptr, out.px.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image8& im) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, im.px.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255)); }

/// [3,H,W] in [0,1] <-> interleaved RGB bytes.
template <Real T>
Image8 to_image(const Tensor<T>& chw) {
  if (chw.ndim() != 3 || chw.dim(0) != 3) throw ShapeError("to_image: expected [3,H,W], got " + to_string(chw.shape()));
  const auto H = chw.dim(1), W = chw.dim(2);
  Image8 im{H, W, 3, std::vector<std::uint8_t>(3 * H * W)};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < H * W; ++i) im.px[3 * i + c] = to_byte(chw[c * H * W + i]);
  return im;
}

template <Real T>
Tensor<T> from_image(const Image8& im) {
  if (im.channels != 3) throw ShapeError("from_image: expected an RGB image");
  const auto H = im.height, W = im.width;
  Tensor<T> t(Shape{3, H, W});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < H * W; ++i) t[c * H * W + i] = static_cast<T>(im.px[3 * i + c]) / T{255};
  return t;
}

inline Image8 mask_image(const Mask& m) {
  Image8 im{m.height, m.width, 1, std::vector<std::uint8_t>(m.px.size())};
  for (std::size_t i = 0; i < m.px.size(); ++i) im.px[i] = m.px[i] ? 255 : 0;
  return im;
}

inline Mask image_mask(const Image8& im) {
  if (im.channels != 1) throw ShapeError("image_mask: expected a grayscale image");
  Mask m(im.height, im.width);
  for (std::size_t i = 0; i < m.px.size(); ++i) m.px[i] = im.px[i] > 127;
  return m;
}

inline void save_rgb_png(const std::filesystem::path& p, const Tensor<float>& chw) { write_png(p, to_image(chw)); }
inline Tensor<float> load_rgb_png(const std::filesystem::path& p) { return from_image<float>(read_png(p, 3)); }
inline void save_mask_png(const std::filesystem::path& p, const Mask& m) { write_png(p, mask_image(m)); }
inline Mask load_mask_png(const std::filesystem::path& p) { return image_mask(read_png(p, 1)); }

}  // namespace stseg
