#pragma once

#include <png.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "fsal/tensor.hpp"

namespace fsal {

/// Reads an 8-bit PNG as a 3 x H x W tensor. Grayscale is replicated to three
/// channels; alpha is dropped.
inline Tensor<float> read_image(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    fail(Errc::io, "cannot decode " + path.string() + ": " + image.message);
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    fail(Errc::io, "unsupported bit depth (16-bit) in " + path.string());
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t h = image.height, w = image.width, c = color ? 3 : 1;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr))
    fail(Errc::io, "cannot decode " + path.string() + ": " + image.message);
  Tensor<float> out({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch)
        out[(ch * h + y) * w + x] = buffer[(y * w + x) * c + (color ? ch : 0)];
  return out;
}

/// Writes a C x H x W (or 1 x C x H x W) tensor with C in {1, 3} as an 8-bit PNG.
/// Values are rounded to nearest; anything outside [0, 255] is rejected.
template <typename T>
void write_image(const Tensor<T>& tensor, const std::filesystem::path& path) {
  Shape s = tensor.shape();
  if (s.size() == 4) {
    require(s[0] == 1, Errc::shape_mismatch, "write_image takes a single image");
    s.erase(s.begin());
  }
  require(s.size() == 3 && (s[0] == 1 || s[0] == 3), Errc::shape_mismatch, "write_image expects 1 or 3 channels");
  const std::size_t c = s[0], h = s[1], w = s[2];
  std::vector<png_byte> buffer(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double v = static_cast<double>(tensor[(ch * h + y) * w + x]);
        require(std::isfinite(v) && v >= 0.0 && v <= 255.0, Errc::invalid_argument,
                "pixel value " + std::to_string(v) + " outside [0, 255] in " + path.string());
        buffer[(y * w + x) * c + ch] = static_cast<png_byte>(std::lround(v));
      }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buffer.data(), 0, nullptr))
    fail(Errc::io, "cannot write " + path.string() + ": " + image.message);
}

}  // namespace fsal
