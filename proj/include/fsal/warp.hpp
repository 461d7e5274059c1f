#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "fsal/tensor.hpp"

namespace fsal {

/// Similarity transform about the image centre: output = c + t + s R(theta) (input - c).
struct WarpParams {
  double tx{0.0};
  double ty{0.0};
  double rotate_deg{0.0};
  double scale{1.0};
};

enum class Border { zero, replicate };

/// Precomputed bilinear resampling: every output pixel is a weighted sum of at most
/// four input pixels. Applying the transpose gives the exact adjoint.
template <typename T>
class Warp {
 public:
  Warp(std::size_t height, std::size_t width, const WarpParams& params, Border border = Border::zero)
      : height_(height), width_(width), taps_(height * width) {
    const double cy = (static_cast<double>(height) - 1.0) / 2.0;
    const double cx = (static_cast<double>(width) - 1.0) / 2.0;
    const double theta = params.rotate_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(theta), sn = std::sin(theta);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double dx = static_cast<double>(x) - cx - params.tx;
        const double dy = static_cast<double>(y) - cy - params.ty;
        // Inverse rotation and scaling back into the source frame.
        const double sx = cx + (cs * dx + sn * dy) / params.scale;
        const double sy = cy + (-sn * dx + cs * dy) / params.scale;
        const double fx0 = std::floor(sx), fy0 = std::floor(sy);
        const double fx = sx - fx0, fy = sy - fy0;
        const auto x0 = static_cast<std::int64_t>(fx0), y0 = static_cast<std::int64_t>(fy0);
        Tap& tap = taps_[y * width + x];
        const std::array<std::int64_t, 4> xs = {x0, x0 + 1, x0, x0 + 1};
        const std::array<std::int64_t, 4> ys = {y0, y0, y0 + 1, y0 + 1};
        const std::array<double, 4> ws = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
        for (int k = 0; k < 4; ++k) {
          if (ws[k] == 0.0) continue;
          std::int64_t ix = xs[k], iy = ys[k];
          if (border == Border::replicate) {
            ix = std::clamp<std::int64_t>(ix, 0, static_cast<std::int64_t>(width) - 1);
            iy = std::clamp<std::int64_t>(iy, 0, static_cast<std::int64_t>(height) - 1);
          } else if (ix < 0 || iy < 0 || ix >= static_cast<std::int64_t>(width) ||
                     iy >= static_cast<std::int64_t>(height)) {
            continue;
          }
          tap.index[tap.count] = static_cast<std::uint32_t>(iy * static_cast<std::int64_t>(width) + ix);
          tap.weight[tap.count] = static_cast<T>(ws[k]);
          ++tap.count;
        }
      }
    }
  }

  /// Warps `channels` planes of height x width starting at `in`.
  void apply(const T* in, T* out, std::size_t channels) const {
    const std::size_t plane = height_ * width_;
    for (std::size_t c = 0; c < channels; ++c) {
      const T* src = in + c * plane;
      T* dst = out + c * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const Tap& tap = taps_[p];
        T acc{0};
        for (std::uint8_t k = 0; k < tap.count; ++k) acc += tap.weight[k] * src[tap.index[k]];
        dst[p] = acc;
      }
    }
  }

  /// Transpose of apply: scatters output-space gradients back to input space.
  void adjoint(const T* grad_out, T* grad_in, std::size_t channels) const {
    const std::size_t plane = height_ * width_;
    for (std::size_t c = 0; c < channels; ++c) {
      const T* src = grad_out + c * plane;
      T* dst = grad_in + c * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = T{0};
      for (std::size_t p = 0; p < plane; ++p) {
        const Tap& tap = taps_[p];
        for (std::uint8_t k = 0; k < tap.count; ++k) dst[tap.index[k]] += tap.weight[k] * src[p];
      }
    }
  }

  /// Convenience for a single C x H x W (or 1 x C x H x W) tensor.
  Tensor<T> apply(const Tensor<T>& image) const {
    Tensor<T> out(image.shape());
    apply(image.data(), out.data(), image.size() / (height_ * width_));
    return out;
  }

  Tensor<T> adjoint(const Tensor<T>& grad) const {
    Tensor<T> out(grad.shape());
    adjoint(grad.data(), out.data(), grad.size() / (height_ * width_));
    return out;
  }

 private:
  struct Tap {
    std::array<std::uint32_t, 4> index{};
    std::array<T, 4> weight{};
    std::uint8_t count{0};
  };

  std::size_t height_, width_;
  std::vector<Tap> taps_;
};

}  // namespace fsal
