#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "fsal/error.hpp"

namespace fsal {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major n-dimensional array. Images use batch x channels x height x width.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(shape_numel(shape_) == data_.size(), Errc::shape_mismatch,
            "shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) + " values");
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Number of elements per leading-axis entry.
  std::size_t sample_size() const { return shape_.empty() || shape_[0] == 0 ? 0 : size() / shape_[0]; }

  Tensor reshaped(Shape shape) const {
    require(shape_numel(shape) == size(), Errc::shape_mismatch,
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
void require_finite(const Tensor<T>& t, const char* where) {
  require(t.all_finite(), Errc::non_finite, std::string("non-finite values in ") + where);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
  require(a.shape() == b.shape(), Errc::shape_mismatch,
          std::string(where) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

/// Rows [begin, begin+count) along the leading axis.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& t, std::size_t begin, std::size_t count) {
  require(begin + count <= t.dim(0), Errc::shape_mismatch, "batch slice out of range");
  Shape shape = t.shape();
  shape[0] = count;
  const std::size_t stride = t.sample_size();
  std::vector<T> out(t.data() + begin * stride, t.data() + (begin + count) * stride);
  return Tensor<T>(std::move(shape), std::move(out));
}

template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts) {
  require(!parts.empty(), Errc::invalid_argument, "concat of zero tensors");
  Shape shape = parts.front().shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    Shape tail_a(p.shape().begin() + 1, p.shape().end());
    Shape tail_b(shape.begin() + 1, shape.end());
    require(tail_a == tail_b, Errc::shape_mismatch, "concat: inconsistent sample shapes");
    rows += p.dim(0);
  }
  shape[0] = rows;
  std::vector<T> out;
  out.reserve(shape_numel(shape));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return Tensor<T>(std::move(shape), std::move(out));
}

template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  const Tensor<T> parts[] = {a, b};
  return concat_batch<T>(std::span<const Tensor<T>>(parts));
}

/// Elementwise -1/0/+1.
template <typename T>
Tensor<T> sign(const Tensor<T>& t) {
  Tensor<T> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<T>((T{0} < t[i]) - (t[i] < T{0}));
  return out;
}

/// Nearest point of the box [max(lo, anchor-eps), min(hi, anchor+eps)].
template <typename T>
Tensor<T> clip_linf(const Tensor<T>& candidate, const Tensor<T>& anchor, double epsilon, double lo = 0.0,
                    double hi = 255.0) {
  require_same_shape(candidate, anchor, "clip_linf");
  require(epsilon >= 0.0, Errc::invalid_argument, "clip_linf: epsilon must be non-negative");
  Tensor<T> out(candidate.shape());
  const T eps = static_cast<T>(epsilon);
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    T lower = std::max(static_cast<T>(lo), anchor[i] - eps);
    T upper = std::min(static_cast<T>(hi), anchor[i] + eps);
    // Rounded band edges may sit one ulp outside the budget for non-integer anchors.
    if (anchor[i] - lower > eps) lower = std::nextafter(lower, std::numeric_limits<T>::infinity());
    if (upper - anchor[i] > eps) upper = std::nextafter(upper, -std::numeric_limits<T>::infinity());
    out[i] = std::min(upper, std::max(lower, candidate[i]));
  }
  return out;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

namespace detail {

// Splits a shape around `axis` into (outer, extent, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> axis_split(const Shape& shape, std::size_t axis) {
  require(axis < shape.size(), Errc::invalid_argument, "axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

}  // namespace detail

/// v / ||v|| along `axis`.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& v, std::size_t axis) {
  const auto [outer, extent, inner] = detail::axis_split(v.shape(), axis);
  Tensor<T> out(v.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      T ss{0};
      for (std::size_t e = 0; e < extent; ++e) ss += v[base + e * inner] * v[base + e * inner];
      const T norm = std::sqrt(ss);
      require(norm > T{0}, Errc::zero_norm, "l2_normalize of a zero vector");
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] = v[base + e * inner] / norm;
    }
  }
  return out;
}

/// Adjoint of l2_normalize at `v`: (g - y <g, y>) / ||v||.
template <typename T>
Tensor<T> l2_normalize_backward(const Tensor<T>& v, const Tensor<T>& grad_output, std::size_t axis) {
  require_same_shape(v, grad_output, "l2_normalize_backward");
  const auto [outer, extent, inner] = detail::axis_split(v.shape(), axis);
  Tensor<T> out(v.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      T ss{0};
      for (std::size_t e = 0; e < extent; ++e) ss += v[base + e * inner] * v[base + e * inner];
      const T norm = std::sqrt(ss);
      require(norm > T{0}, Errc::zero_norm, "l2_normalize backward at a zero vector");
      T dot{0};
      for (std::size_t e = 0; e < extent; ++e) dot += (v[base + e * inner] / norm) * grad_output[base + e * inner];
      for (std::size_t e = 0; e < extent; ++e) {
        const std::size_t i = base + e * inner;
        out[i] = (grad_output[i] - (v[i] / norm) * dot) / norm;
      }
    }
  }
  return out;
}

}  // namespace fsal
