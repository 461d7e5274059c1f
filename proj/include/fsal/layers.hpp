#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "fsal/gemm.hpp"
#include "fsal/tensor.hpp"

namespace fsal {

enum class Mode { train, infer };
enum class ParamGrads { skip, compute };

/// Fixed pixel standardization (x - shift) * scale, kept inside the network so that
/// attack gradients are taken with respect to raw [0, 255] pixels.
template <typename T>
struct Standardize {
  T shift{T(127.5)};
  T scale{T(1) / T(128)};
};

template <typename T>
struct Conv2d {
  std::size_t in_channels{}, out_channels{}, kernel{}, stride{1}, pad{0};
  bool has_bias{false};
  Tensor<T> weight;  // out x in x k x k
  Tensor<T> bias;    // out, empty when !has_bias
};

template <typename T>
struct BatchNorm {
  std::size_t channels{};
  T eps{T(1e-5)};
  T momentum{T(0.1)};
  Tensor<T> gamma, beta, running_mean, running_var;
};

template <typename T>
struct PReLU {
  std::size_t channels{};
  Tensor<T> slope;
};

template <typename T>
struct Linear {
  std::size_t in_features{}, out_features{};
  Tensor<T> weight;  // out x in
  Tensor<T> bias;    // out
};

struct Flatten {};

struct AvgPool {
  std::size_t kernel{2};
};

template <typename T>
using LayerOp = std::variant<Standardize<T>, Conv2d<T>, BatchNorm<T>, PReLU<T>, Linear<T>, Flatten, AvgPool>;

inline std::uint64_t next_layer_uid() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

/// One layer plus its per-sample input/output signature.
template <typename T>
struct Layer {
  std::uint64_t uid{next_layer_uid()};
  Shape in_shape;
  Shape out_shape;
  LayerOp<T> op;
};

template <typename T>
std::string layer_kind(const Layer<T>& layer) {
  return std::visit(
      [](const auto& op) -> std::string {
        using Op = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<Op, Standardize<T>>) return "standardize";
        else if constexpr (std::is_same_v<Op, Conv2d<T>>) return "conv2d";
        else if constexpr (std::is_same_v<Op, BatchNorm<T>>) return "batchnorm";
        else if constexpr (std::is_same_v<Op, PReLU<T>>) return "prelu";
        else if constexpr (std::is_same_v<Op, Linear<T>>) return "linear";
        else if constexpr (std::is_same_v<Op, Flatten>) return "flatten";
        else return "avgpool";
      },
      layer.op);
}

/// Saved state of one forward invocation. Backward consumes it exactly once.
template <typename T>
struct LayerCache {
  std::uint64_t layer_uid{0};
  bool spent{true};
  Mode mode{Mode::infer};
  Tensor<T> input;
  Tensor<T> xhat;     // batch norm, train mode
  Tensor<T> inv_std;  // batch norm, per channel
  Tensor<T> batch_mean;
  Tensor<T> batch_var;
};

template <typename T>
struct LayerOutput {
  Tensor<T> output;
  LayerCache<T> cache;
};

template <typename T>
struct LayerGrads {
  Tensor<T> grad_input;
  std::vector<Tensor<T>> grad_params;  // trainable parameters, declaration order
};

/// Per-sample output shape of `op` given a per-sample input shape.
template <typename T>
Shape infer_out_shape(const LayerOp<T>& op, const Shape& in) {
  return std::visit(
      [&](const auto& o) -> Shape {
        using Op = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<Op, Conv2d<T>>) {
          require(in.size() == 3 && in[0] == o.in_channels, Errc::shape_mismatch, "conv2d input " + shape_str(in));
          require(in[1] + 2 * o.pad >= o.kernel && in[2] + 2 * o.pad >= o.kernel, Errc::shape_mismatch,
                  "conv2d kernel larger than padded input");
          return {o.out_channels, (in[1] + 2 * o.pad - o.kernel) / o.stride + 1,
                  (in[2] + 2 * o.pad - o.kernel) / o.stride + 1};
        } else if constexpr (std::is_same_v<Op, BatchNorm<T>> || std::is_same_v<Op, PReLU<T>>) {
          require(!in.empty() && in[0] == o.channels, Errc::shape_mismatch, "channel count mismatch " + shape_str(in));
          return in;
        } else if constexpr (std::is_same_v<Op, Linear<T>>) {
          require(in.size() == 1 && in[0] == o.in_features, Errc::shape_mismatch, "linear input " + shape_str(in));
          return {o.out_features};
        } else if constexpr (std::is_same_v<Op, Flatten>) {
          return {shape_numel(in)};
        } else if constexpr (std::is_same_v<Op, AvgPool>) {
          require(in.size() == 3 && o.kernel > 0 && in[1] % o.kernel == 0 && in[2] % o.kernel == 0,
                  Errc::shape_mismatch, "avgpool input " + shape_str(in));
          return {in[0], in[1] / o.kernel, in[2] / o.kernel};
        } else {
          return in;
        }
      },
      op);
}

template <typename T>
Layer<T> make_layer(LayerOp<T> op, const Shape& in_shape) {
  Layer<T> layer;
  layer.in_shape = in_shape;
  layer.out_shape = infer_out_shape<T>(op, in_shape);
  layer.op = std::move(op);
  return layer;
}

/// Parameter tensors in declaration order. `trainable` excludes running statistics.
template <typename T>
std::vector<Tensor<T>*> layer_params(Layer<T>& layer, bool trainable_only) {
  std::vector<Tensor<T>*> out;
  std::visit(
      [&](auto& o) {
        using Op = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<Op, Conv2d<T>>) {
          out.push_back(&o.weight);
          if (o.has_bias) out.push_back(&o.bias);
        } else if constexpr (std::is_same_v<Op, BatchNorm<T>>) {
          out.push_back(&o.gamma);
          out.push_back(&o.beta);
          if (!trainable_only) {
            out.push_back(&o.running_mean);
            out.push_back(&o.running_var);
          }
        } else if constexpr (std::is_same_v<Op, PReLU<T>>) {
          out.push_back(&o.slope);
        } else if constexpr (std::is_same_v<Op, Linear<T>>) {
          out.push_back(&o.weight);
          out.push_back(&o.bias);
        }
      },
      layer.op);
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> layer_params(const Layer<T>& layer, bool trainable_only) {
  auto refs = layer_params(const_cast<Layer<T>&>(layer), trainable_only);
  return {refs.begin(), refs.end()};
}

namespace detail {

struct ConvGeometry {
  std::size_t batch, in_c, in_h, in_w, out_c, out_h, out_w, k, stride, pad;
  std::size_t patch() const { return in_c * k * k; }
  std::size_t pixels() const { return out_h * out_w; }
};

template <typename T>
ConvGeometry conv_geometry(const Conv2d<T>& conv, const Shape& in_shape) {
  const std::size_t oh = (in_shape[2] + 2 * conv.pad - conv.kernel) / conv.stride + 1;
  const std::size_t ow = (in_shape[3] + 2 * conv.pad - conv.kernel) / conv.stride + 1;
  return {in_shape[0], in_shape[1], in_shape[2], in_shape[3], conv.out_channels, oh, ow, conv.kernel,
          conv.stride, conv.pad};
}

// col[(ic, ky, kx), (n, oy, ox)]
template <typename T>
std::vector<T> im2col(const T* in, const ConvGeometry& g) {
  const std::size_t np = g.batch * g.pixels();
  std::vector<T> col(g.patch() * np, T{0});
  for (std::size_t ic = 0; ic < g.in_c; ++ic) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col.data() + ((ic * g.k + ky) * g.k + kx) * np;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const T* plane = in + (n * g.in_c + ic) * g.in_h * g.in_w;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            T* dst = row + n * g.pixels() + oy * g.out_w;
            const T* src = plane + iy * g.in_w;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in_w)) dst[ox] = src[ix];
            }
          }
        }
      }
    }
  }
  return col;
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* grad_in) {
  const std::size_t np = g.batch * g.pixels();
  for (std::size_t ic = 0; ic < g.in_c; ++ic) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((ic * g.k + ky) * g.k + kx) * np;
        for (std::size_t n = 0; n < g.batch; ++n) {
          T* plane = grad_in + (n * g.in_c + ic) * g.in_h * g.in_w;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            const T* src = row + n * g.pixels() + oy * g.out_w;
            T* dst = plane + iy * g.in_w;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in_w)) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

// Channel axis 1, everything after it is "spatial".
inline std::pair<std::size_t, std::size_t> channel_split(const Shape& shape) {
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) spatial *= shape[i];
  return {shape[1], spatial};
}

template <typename T>
Tensor<T> conv_forward(const Conv2d<T>& conv, const Tensor<T>& input) {
  const ConvGeometry g = conv_geometry(conv, input.shape());
  const std::size_t np = g.batch * g.pixels();
  const std::vector<T> col = im2col(input.data(), g);
  std::vector<T> out_cn(g.out_c * np);
  gemm<T>(g.out_c, np, g.patch(), conv.weight.data(), g.patch(), 1, col.data(), out_cn.data(), false);
  Tensor<T> out({g.batch, g.out_c, g.out_h, g.out_w});
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oc = 0; oc < g.out_c; ++oc) {
      const T b = conv.has_bias ? conv.bias[oc] : T{0};
      const T* src = out_cn.data() + oc * np + n * g.pixels();
      T* dst = out.data() + (n * g.out_c + oc) * g.pixels();
      for (std::size_t p = 0; p < g.pixels(); ++p) dst[p] = src[p] + b;
    }
  }
  return out;
}

template <typename T>
LayerGrads<T> conv_backward(const Conv2d<T>& conv, const Tensor<T>& input, const Tensor<T>& grad_out,
                            ParamGrads want) {
  const ConvGeometry g = conv_geometry(conv, input.shape());
  const std::size_t np = g.batch * g.pixels();
  std::vector<T> dout_cn(g.out_c * np);
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t oc = 0; oc < g.out_c; ++oc) {
      const T* src = grad_out.data() + (n * g.out_c + oc) * g.pixels();
      std::copy(src, src + g.pixels(), dout_cn.data() + oc * np + n * g.pixels());
    }

  LayerGrads<T> grads;
  std::vector<T> dcol(g.patch() * np);
  gemm<T>(g.patch(), np, g.out_c, conv.weight.data(), 1, g.patch(), dout_cn.data(), dcol.data(), false);
  grads.grad_input = Tensor<T>(input.shape());
  col2im(dcol.data(), g, grads.grad_input.data());

  if (want == ParamGrads::compute) {
    const std::vector<T> col = im2col(input.data(), g);
    std::vector<T> col_t(np * g.patch());
    for (std::size_t r = 0; r < g.patch(); ++r)
      for (std::size_t j = 0; j < np; ++j) col_t[j * g.patch() + r] = col[r * np + j];
    Tensor<T> dw(conv.weight.shape());
    gemm<T>(g.out_c, g.patch(), np, dout_cn.data(), np, 1, col_t.data(), dw.data(), false);
    grads.grad_params.push_back(std::move(dw));
    if (conv.has_bias) {
      Tensor<T> db({g.out_c});
      for (std::size_t oc = 0; oc < g.out_c; ++oc) {
        T s{0};
        for (std::size_t j = 0; j < np; ++j) s += dout_cn[oc * np + j];
        db[oc] = s;
      }
      grads.grad_params.push_back(std::move(db));
    }
  }
  return grads;
}

template <typename T>
Tensor<T> linear_forward(const Linear<T>& lin, const Tensor<T>& input) {
  const std::size_t batch = input.dim(0);
  std::vector<T> w_t(lin.in_features * lin.out_features);
  for (std::size_t o = 0; o < lin.out_features; ++o)
    for (std::size_t i = 0; i < lin.in_features; ++i) w_t[i * lin.out_features + o] = lin.weight[o * lin.in_features + i];
  Tensor<T> out({batch, lin.out_features});
  gemm<T>(batch, lin.out_features, lin.in_features, input.data(), lin.in_features, 1, w_t.data(), out.data(), false);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < lin.out_features; ++o) out[n * lin.out_features + o] += lin.bias[o];
  return out;
}

template <typename T>
LayerGrads<T> linear_backward(const Linear<T>& lin, const Tensor<T>& input, const Tensor<T>& grad_out,
                              ParamGrads want) {
  const std::size_t batch = input.dim(0);
  LayerGrads<T> grads;
  grads.grad_input = Tensor<T>(input.shape());
  gemm<T>(batch, lin.in_features, lin.out_features, grad_out.data(), lin.out_features, 1, lin.weight.data(),
          grads.grad_input.data(), false);
  if (want == ParamGrads::compute) {
    Tensor<T> dw(lin.weight.shape());
    gemm<T>(lin.out_features, lin.in_features, batch, grad_out.data(), 1, lin.out_features, input.data(), dw.data(),
            false);
    Tensor<T> db({lin.out_features});
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t o = 0; o < lin.out_features; ++o) db[o] += grad_out[n * lin.out_features + o];
    grads.grad_params.push_back(std::move(dw));
    grads.grad_params.push_back(std::move(db));
  }
  return grads;
}

}  // namespace detail

/// Runs one layer. Train-mode batch norm normalizes with batch statistics and reports
/// them in the cache; running statistics are never touched here.
template <typename T>
LayerOutput<T> layer_forward(const Layer<T>& layer, const Tensor<T>& input, Mode mode) {
  require(input.rank() == layer.in_shape.size() + 1 &&
              Shape(input.shape().begin() + 1, input.shape().end()) == layer.in_shape,
          Errc::shape_mismatch,
          layer_kind(layer) + " expects per-sample " + shape_str(layer.in_shape) + ", got " + shape_str(input.shape()));
  require_finite(input, "layer_forward input");

  LayerOutput<T> result;
  LayerCache<T>& cache = result.cache;
  cache.layer_uid = layer.uid;
  cache.spent = false;
  cache.mode = mode;
  cache.input = input;

  result.output = std::visit(
      [&](const auto& op) -> Tensor<T> {
        using Op = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<Op, Standardize<T>>) {
          Tensor<T> out(input.shape());
          for (std::size_t i = 0; i < input.size(); ++i) out[i] = (input[i] - op.shift) * op.scale;
          return out;
        } else if constexpr (std::is_same_v<Op, Conv2d<T>>) {
          return detail::conv_forward(op, input);
        } else if constexpr (std::is_same_v<Op, BatchNorm<T>>) {
          const std::size_t batch = input.dim(0);
          const auto [channels, spatial] = detail::channel_split(input.shape());
          Tensor<T> out(input.shape());
          if (mode == Mode::infer) {
            for (std::size_t c = 0; c < channels; ++c) {
              const T a = op.gamma[c] / std::sqrt(op.running_var[c] + op.eps);
              const T b = op.beta[c] - op.running_mean[c] * a;
              for (std::size_t n = 0; n < batch; ++n) {
                const std::size_t base = (n * channels + c) * spatial;
                for (std::size_t s = 0; s < spatial; ++s) out[base + s] = input[base + s] * a + b;
              }
            }
          } else {
            const T count = static_cast<T>(batch * spatial);
            cache.xhat = Tensor<T>(input.shape());
            cache.inv_std = Tensor<T>({channels});
            cache.batch_mean = Tensor<T>({channels});
            cache.batch_var = Tensor<T>({channels});
            for (std::size_t c = 0; c < channels; ++c) {
              T sum{0};
              for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t s = 0; s < spatial; ++s) sum += input[(n * channels + c) * spatial + s];
              const T mean = sum / count;
              T sq{0};
              for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t s = 0; s < spatial; ++s) {
                  const T d = input[(n * channels + c) * spatial + s] - mean;
                  sq += d * d;
                }
              const T var = sq / count;
              const T inv_std = T(1) / std::sqrt(var + op.eps);
              cache.batch_mean[c] = mean;
              cache.batch_var[c] = var;
              cache.inv_std[c] = inv_std;
              for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t s = 0; s < spatial; ++s) {
                  const std::size_t i = (n * channels + c) * spatial + s;
                  cache.xhat[i] = (input[i] - mean) * inv_std;
                  out[i] = op.gamma[c] * cache.xhat[i] + op.beta[c];
                }
            }
          }
          return out;
        } else if constexpr (std::is_same_v<Op, PReLU<T>>) {
          const std::size_t batch = input.dim(0);
          const auto [channels, spatial] = detail::channel_split(input.shape());
          Tensor<T> out(input.shape());
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t c = 0; c < channels; ++c) {
              const T a = op.slope[c];
              const std::size_t base = (n * channels + c) * spatial;
              for (std::size_t s = 0; s < spatial; ++s) {
                const T x = input[base + s];
                out[base + s] = x > T{0} ? x : a * x;
              }
            }
          return out;
        } else if constexpr (std::is_same_v<Op, Linear<T>>) {
          return detail::linear_forward(op, input);
        } else if constexpr (std::is_same_v<Op, Flatten>) {
          return input.reshaped({input.dim(0), input.sample_size()});
        } else {
          const std::size_t k = op.kernel;
          const std::size_t batch = input.dim(0), channels = input.dim(1), h = input.dim(2), w = input.dim(3);
          Tensor<T> out({batch, channels, h / k, w / k});
          const T inv = T(1) / static_cast<T>(k * k);
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t c = 0; c < channels; ++c)
              for (std::size_t oy = 0; oy < h / k; ++oy)
                for (std::size_t ox = 0; ox < w / k; ++ox) {
                  T s{0};
                  for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) s += input.at(n, c, oy * k + dy, ox * k + dx);
                  out.at(n, c, oy, ox) = s * inv;
                }
          return out;
        }
      },
      layer.op);
  return result;
}

/// Exact adjoint of layer_forward at the cached point. The cache is consumed.
template <typename T>
LayerGrads<T> layer_backward(const Layer<T>& layer, LayerCache<T>& cache, const Tensor<T>& grad_output,
                             ParamGrads want = ParamGrads::compute) {
  require(cache.layer_uid == layer.uid, Errc::stale_cache, "cache belongs to a different layer");
  require(!cache.spent, Errc::stale_cache, "cache already consumed by a previous backward");
  Shape expected_out = layer.out_shape;
  expected_out.insert(expected_out.begin(), cache.input.dim(0));
  require(grad_output.shape() == expected_out, Errc::shape_mismatch,
          layer_kind(layer) + " backward expects " + shape_str(expected_out) + ", got " + shape_str(grad_output.shape()));
  cache.spent = true;
  const Tensor<T>& input = cache.input;

  return std::visit(
      [&](const auto& op) -> LayerGrads<T> {
        using Op = std::decay_t<decltype(op)>;
        LayerGrads<T> grads;
        if constexpr (std::is_same_v<Op, Standardize<T>>) {
          grads.grad_input = Tensor<T>(input.shape());
          for (std::size_t i = 0; i < input.size(); ++i) grads.grad_input[i] = grad_output[i] * op.scale;
        } else if constexpr (std::is_same_v<Op, Conv2d<T>>) {
          grads = detail::conv_backward(op, input, grad_output, want);
        } else if constexpr (std::is_same_v<Op, BatchNorm<T>>) {
          const std::size_t batch = input.dim(0);
          const auto [channels, spatial] = detail::channel_split(input.shape());
          grads.grad_input = Tensor<T>(input.shape());
          Tensor<T> dgamma({channels}), dbeta({channels});
          for (std::size_t c = 0; c < channels; ++c) {
            T sum_dy{0}, sum_dy_xhat{0};
            if (cache.mode == Mode::infer) {
              const T inv_std = T(1) / std::sqrt(op.running_var[c] + op.eps);
              const T a = op.gamma[c] * inv_std;
              for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t s = 0; s < spatial; ++s) {
                  const std::size_t i = (n * channels + c) * spatial + s;
                  grads.grad_input[i] = grad_output[i] * a;
                  sum_dy += grad_output[i];
                  sum_dy_xhat += grad_output[i] * (input[i] - op.running_mean[c]) * inv_std;
                }
            } else {
              const T count = static_cast<T>(batch * spatial);
              for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t s = 0; s < spatial; ++s) {
                  const std::size_t i = (n * channels + c) * spatial + s;
                  sum_dy += grad_output[i];
                  sum_dy_xhat += grad_output[i] * cache.xhat[i];
                }
              const T scale = op.gamma[c] * cache.inv_std[c] / count;
              for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t s = 0; s < spatial; ++s) {
                  const std::size_t i = (n * channels + c) * spatial + s;
                  grads.grad_input[i] = scale * (count * grad_output[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
                }
            }
            dgamma[c] = sum_dy_xhat;
            dbeta[c] = sum_dy;
          }
          if (want == ParamGrads::compute) {
            grads.grad_params.push_back(std::move(dgamma));
            grads.grad_params.push_back(std::move(dbeta));
          }
        } else if constexpr (std::is_same_v<Op, PReLU<T>>) {
          const std::size_t batch = input.dim(0);
          const auto [channels, spatial] = detail::channel_split(input.shape());
          grads.grad_input = Tensor<T>(input.shape());
          Tensor<T> dslope({channels});
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t c = 0; c < channels; ++c) {
              const T a = op.slope[c];
              const std::size_t base = (n * channels + c) * spatial;
              T ds{0};
              for (std::size_t s = 0; s < spatial; ++s) {
                const T x = input[base + s];
                const T g = grad_output[base + s];
                if (x > T{0}) {
                  grads.grad_input[base + s] = g;
                } else {
                  grads.grad_input[base + s] = a * g;
                  ds += g * x;
                }
              }
              dslope[c] += ds;
            }
          if (want == ParamGrads::compute) grads.grad_params.push_back(std::move(dslope));
        } else if constexpr (std::is_same_v<Op, Linear<T>>) {
          grads = detail::linear_backward(op, input, grad_output, want);
        } else if constexpr (std::is_same_v<Op, Flatten>) {
          grads.grad_input = grad_output.reshaped(input.shape());
        } else {
          const std::size_t k = op.kernel;
          const std::size_t batch = input.dim(0), channels = input.dim(1), h = input.dim(2), w = input.dim(3);
          grads.grad_input = Tensor<T>(input.shape());
          const T inv = T(1) / static_cast<T>(k * k);
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t c = 0; c < channels; ++c)
              for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                  grads.grad_input.at(n, c, y, x) = grad_output.at(n, c, y / k, x / k) * inv;
        }
        return grads;
      },
      layer.op);
}

}  // namespace fsal
