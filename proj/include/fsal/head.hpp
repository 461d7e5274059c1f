#pragma once

#include <cmath>
#include <string>

#include "fsal/tensor.hpp"

namespace fsal {

enum class HeadMode { softmax, margin };

inline std::string to_string(HeadMode mode) { return mode == HeadMode::softmax ? "softmax" : "margin"; }

inline HeadMode head_mode_from_string(const std::string& s) {
  if (s == "softmax") return HeadMode::softmax;
  if (s == "margin" || s == "cosine-margin") return HeadMode::margin;
  fail(Errc::invalid_argument, "unknown head mode '" + s + "'");
}

/// Identity classifier kept alongside a trained embedding network.
///
/// Softmax mode reads the un-normalized features, margin mode reads the unit
/// embedding and normalizes the columns of `weight` before taking dot products.
template <typename T>
struct ClassifierHead {
  HeadMode mode{HeadMode::softmax};
  std::size_t classes{};
  Tensor<T> weight;  // d x C
  Tensor<T> bias;    // C, zero in margin mode
  T margin{T(0.35)};
  T scale{T(30)};

  std::size_t dim() const { return weight.dim(0); }

  template <typename U>
  ClassifierHead<U> cast() const {
    ClassifierHead<U> out;
    out.mode = mode;
    out.classes = classes;
    out.weight = weight.template cast<U>();
    out.bias = bias.template cast<U>();
    out.margin = static_cast<U>(margin);
    out.scale = static_cast<U>(scale);
    return out;
  }
};

/// Column norms of the head weight.
template <typename T>
std::vector<T> head_column_norms(const ClassifierHead<T>& head) {
  const std::size_t d = head.dim(), c = head.classes;
  std::vector<T> norms(c, T{0});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < c; ++j) norms[j] += head.weight[i * c + j] * head.weight[i * c + j];
  for (auto& n : norms) {
    n = std::sqrt(n);
    require(n > T{0}, Errc::zero_norm, "classifier column with zero norm");
  }
  return norms;
}

}  // namespace fsal
