#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsal/head.hpp"
#include "fsal/model.hpp"
#include "fsal/rng.hpp"

namespace fsal {

template <typename T>
struct CrossEntropy {
  T loss{};
  Tensor<T> grad_logits;
};

/// -log softmax(logits)[label] and its gradient softmax - onehot, for a 1-D logit vector.
template <typename T>
CrossEntropy<T> softmax_ce(const Tensor<T>& logits, std::size_t label) {
  require(logits.rank() == 1, Errc::shape_mismatch, "softmax_ce expects a 1-D logit vector");
  const std::size_t c = logits.size();
  require(label < c, Errc::invalid_argument,
          "label " + std::to_string(label) + " out of range for " + std::to_string(c) + " classes");
  const T peak = *std::max_element(logits.values().begin(), logits.values().end());
  T z{0};
  for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[j] - peak);
  const T log_z = std::log(z) + peak;
  CrossEntropy<T> out;
  out.loss = log_z - logits[label];
  out.grad_logits = Tensor<T>({c});
  for (std::size_t j = 0; j < c; ++j) out.grad_logits[j] = std::exp(logits[j] - log_z);
  out.grad_logits[label] -= T(1);
  return out;
}

/// s * (cos(theta_j) - m [j == label]) with the head columns normalized.
template <typename T>
Tensor<T> margin_logits(const Tensor<T>& embedding, const ClassifierHead<T>& head, std::size_t label) {
  require(head.mode == HeadMode::margin, Errc::invalid_argument, "margin_logits on a softmax head");
  require(embedding.size() == head.dim(), Errc::shape_mismatch, "embedding/head dimension mismatch");
  require(label < head.classes, Errc::invalid_argument, "label out of range");
  const auto norms = head_column_norms(head);
  Tensor<T> logits({head.classes});
  for (std::size_t j = 0; j < head.classes; ++j) {
    T dot{0};
    for (std::size_t i = 0; i < head.dim(); ++i) dot += embedding[i] * head.weight[i * head.classes + j];
    logits[j] = head.scale * (dot / norms[j] - (j == label ? head.margin : T(0)));
  }
  return logits;
}

/// Logits for a batch. Softmax heads read `features`, margin heads read `embedding`.
/// With `labels` the margin is subtracted from each row's label logit (training form).
template <typename T>
Tensor<T> head_logits(const ClassifierHead<T>& head, const Tensor<T>& features, const Tensor<T>& embedding,
                      const std::vector<std::size_t>* labels = nullptr) {
  const Tensor<T>& x = head.mode == HeadMode::softmax ? features : embedding;
  const std::size_t rows = x.dim(0), d = head.dim(), c = head.classes;
  require(x.sample_size() == d, Errc::shape_mismatch, "head input dimension mismatch");
  Tensor<T> logits({rows, c});
  if (head.mode == HeadMode::softmax) {
    gemm<T>(rows, c, d, x.data(), d, 1, head.weight.data(), logits.data(), false);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) logits[r * c + j] += head.bias[j];
  } else {
    const auto norms = head_column_norms(head);
    Tensor<T> wn(head.weight.shape());
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < c; ++j) wn[i * c + j] = head.weight[i * c + j] / norms[j];
    gemm<T>(rows, c, d, x.data(), d, 1, wn.data(), logits.data(), false);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        T v = logits[r * c + j];
        if (labels != nullptr && (*labels)[r] == j) v -= head.margin;
        logits[r * c + j] = head.scale * v;
      }
  }
  return logits;
}

template <typename T>
struct HeadGrads {
  Tensor<T> grad_input;  // w.r.t. features (softmax) or embedding (margin)
  Tensor<T> grad_weight;
  Tensor<T> grad_bias;
};

template <typename T>
HeadGrads<T> head_backward(const ClassifierHead<T>& head, const Tensor<T>& features, const Tensor<T>& embedding,
                           const Tensor<T>& grad_logits, bool want_params) {
  const Tensor<T>& x = head.mode == HeadMode::softmax ? features : embedding;
  const std::size_t rows = x.dim(0), d = head.dim(), c = head.classes;
  HeadGrads<T> g;
  g.grad_input = Tensor<T>({rows, d});
  // W is d x C; grad_input = grad_logits (rows x C) * W^T, i.e. B = W^T (C x d).
  Tensor<T> w_eff = head.weight;
  std::vector<T> norms;
  if (head.mode == HeadMode::margin) {
    norms = head_column_norms(head);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < c; ++j) w_eff[i * c + j] = head.weight[i * c + j] / norms[j];
  }
  Tensor<T> dl = grad_logits;
  if (head.mode == HeadMode::margin)
    for (auto& v : dl.values()) v *= head.scale;
  std::vector<T> w_t(c * d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < c; ++j) w_t[j * d + i] = w_eff[i * c + j];
  gemm<T>(rows, d, c, dl.data(), c, 1, w_t.data(), g.grad_input.data(), false);
  if (want_params) {
    Tensor<T> dw({d, c});
    gemm<T>(d, c, rows, x.data(), 1, d, dl.data(), dw.data(), false);
    if (head.mode == HeadMode::margin) {
      // d/dw of w/||w|| per column.
      for (std::size_t j = 0; j < c; ++j) {
        T dot{0};
        for (std::size_t i = 0; i < d; ++i) dot += dw[i * c + j] * w_eff[i * c + j];
        for (std::size_t i = 0; i < d; ++i) dw[i * c + j] = (dw[i * c + j] - w_eff[i * c + j] * dot) / norms[j];
      }
    }
    Tensor<T> db({c});
    if (head.mode == HeadMode::softmax)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) db[j] += dl[r * c + j];
    g.grad_weight = std::move(dw);
    g.grad_bias = std::move(db);
  }
  return g;
}

struct TrainConfig {
  double base_lr{0.02};
  std::vector<std::size_t> decay_epochs{10};
  double decay_factor{0.1};
  double momentum{0.9};
  double weight_decay{5e-4};
  std::size_t batch_size{32};
  std::size_t epochs{15};
  std::uint64_t seed{1};
  std::size_t embedding_dim{64};
  double margin{0.35};
  double scale{30.0};

  double lr_at(std::size_t epoch) const {
    double lr = base_lr;
    for (std::size_t e : decay_epochs)
      if (epoch >= e) lr *= decay_factor;
    return lr;
  }

  void validate() const {
    require(base_lr > 0 && momentum >= 0 && momentum < 1 && weight_decay >= 0 && batch_size > 0 && epochs > 0 &&
                embedding_dim > 0 && decay_factor > 0,
            Errc::invalid_argument, "invalid training configuration");
  }
};

struct EpochLog {
  std::size_t epoch{};
  double loss{};
  double accuracy{};
  double lr{};
};

/// Images (N x C x H x W, pixels in [0, 255]) with identity labels in [0, classes).
struct LabeledImages {
  Tensor<float> images;
  std::vector<std::size_t> labels;
  std::size_t classes{};
};

template <typename T>
struct TrainResult {
  ModelGraph<T> model;  // frozen, head retained for label-level attacks
  std::vector<EpochLog> log;
};

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}, {"lr", e.lr}};
}

inline void write_train_log(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  require(static_cast<bool>(os), Errc::io, "cannot write " + path.string());
  for (const auto& e : log) os << to_json(e).dump() << '\n';
}

namespace detail {

template <typename T>
void sgd_step(Tensor<T>& param, Tensor<T>& velocity, const Tensor<T>& grad, double lr, double momentum,
              double weight_decay) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i] + static_cast<T>(weight_decay) * param[i];
    velocity[i] = static_cast<T>(momentum) * velocity[i] + g;
    param[i] -= static_cast<T>(lr) * velocity[i];
  }
}

}  // namespace detail

/// Mini-batch SGD with momentum on softmax cross-entropy (optionally cosine-margin
/// logits). Single-threaded and bit-reproducible for a fixed seed.
template <typename T = float>
TrainResult<T> train_model(const std::string& arch, const LabeledImages& data, HeadMode head_mode,
                           const TrainConfig& config) {
  config.validate();
  require(data.classes >= 2, Errc::insufficient_data, "training needs at least two identities");
  require(data.images.rank() == 4 && data.images.dim(0) == data.labels.size() && !data.labels.empty(),
          Errc::shape_mismatch, "images and labels disagree");
  for (std::size_t l : data.labels) require(l < data.classes, Errc::invalid_argument, "label out of range");

  TrainResult<T> result;
  ModelGraph<T>& model = result.model;
  model = build_model<T>(arch, config.embedding_dim, config.seed, data.images.dim(1), data.images.dim(2),
                         data.images.dim(3));
  {
    ClassifierHead<T> head;
    head.mode = head_mode;
    head.classes = data.classes;
    head.margin = static_cast<T>(config.margin);
    head.scale = static_cast<T>(config.scale);
    head.weight = Tensor<T>({config.embedding_dim, data.classes});
    head.bias = Tensor<T>({data.classes});
    Rng rng(derive_seed(config.seed, {0x68656164ULL}));
    const double std_dev = std::sqrt(1.0 / static_cast<double>(config.embedding_dim));
    for (auto& w : head.weight.values()) w = static_cast<T>(rng.normal() * std_dev);
    model.head = std::move(head);
  }

  std::vector<Tensor<T>*> params;
  std::vector<bool> decays;
  for (auto& layer : model.layers) {
    const bool is_weight = std::holds_alternative<Conv2d<T>>(layer.op) || std::holds_alternative<Linear<T>>(layer.op);
    auto refs = layer_params(layer, true);
    for (std::size_t p = 0; p < refs.size(); ++p) {
      params.push_back(refs[p]);
      decays.push_back(is_weight && p == 0);
    }
  }
  params.push_back(&model.head->weight);
  decays.push_back(head_mode == HeadMode::softmax);
  params.push_back(&model.head->bias);
  decays.push_back(false);
  std::vector<Tensor<T>> velocity;
  for (auto* p : params) velocity.emplace_back(p->shape());

  const Tensor<T> all_images = data.images.template cast<T>();
  const std::size_t n = data.labels.size();
  const std::size_t per = all_images.sample_size();
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, {0x65706f6368ULL, epoch}));
    rng.shuffle(order.begin(), order.end());
    const double lr = config.lr_at(epoch);
    double loss_sum = 0.0;
    std::size_t correct = 0;

    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t rows = std::min(config.batch_size, n - start);
      if (rows < 2) continue;  // batch statistics need two samples
      Shape shape = all_images.shape();
      shape[0] = rows;
      Tensor<T> batch(shape);
      std::vector<std::size_t> labels(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t idx = order[start + r];
        std::copy_n(all_images.data() + idx * per, per, batch.data() + r * per);
        labels[r] = data.labels[idx];
      }

      NetworkPass<T> pass;
      try {
        pass = forward_pass<T>(model, batch, Mode::train, nullptr, true);
      } catch (const Error& e) {
        if (e.code() != Errc::non_finite) throw;
        fail(Errc::divergence, "non-finite activations at epoch " + std::to_string(epoch) + ", sample " +
                                   std::to_string(start) + " (lr " + std::to_string(lr) + ")");
      }
      const ClassifierHead<T>& head = *model.head;
      const Tensor<T> logits = head_logits(head, pass.features, pass.embedding, &labels);
      const std::size_t c = head.classes;
      Tensor<T> dlogits({rows, c});
      for (std::size_t r = 0; r < rows; ++r) {
        Tensor<T> row({c}, std::vector<T>(logits.data() + r * c, logits.data() + (r + 1) * c));
        CrossEntropy<T> ce = softmax_ce(row, labels[r]);
        if (!std::isfinite(static_cast<double>(ce.loss)))
          fail(Errc::divergence, "non-finite loss at epoch " + std::to_string(epoch) + ", sample " +
                                     std::to_string(start + r) + " (lr " + std::to_string(lr) + ")");
        loss_sum += ce.loss;
        for (std::size_t j = 0; j < c; ++j) dlogits[r * c + j] = ce.grad_logits[j] / static_cast<T>(rows);
      }
      const Tensor<T> plain = head_logits(head, pass.features, pass.embedding);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* row = plain.data() + r * c;
        if (static_cast<std::size_t>(std::max_element(row, row + c) - row) == labels[r]) ++correct;
      }

      HeadGrads<T> hg = head_backward(head, pass.features, pass.embedding, dlogits, true);
      std::vector<std::vector<Tensor<T>>> layer_grads;
      if (head.mode == HeadMode::softmax)
        backward_pass<T>(model, pass, nullptr, &hg.grad_input, nullptr, &layer_grads);
      else
        backward_pass<T>(model, pass, &hg.grad_input, nullptr, nullptr, &layer_grads);

      std::vector<const Tensor<T>*> grads;
      for (auto& lg : layer_grads)
        for (auto& g : lg) grads.push_back(&g);
      grads.push_back(&hg.grad_weight);
      grads.push_back(&hg.grad_bias);
      require(grads.size() == params.size(), Errc::invalid_argument, "gradient/parameter count mismatch");
      for (std::size_t p = 0; p < params.size(); ++p)
        detail::sgd_step(*params[p], velocity[p], *grads[p], lr, config.momentum, decays[p] ? config.weight_decay : 0.0);
      for (const auto* p : params)
        if (!p->all_finite())
          fail(Errc::divergence, "non-finite parameters after the update at epoch " + std::to_string(epoch) +
                                     ", sample " + std::to_string(start) + " (lr " + std::to_string(lr) + ")");

      // Running statistics from this batch's cached moments.
      for (std::size_t i = 0; i < model.layers.size(); ++i) {
        auto* bn = std::get_if<BatchNorm<T>>(&model.layers[i].op);
        if (bn == nullptr) continue;
        const auto& cache = pass.caches[i];
        const T count = static_cast<T>(cache.input.size() / bn->channels);
        for (std::size_t ch = 0; ch < bn->channels; ++ch) {
          const T unbiased = cache.batch_var[ch] * count / std::max(count - T(1), T(1));
          bn->running_mean[ch] = (T(1) - bn->momentum) * bn->running_mean[ch] + bn->momentum * cache.batch_mean[ch];
          bn->running_var[ch] = (T(1) - bn->momentum) * bn->running_var[ch] + bn->momentum * unbiased;
        }
      }
    }

    for (auto* p : params)
      require(p->all_finite(), Errc::divergence, "parameters became non-finite at epoch " + std::to_string(epoch));
    result.log.push_back({epoch + 1, loss_sum / static_cast<double>(n), static_cast<double>(correct) / n, lr});
  }
  return result;
}

}  // namespace fsal
