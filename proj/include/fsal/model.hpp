#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fsal/head.hpp"
#include "fsal/layers.hpp"
#include "fsal/rng.hpp"
#include "fsal/tensor.hpp"

namespace fsal {

/// Sequential embedding network: standardize, conv blocks, flatten, linear, then
/// per-row L2 normalization (applied by the pass functions, not stored as a layer).
template <typename T>
struct ModelGraph {
  std::string arch;
  std::size_t embedding_dim{};
  std::size_t channels{3}, height{32}, width{32};
  std::vector<Layer<T>> layers;
  std::optional<ClassifierHead<T>> head;

  Shape input_shape() const { return {channels, height, width}; }
};

struct ArchSpec {
  std::string name;
  std::vector<std::size_t> widths;
};

inline const std::vector<ArchSpec>& known_architectures() {
  static const std::vector<ArchSpec> archs = {
      {"tiny_a", {16, 32, 64}},
      {"tiny_b", {12, 24, 48, 96}},
      {"tiny_wide", {32, 64, 128}},
  };
  return archs;
}

inline const ArchSpec& find_architecture(const std::string& name) {
  for (const auto& a : known_architectures())
    if (a.name == name) return a;
  fail(Errc::unknown_architecture, "unknown architecture '" + name + "'");
}

/// Layer stack for `arch` with zeroed parameters; BN running variance starts at 1.
template <typename T>
ModelGraph<T> model_skeleton(const std::string& arch, std::size_t embedding_dim, std::size_t channels = 3,
                             std::size_t height = 32, std::size_t width = 32) {
  const ArchSpec& spec = find_architecture(arch);
  require(embedding_dim > 0, Errc::invalid_argument, "embedding dimension must be positive");
  ModelGraph<T> model;
  model.arch = arch;
  model.embedding_dim = embedding_dim;
  model.channels = channels;
  model.height = height;
  model.width = width;

  Shape shape = model.input_shape();
  auto push = [&](LayerOp<T> op) {
    model.layers.push_back(make_layer<T>(std::move(op), shape));
    shape = model.layers.back().out_shape;
  };

  push(Standardize<T>{});
  std::size_t in_c = channels;
  for (std::size_t width_c : spec.widths) {
    Conv2d<T> conv;
    conv.in_channels = in_c;
    conv.out_channels = width_c;
    conv.kernel = 3;
    conv.stride = 2;
    conv.pad = 1;
    conv.weight = Tensor<T>({width_c, in_c, 3, 3});
    push(std::move(conv));

    BatchNorm<T> bn;
    bn.channels = width_c;
    bn.gamma = Tensor<T>({width_c}, T(1));
    bn.beta = Tensor<T>({width_c});
    bn.running_mean = Tensor<T>({width_c});
    bn.running_var = Tensor<T>({width_c}, T(1));
    push(std::move(bn));

    PReLU<T> act;
    act.channels = width_c;
    act.slope = Tensor<T>({width_c}, T(0.25));
    push(std::move(act));
    in_c = width_c;
  }
  push(Flatten{});
  Linear<T> lin;
  lin.in_features = shape[0];
  lin.out_features = embedding_dim;
  lin.weight = Tensor<T>({embedding_dim, shape[0]});
  lin.bias = Tensor<T>({embedding_dim});
  push(std::move(lin));
  return model;
}

/// Deterministic He-initialized model.
template <typename T>
ModelGraph<T> build_model(const std::string& arch, std::size_t embedding_dim, std::uint64_t seed,
                          std::size_t channels = 3, std::size_t height = 32, std::size_t width = 32) {
  ModelGraph<T> model = model_skeleton<T>(arch, embedding_dim, channels, height, width);
  Rng rng(derive_seed(seed, {0x6d6f64656cULL}));
  for (auto& layer : model.layers) {
    if (auto* conv = std::get_if<Conv2d<T>>(&layer.op)) {
      const double std_dev = std::sqrt(2.0 / static_cast<double>(conv->in_channels * conv->kernel * conv->kernel));
      for (auto& w : conv->weight.values()) w = static_cast<T>(rng.normal() * std_dev);
    } else if (auto* lin = std::get_if<Linear<T>>(&layer.op)) {
      const double std_dev = std::sqrt(2.0 / static_cast<double>(lin->in_features));
      for (auto& w : lin->weight.values()) w = static_cast<T>(rng.normal() * std_dev);
    }
  }
  return model;
}

template <typename U, typename T>
ModelGraph<U> cast_model(const ModelGraph<T>& model) {
  ModelGraph<U> out = model_skeleton<U>(model.arch, model.embedding_dim, model.channels, model.height, model.width);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto src = layer_params(model.layers[i], false);
    auto dst = layer_params(out.layers[i], false);
    for (std::size_t p = 0; p < src.size(); ++p) *dst[p] = src[p]->template cast<U>();
    if (const auto* s = std::get_if<Standardize<T>>(&model.layers[i].op)) {
      auto& d = std::get<Standardize<U>>(out.layers[i].op);
      d.shift = static_cast<U>(s->shift);
      d.scale = static_cast<U>(s->scale);
    }
  }
  if (model.head) out.head = model.head->template cast<U>();
  return out;
}

/// Layers whose outputs may be masked.
struct Instrumentation {
  std::vector<std::size_t> layers;
  bool rescale{false};
};

/// Default instrumentation: every activation output that follows a convolution block.
template <typename T>
Instrumentation default_instrumentation(const ModelGraph<T>& model) {
  Instrumentation inst;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    if (std::holds_alternative<PReLU<T>>(model.layers[i].op) && model.layers[i].out_shape.size() == 3)
      inst.layers.push_back(i);
  return inst;
}

template <typename T>
void validate_instrumentation(const ModelGraph<T>& model, const Instrumentation& inst) {
  for (std::size_t i = 0; i < inst.layers.size(); ++i) {
    const std::size_t idx = inst.layers[i];
    require(idx < model.layers.size(), Errc::invalid_argument, "instrumented layer index out of range");
    require(model.layers[idx].out_shape.size() == 3, Errc::invalid_argument,
            "instrumented layer " + std::to_string(idx) + " has no spatial output");
    require(i == 0 || inst.layers[i - 1] < idx, Errc::invalid_argument, "instrumented layers must be increasing");
  }
}

/// Bernoulli 0/1 masks for one iteration. Each mask has a leading batch axis of 1
/// (shared by every row of the batch) or of the batch size (one mask per row).
template <typename T>
struct MaskPlan {
  std::size_t iteration{};
  double drop_rate{};
  std::uint64_t seed{};
  bool rescale{false};
  std::vector<std::size_t> layers;
  std::vector<Tensor<T>> masks;

  std::size_t batch() const { return masks.empty() ? 1 : masks.front().dim(0); }
};

template <typename T>
MaskPlan<T> sample_masks(const ModelGraph<T>& model, const Instrumentation& inst, double drop_rate,
                         std::size_t iteration, std::uint64_t seed) {
  require(drop_rate >= 0.0 && drop_rate < 1.0, Errc::invalid_argument, "drop rate must lie in [0, 1)");
  validate_instrumentation(model, inst);
  MaskPlan<T> plan;
  plan.iteration = iteration;
  plan.drop_rate = drop_rate;
  plan.seed = seed;
  plan.rescale = inst.rescale;
  plan.layers = inst.layers;
  for (std::size_t idx : inst.layers) {
    Shape shape = model.layers[idx].out_shape;
    shape.insert(shape.begin(), 1);
    Tensor<T> mask(shape, T(1));
    if (drop_rate > 0.0) {
      Rng rng(derive_seed(seed, {iteration, idx}));
      for (auto& m : mask.values()) m = rng.uniform() < drop_rate ? T(0) : T(1);
    }
    plan.masks.push_back(std::move(mask));
  }
  return plan;
}

/// All-ones plan over the default instrumentation.
template <typename T>
MaskPlan<T> identity_plan(const ModelGraph<T>& model) {
  return sample_masks(model, default_instrumentation(model), 0.0, 0, 0);
}

/// Row-stacks single-sample plans (same layers) into one per-row plan.
template <typename T>
MaskPlan<T> stack_plans(std::span<const MaskPlan<T>> plans) {
  require(!plans.empty(), Errc::invalid_argument, "stack_plans of nothing");
  MaskPlan<T> out;
  out.iteration = plans.front().iteration;
  out.drop_rate = plans.front().drop_rate;
  out.seed = plans.front().seed;
  out.rescale = plans.front().rescale;
  out.layers = plans.front().layers;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    std::vector<Tensor<T>> parts;
    parts.reserve(plans.size());
    for (const auto& p : plans) {
      require(p.layers == out.layers, Errc::invalid_argument, "stack_plans: differing instrumentation");
      parts.push_back(p.masks[l]);
    }
    out.masks.push_back(concat_batch<T>(std::span<const Tensor<T>>(parts)));
  }
  return out;
}

template <typename T>
struct NetworkPass {
  std::vector<LayerCache<T>> caches;  // empty unless requested
  Tensor<T> features;                 // before normalization
  Tensor<T> embedding;                // unit rows
};

namespace detail {

template <typename T>
void apply_mask(Tensor<T>& t, const Tensor<T>& mask, bool rescale, double drop_rate) {
  const std::size_t rows = t.dim(0);
  const std::size_t per = t.sample_size();
  require(mask.sample_size() == per && (mask.dim(0) == 1 || mask.dim(0) == rows), Errc::shape_mismatch,
          "mask " + shape_str(mask.shape()) + " does not fit activation " + shape_str(t.shape()));
  const T gain = rescale ? static_cast<T>(1.0 / (1.0 - drop_rate)) : T(1);
  for (std::size_t n = 0; n < rows; ++n) {
    const T* m = mask.data() + (mask.dim(0) == 1 ? 0 : n * per);
    T* v = t.data() + n * per;
    if (rescale)
      for (std::size_t i = 0; i < per; ++i) v[i] *= m[i] * gain;
    else
      for (std::size_t i = 0; i < per; ++i) v[i] *= m[i];
  }
}

template <typename T>
const Tensor<T>* mask_for(const MaskPlan<T>* plan, std::size_t layer_index) {
  if (plan == nullptr) return nullptr;
  for (std::size_t i = 0; i < plan->layers.size(); ++i)
    if (plan->layers[i] == layer_index) return &plan->masks[i];
  return nullptr;
}

}  // namespace detail

template <typename T>
void require_geometry(const ModelGraph<T>& model, const Tensor<T>& images) {
  require(images.rank() == 4 && Shape(images.shape().begin() + 1, images.shape().end()) == model.input_shape(),
          Errc::shape_mismatch,
          "model expects images of " + shape_str(model.input_shape()) + ", got " + shape_str(images.shape()));
}

/// Forward through the whole network. Instrumented outputs are multiplied by the
/// plan's masks (forward) and the same masks gate the backward pass.
template <typename T>
NetworkPass<T> forward_pass(const ModelGraph<T>& model, const Tensor<T>& images, Mode mode,
                            const MaskPlan<T>* plan = nullptr, bool keep_caches = false) {
  require_geometry(model, images);
  if (plan != nullptr)
    for (std::size_t idx : plan->layers)
      require(idx < model.layers.size(), Errc::shape_mismatch, "mask plan refers to a missing layer");
  NetworkPass<T> pass;
  Tensor<T> x = images;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    LayerOutput<T> out = layer_forward(model.layers[i], x, mode);
    if (const Tensor<T>* mask = detail::mask_for(plan, i))
      detail::apply_mask(out.output, *mask, plan->rescale, plan->drop_rate);
    if (keep_caches) pass.caches.push_back(std::move(out.cache));
    x = std::move(out.output);
  }
  pass.embedding = l2_normalize(x, 1);
  pass.features = std::move(x);
  return pass;
}

/// Backward through a pass recorded with keep_caches. The adjoint is taken with
/// respect to the embedding and, optionally, the raw features. Returns the input
/// gradient; parameter gradients (trainable only, per layer) go to `param_grads`.
template <typename T>
Tensor<T> backward_pass(const ModelGraph<T>& model, NetworkPass<T>& pass, const Tensor<T>* grad_embedding,
                        const Tensor<T>* grad_features = nullptr, const MaskPlan<T>* plan = nullptr,
                        std::vector<std::vector<Tensor<T>>>* param_grads = nullptr) {
  require(pass.caches.size() == model.layers.size(), Errc::stale_cache, "pass was recorded without caches");
  Tensor<T> g;
  if (grad_embedding != nullptr) {
    require_same_shape(*grad_embedding, pass.embedding, "backward_pass adjoint");
    g = l2_normalize_backward(pass.features, *grad_embedding, 1);
    if (grad_features != nullptr) {
      require_same_shape(*grad_features, pass.features, "backward_pass feature adjoint");
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*grad_features)[i];
    }
  } else {
    require(grad_features != nullptr, Errc::invalid_argument, "backward_pass needs an adjoint");
    g = *grad_features;
  }
  const ParamGrads want = param_grads != nullptr ? ParamGrads::compute : ParamGrads::skip;
  if (param_grads != nullptr) param_grads->assign(model.layers.size(), {});
  for (std::size_t i = model.layers.size(); i-- > 0;) {
    if (const Tensor<T>* mask = detail::mask_for(plan, i)) detail::apply_mask(g, *mask, plan->rescale, plan->drop_rate);
    LayerGrads<T> lg = layer_backward(model.layers[i], pass.caches[i], g, want);
    if (param_grads != nullptr) (*param_grads)[i] = std::move(lg.grad_params);
    g = std::move(lg.grad_input);
  }
  return g;
}

/// Unit-norm embeddings, one row per image, inference-mode statistics.
template <typename T>
Tensor<T> embed(const ModelGraph<T>& model, const Tensor<T>& images) {
  return forward_pass(model, images, Mode::infer).embedding;
}

template <typename T>
Tensor<T> masked_embed(const ModelGraph<T>& model, const Tensor<T>& images, const MaskPlan<T>& plan) {
  return forward_pass(model, images, Mode::infer, &plan).embedding;
}

template <typename T>
struct EmbeddingWithGrad {
  Tensor<T> embedding;
  Tensor<T> grad_input;
};

/// Embedding under `plan` and the gradient of <embedding, adjoint> w.r.t. the images.
template <typename T>
EmbeddingWithGrad<T> masked_embed_with_input_grad(const ModelGraph<T>& model, const Tensor<T>& images,
                                                  const MaskPlan<T>* plan, const Tensor<T>& adjoint) {
  NetworkPass<T> pass = forward_pass(model, images, Mode::infer, plan, true);
  require_same_shape(adjoint, pass.embedding, "adjoint");
  EmbeddingWithGrad<T> out;
  out.grad_input = backward_pass<T>(model, pass, &adjoint, nullptr, plan);
  out.embedding = std::move(pass.embedding);
  return out;
}

/// Euclidean distance between row r of a and row r of b.
template <typename T>
std::vector<double> row_distances(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "row_distances");
  const std::size_t rows = a.dim(0), d = a.sample_size();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double diff = static_cast<double>(a[r * d + i]) - static_cast<double>(b[r * d + i]);
      s += diff * diff;
    }
    out[r] = std::sqrt(s);
  }
  return out;
}

}  // namespace fsal
