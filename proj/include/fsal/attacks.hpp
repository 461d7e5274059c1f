#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsal/model.hpp"
#include "fsal/rng.hpp"
#include "fsal/training.hpp"
#include "fsal/warp.hpp"

namespace fsal {

enum class AttackMode { impersonate, dodge };
enum class AttackLevel { feature, label };
enum class GradNorm { l1, l2 };

inline std::string to_string(AttackMode m) { return m == AttackMode::impersonate ? "impersonate" : "dodge"; }
inline std::string to_string(AttackLevel l) { return l == AttackLevel::feature ? "feature" : "label"; }
inline std::string to_string(GradNorm n) { return n == GradNorm::l1 ? "l1" : "l2"; }

inline AttackMode attack_mode_from_string(const std::string& s) {
  if (s == "impersonate") return AttackMode::impersonate;
  if (s == "dodge") return AttackMode::dodge;
  fail(Errc::invalid_argument, "mode must be impersonate or dodge, got '" + s + "'");
}
inline AttackLevel attack_level_from_string(const std::string& s) {
  if (s == "feature") return AttackLevel::feature;
  if (s == "label") return AttackLevel::label;
  fail(Errc::invalid_argument, "level must be feature or label, got '" + s + "'");
}
inline GradNorm grad_norm_from_string(const std::string& s) {
  if (s == "l1") return GradNorm::l1;
  if (s == "l2") return GradNorm::l2;
  fail(Errc::invalid_argument, "norm must be l1 or l2, got '" + s + "'");
}

/// ceil(min(eps + 4, 1.25 eps)).
inline std::size_t default_iterations(double epsilon) {
  return static_cast<std::size_t>(std::ceil(std::min(epsilon + 4.0, 1.25 * epsilon) - 1e-12));
}

/// Sampling ranges of the diverse-input transform.
struct DiRanges {
  double translate_px{3.0};
  double rotate_deg{10.0};
  double scale_lo{0.9};
  double scale_hi{1.1};
};

struct AttackConfig {
  double epsilon{10.0};
  double step_size{1.0};
  std::size_t max_iters{13};
  double momentum{0.0};
  double di_prob{0.0};
  DiRanges di;
  double drop_rate{0.0};
  std::vector<std::size_t> instrumented;  // empty: every post-activation conv output
  bool rescale{false};
  std::vector<double> weights;  // empty: uniform over surrogates
  AttackMode mode{AttackMode::impersonate};
  AttackLevel level{AttackLevel::feature};
  GradNorm norm{GradNorm::l1};
  std::uint64_t seed{0};
  bool record_trace{true};  // false: only the final distance is measured

  void validate(std::size_t model_count) const {
    require(model_count >= 1, Errc::invalid_argument, "attack needs at least one surrogate model");
    require(std::isfinite(epsilon) && epsilon >= 0, Errc::invalid_argument, "epsilon: must be >= 0");
    require(std::isfinite(step_size) && step_size >= 0, Errc::invalid_argument, "step_size: must be >= 0");
    require(momentum >= 0, Errc::invalid_argument, "momentum: must be >= 0");
    require(di_prob >= 0 && di_prob <= 1, Errc::invalid_argument, "di_prob: must lie in [0, 1]");
    require(drop_rate >= 0 && drop_rate < 1, Errc::invalid_argument, "drop_rate: must lie in [0, 1)");
    require(di.translate_px >= 0 && di.rotate_deg >= 0 && di.scale_lo > 0 && di.scale_lo <= di.scale_hi,
            Errc::invalid_argument, "di ranges: invalid");
    if (!weights.empty()) {
      require(weights.size() == model_count, Errc::invalid_argument, "weights: one weight per surrogate required");
      double sum = 0;
      for (double w : weights) {
        require(w >= 0, Errc::invalid_argument, "weights: must be non-negative");
        sum += w;
      }
      require(std::abs(sum - 1.0) <= 1e-9, Errc::invalid_argument, "weights: must sum to 1");
    }
    if (level == AttackLevel::label)
      require(model_count == 1 && di_prob == 0 && drop_rate == 0, Errc::invalid_argument,
              "level: label attacks support a single surrogate without DI or dropout");
  }

  std::vector<double> resolved_weights(std::size_t model_count) const {
    if (!weights.empty()) return weights;
    return std::vector<double>(model_count, 1.0 / static_cast<double>(model_count));
  }
};

inline nlohmann::json to_json(const AttackConfig& c) {
  return {{"epsilon", c.epsilon},
          {"step_size", c.step_size},
          {"max_iters", c.max_iters},
          {"momentum", c.momentum},
          {"di_prob", c.di_prob},
          {"di_translate_px", c.di.translate_px},
          {"di_rotate_deg", c.di.rotate_deg},
          {"di_scale_lo", c.di.scale_lo},
          {"di_scale_hi", c.di.scale_hi},
          {"drop_rate", c.drop_rate},
          {"instrumented", c.instrumented},
          {"rescale", c.rescale},
          {"weights", c.weights},
          {"mode", to_string(c.mode)},
          {"level", to_string(c.level)},
          {"norm", to_string(c.norm)},
          {"seed", c.seed},
          {"record_trace", c.record_trace}};
}

template <typename T>
struct AttackResult {
  Tensor<T> adversarial;       // 1 x C x H x W
  std::vector<double> trace;   // unmasked first-surrogate distance after each iteration
  std::size_t iterations{};
  double initial_distance{};
  double final_distance{};
  AttackConfig config;
  std::uint64_t seed{};        // per-pair stream seed
  std::string error;           // set when the pair was excluded
  bool already_at_target{false};  // label level: l(x_s) == l(x_t) before the attack

  bool ok() const { return error.empty(); }
};

template <typename T>
nlohmann::json to_json(const AttackResult<T>& r) {
  return {{"iterations", r.iterations},
          {"initial_distance", r.initial_distance},
          {"final_distance", r.final_distance},
          {"trace", r.trace},
          {"seed", r.seed},
          {"error", r.error},
          {"already_at_target", r.already_at_target}};
}

template <typename T>
struct FeatureObjective {
  T value{};
  T distance{};
  Tensor<T> grad;  // dJ/dF_s
};

/// J = -||F_s - F_t|| (impersonate) or +||F_s - F_t|| (dodge); attacks ascend J.
template <typename T>
FeatureObjective<T> feature_objective(const Tensor<T>& source, const Tensor<T>& target, AttackMode mode) {
  require_same_shape(source, target, "feature_objective");
  T ss{0};
  for (std::size_t i = 0; i < source.size(); ++i) ss += (source[i] - target[i]) * (source[i] - target[i]);
  FeatureObjective<T> out;
  out.distance = std::sqrt(ss);
  const T sgn = mode == AttackMode::impersonate ? T(-1) : T(1);
  out.value = sgn * out.distance;
  require(out.distance > T{0}, Errc::degenerate_pair, "coincident embeddings: distance gradient undefined");
  out.grad = Tensor<T>(source.shape());
  for (std::size_t i = 0; i < source.size(); ++i) out.grad[i] = sgn * (source[i] - target[i]) / out.distance;
  return out;
}

/// Random similarity warp (with probability p) and its adjoint.
template <typename T>
struct DiSample {
  std::optional<Warp<T>> warp;  // empty: identity
  WarpParams params;

  Tensor<T> apply(const Tensor<T>& image) const { return warp ? warp->apply(image) : image; }
  Tensor<T> adjoint(const Tensor<T>& grad) const { return warp ? warp->adjoint(grad) : grad; }
};

/// Always consumes five draws from `rng` so streams stay aligned whatever p is.
template <typename T>
DiSample<T> di_transform(std::size_t height, std::size_t width, double p, const DiRanges& ranges, Rng& rng) {
  const double u = rng.uniform();
  WarpParams params;
  params.tx = rng.uniform(-ranges.translate_px, ranges.translate_px);
  params.ty = rng.uniform(-ranges.translate_px, ranges.translate_px);
  params.rotate_deg = rng.uniform(-ranges.rotate_deg, ranges.rotate_deg);
  params.scale = rng.uniform(ranges.scale_lo, ranges.scale_hi);
  DiSample<T> out;
  if (u < p) {
    out.params = params;
    out.warp.emplace(height, width, params, Border::zero);
  }
  return out;
}

/// Called after every iteration with the current adversarial batch.
template <typename T>
using IterationObserver = std::function<void(std::size_t iteration, const Tensor<T>& adversarial)>;

namespace detail {

template <typename T>
void require_box(const Tensor<T>& adv, const Tensor<T>& src, double epsilon) {
  const T eps = static_cast<T>(epsilon);
  for (std::size_t i = 0; i < adv.size(); ++i) {
    if (!(adv[i] >= T{0} && adv[i] <= T(255) && adv[i] - src[i] <= eps && src[i] - adv[i] <= eps))
      fail(Errc::constraint_violation, "adversarial pixel " + std::to_string(i) + " left the epsilon box");
  }
}

template <typename T>
void require_pair_batch(const Tensor<T>& sources, const Tensor<T>& targets) {
  require(sources.rank() == 4, Errc::shape_mismatch, "attack inputs must be N x C x H x W");
  require_same_shape(sources, targets, "source/target batch");
}

template <typename T>
std::vector<T> row_norms(const Tensor<T>& g, GradNorm norm) {
  const std::size_t rows = g.dim(0), per = g.sample_size();
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc{0};
    if (norm == GradNorm::l1)
      for (std::size_t i = 0; i < per; ++i) acc += std::abs(g[r * per + i]);
    else {
      for (std::size_t i = 0; i < per; ++i) acc += g[r * per + i] * g[r * per + i];
      acc = std::sqrt(acc);
    }
    out[r] = acc;
  }
  return out;
}

}  // namespace detail

/// Feature-level iterative attack engine over a batch of pairs.
///
/// Per iteration: optional per-surrogate dropout masks (shared by source and target
/// forward passes and by the backward pass), optional diverse-input warp of the
/// current adversarial image, weighted ensemble gradient, normalization, momentum,
/// signed step and projection back into the epsilon box. Pair r of the batch uses
/// the random streams of global pair index first_pair_index + r, so results do not
/// depend on how pairs are batched.
template <typename T>
std::vector<AttackResult<T>> run_attack_batch(std::span<const ModelGraph<T>* const> models, const Tensor<T>& sources,
                                              const Tensor<T>& targets, const AttackConfig& config,
                                              std::size_t first_pair_index = 0,
                                              const IterationObserver<T>* observer = nullptr) {
  config.validate(models.size());
  require(config.level == AttackLevel::feature, Errc::invalid_argument, "run_attack is feature level only");
  detail::require_pair_batch(sources, targets);
  for (const auto* m : models) require_geometry(*m, sources);

  const std::size_t rows = sources.dim(0), per = sources.sample_size();
  const std::size_t channels = sources.dim(1), height = sources.dim(2), width = sources.dim(3);
  const std::size_t k_models = models.size();
  const std::vector<double> weights = config.resolved_weights(k_models);
  const bool dfanet = config.drop_rate > 0.0;
  const bool diverse = config.di_prob > 0.0;
  const T eps = static_cast<T>(config.epsilon);
  const T step = static_cast<T>(config.step_size);

  std::vector<Instrumentation> inst(k_models);
  for (std::size_t k = 0; k < k_models; ++k) {
    inst[k] = config.instrumented.empty() ? default_instrumentation(*models[k])
                                          : Instrumentation{config.instrumented, config.rescale};
    inst[k].rescale = config.rescale;
    validate_instrumentation(*models[k], inst[k]);
  }

  std::vector<AttackResult<T>> results(rows);
  std::vector<Rng> di_rng, step_rng;
  for (std::size_t r = 0; r < rows; ++r) {
    results[r].seed = derive_seed(config.seed, {first_pair_index + r});
    results[r].config = config;
    di_rng.emplace_back(derive_seed(results[r].seed, {1}));
    step_rng.emplace_back(derive_seed(results[r].seed, {3}));
  }

  std::vector<Tensor<T>> clean_target(k_models);
  for (std::size_t k = 0; k < k_models; ++k) clean_target[k] = embed(*models[k], targets);

  // The forward pass at the current point is reused by the next iteration when no
  // randomness enters the surrogate (plain FIM / M-FIM, single model).
  const bool reuse_trace_pass = !dfanet && !diverse;
  std::optional<NetworkPass<T>> pending = forward_pass<T>(*models[0], sources, Mode::infer, nullptr, reuse_trace_pass);
  {
    const auto d0 = row_distances(pending->embedding, clean_target[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      results[r].initial_distance = d0[r];
      results[r].final_distance = d0[r];
      if (d0[r] == 0.0 && config.mode == AttackMode::impersonate)
        results[r].error = "degenerate pair: source and target embeddings coincide";
    }
  }
  if (!reuse_trace_pass) pending.reset();

  Tensor<T> adv = sources;
  Tensor<T> accum(sources.shape());
  for (std::size_t iter = 0; iter < config.max_iters; ++iter) {
    std::vector<DiSample<T>> di(rows);
    Tensor<T> x_in = adv;
    if (diverse) {
      for (std::size_t r = 0; r < rows; ++r) {
        di[r] = di_transform<T>(height, width, config.di_prob, config.di, di_rng[r]);
        if (di[r].warp) di[r].warp->apply(adv.data() + r * per, x_in.data() + r * per, channels);
      }
    }

    Tensor<T> grad(sources.shape());
    std::vector<bool> random_step(rows, false);
    for (std::size_t k = 0; k < k_models; ++k) {
      const ModelGraph<T>& model = *models[k];
      std::optional<MaskPlan<T>> plan;
      Tensor<T> target_emb;
      if (dfanet) {
        std::vector<MaskPlan<T>> plans;
        plans.reserve(rows);
        for (std::size_t r = 0; r < rows; ++r)
          plans.push_back(sample_masks(model, inst[k], config.drop_rate, iter, derive_seed(results[r].seed, {2, k})));
        plan = stack_plans<T>(plans);
        target_emb = masked_embed(model, targets, *plan);
      } else {
        target_emb = clean_target[k];
      }
      const MaskPlan<T>* plan_ptr = plan ? &*plan : nullptr;
      NetworkPass<T> pass = (k == 0 && pending) ? std::move(*pending)
                                                : forward_pass<T>(model, x_in, Mode::infer, plan_ptr, true);
      pending.reset();

      const std::size_t d = model.embedding_dim;
      Tensor<T> adjoint(pass.embedding.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        T ss{0};
        for (std::size_t i = 0; i < d; ++i) {
          const T diff = pass.embedding[r * d + i] - target_emb[r * d + i];
          ss += diff * diff;
        }
        const T dist = std::sqrt(ss);
        if (dist == T{0}) {
          if (config.mode == AttackMode::dodge)
            random_step[r] = true;
          else if (results[r].ok())
            results[r].error = "degenerate pair: source and target embeddings coincide";
          continue;
        }
        const T sgn = config.mode == AttackMode::impersonate ? T(-1) : T(1);
        for (std::size_t i = 0; i < d; ++i)
          adjoint[r * d + i] = sgn * (pass.embedding[r * d + i] - target_emb[r * d + i]) / dist;
      }
      const Tensor<T> g = backward_pass<T>(model, pass, &adjoint, nullptr, plan_ptr);
      const T w = static_cast<T>(weights[k]);
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += w * g[i];
    }

    if (diverse) {
      for (std::size_t r = 0; r < rows; ++r)
        if (di[r].warp) {
          std::vector<T> tmp(grad.data() + r * per, grad.data() + (r + 1) * per);
          di[r].warp->adjoint(tmp.data(), grad.data() + r * per, channels);
        }
    }

    const std::vector<T> norms = detail::row_norms(grad, config.norm);
    const T mu = static_cast<T>(config.momentum);
    for (std::size_t r = 0; r < rows; ++r) {
      const T n = norms[r];
      for (std::size_t i = r * per; i < (r + 1) * per; ++i) {
        const T gn = n > T{0} ? grad[i] / n : T{0};
        accum[i] = mu * accum[i] + gn;
      }
    }

    for (std::size_t r = 0; r < rows; ++r) {
      const bool frozen = !results[r].ok();
      for (std::size_t i = r * per; i < (r + 1) * per; ++i) {
        T dir;
        if (frozen)
          dir = T{0};
        else if (random_step[r])
          dir = (step_rng[r].next() >> 63) ? T(1) : T(-1);
        else
          dir = static_cast<T>((T{0} < accum[i]) - (accum[i] < T{0}));
        const T candidate = adv[i] + step * dir;
        const T lower = std::max(T{0}, sources[i] - eps);
        const T upper = std::min(T(255), sources[i] + eps);
        adv[i] = std::min(upper, std::max(lower, candidate));
      }
    }
    detail::require_box(adv, sources, config.epsilon);

    for (std::size_t r = 0; r < rows; ++r) results[r].iterations = iter + 1;
    if (config.record_trace || reuse_trace_pass || iter + 1 == config.max_iters) {
      NetworkPass<T> now = forward_pass<T>(*models[0], adv, Mode::infer, nullptr, reuse_trace_pass);
      const auto dist = row_distances(now.embedding, clean_target[0]);
      for (std::size_t r = 0; r < rows; ++r) {
        if (config.record_trace) results[r].trace.push_back(dist[r]);
        results[r].final_distance = dist[r];
      }
      if (reuse_trace_pass) pending = std::move(now);
    }
    if (observer != nullptr && *observer) (*observer)(iter, adv);
  }

  for (std::size_t r = 0; r < rows; ++r) results[r].adversarial = slice_batch(adv, r, 1);
  return results;
}

/// Single-pair form of run_attack_batch. Throws on a degenerate pair.
template <typename T>
AttackResult<T> run_attack(std::span<const ModelGraph<T>* const> models, const Tensor<T>& source,
                           const Tensor<T>& target, const AttackConfig& config, std::size_t pair_index = 0) {
  auto results = run_attack_batch<T>(models, source, target, config, pair_index);
  if (!results.front().ok()) fail(Errc::degenerate_pair, results.front().error);
  return std::move(results.front());
}

/// Plain feature iterative attack: x <- clip(x + step * sign(grad J)). No momentum,
/// no normalization, no transforms, one surrogate. FFM is iters = 1, step = epsilon.
template <typename T>
Tensor<T> fim(const ModelGraph<T>& model, const Tensor<T>& sources, const Tensor<T>& targets, double epsilon,
              std::size_t iters, double step_size = 1.0, AttackMode mode = AttackMode::impersonate) {
  detail::require_pair_batch(sources, targets);
  const Tensor<T> target_emb = embed(model, targets);
  Tensor<T> adv = sources;
  const std::size_t rows = sources.dim(0), d = model.embedding_dim;
  for (std::size_t it = 0; it < iters; ++it) {
    NetworkPass<T> pass = forward_pass<T>(model, adv, Mode::infer, nullptr, true);
    Tensor<T> adjoint(pass.embedding.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const Tensor<T> fs = slice_batch(pass.embedding, r, 1);
      const Tensor<T> ft = slice_batch(target_emb, r, 1);
      const FeatureObjective<T> obj = feature_objective(fs, ft, mode);
      std::copy_n(obj.grad.data(), d, adjoint.data() + r * d);
    }
    const Tensor<T> g = backward_pass<T>(model, pass, &adjoint);
    Tensor<T> moved(adv.shape());
    const Tensor<T> s = sign(g);
    for (std::size_t i = 0; i < adv.size(); ++i) moved[i] = adv[i] + static_cast<T>(step_size) * s[i];
    adv = clip_linf(moved, sources, epsilon);
  }
  return adv;
}

template <typename T>
Tensor<T> ffm(const ModelGraph<T>& model, const Tensor<T>& sources, const Tensor<T>& targets, double epsilon,
              AttackMode mode = AttackMode::impersonate) {
  return fim(model, sources, targets, epsilon, 1, epsilon, mode);
}

/// Plain (margin-free) logits of the retained classifier head.
template <typename T>
Tensor<T> classify_logits(const ModelGraph<T>& model, const Tensor<T>& images) {
  require(model.head.has_value(), Errc::invalid_argument, "model has no classifier head");
  const NetworkPass<T> pass = forward_pass<T>(model, images, Mode::infer);
  return head_logits(*model.head, pass.features, pass.embedding);
}

/// Argmax identity per image; ties go to the lowest index.
template <typename T>
std::vector<std::size_t> predict_labels(const ModelGraph<T>& model, const Tensor<T>& images) {
  const Tensor<T> logits = classify_logits(model, images);
  const std::size_t rows = logits.dim(0), c = logits.dim(1);
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = logits.data() + r * c;
    out[r] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
  }
  return out;
}

template <typename T>
std::size_t predict_label(const ModelGraph<T>& model, const Tensor<T>& image) {
  return predict_labels(model, image).front();
}

namespace detail {

/// Gradient of CE(logits(x), labels) w.r.t. the images, summed over rows.
template <typename T>
Tensor<T> label_loss_grad(const ModelGraph<T>& model, const Tensor<T>& images, const std::vector<std::size_t>& labels) {
  require(model.head.has_value(), Errc::invalid_argument, "label-level attacks need the classifier head");
  NetworkPass<T> pass = forward_pass<T>(model, images, Mode::infer, nullptr, true);
  const ClassifierHead<T>& head = *model.head;
  const Tensor<T> logits = head_logits(head, pass.features, pass.embedding);
  const std::size_t rows = images.dim(0), c = head.classes;
  Tensor<T> dlogits({rows, c});
  for (std::size_t r = 0; r < rows; ++r) {
    Tensor<T> row({c}, std::vector<T>(logits.data() + r * c, logits.data() + (r + 1) * c));
    const CrossEntropy<T> ce = softmax_ce(row, labels[r]);
    std::copy_n(ce.grad_logits.data(), c, dlogits.data() + r * c);
  }
  const HeadGrads<T> hg = head_backward(head, pass.features, pass.embedding, dlogits, false);
  if (head.mode == HeadMode::softmax) return backward_pass<T>(model, pass, nullptr, &hg.grad_input);
  return backward_pass<T>(model, pass, &hg.grad_input, nullptr);
}

template <typename T>
void fill_label_results(const ModelGraph<T>& model, const Tensor<T>& sources, const Tensor<T>& targets,
                        const Tensor<T>& adv, const AttackConfig& config, std::size_t iterations,
                        const std::vector<std::size_t>& src_labels, const std::vector<std::size_t>& tgt_labels,
                        std::vector<AttackResult<T>>& results) {
  const Tensor<T> t_emb = embed(model, targets);
  const auto d0 = row_distances(embed(model, sources), t_emb);
  const auto d1 = row_distances(embed(model, adv), t_emb);
  for (std::size_t r = 0; r < results.size(); ++r) {
    results[r].adversarial = slice_batch(adv, r, 1);
    results[r].iterations = iterations;
    results[r].initial_distance = d0[r];
    results[r].final_distance = d1[r];
    results[r].config = config;
    results[r].already_at_target = src_labels[r] == tgt_labels[r];
  }
}

}  // namespace detail

/// Fast target gradient sign method: x_s - eps * sign(grad CE(x_s, l(x_t))), clipped.
template <typename T>
std::vector<AttackResult<T>> ftgsm(const ModelGraph<T>& model, const Tensor<T>& sources, const Tensor<T>& targets,
                                   double epsilon) {
  detail::require_pair_batch(sources, targets);
  require(epsilon >= 0, Errc::invalid_argument, "epsilon: must be >= 0");
  const auto tgt_labels = predict_labels(model, targets);
  const auto src_labels = predict_labels(model, sources);
  const Tensor<T> g = detail::label_loss_grad(model, sources, tgt_labels);
  const Tensor<T> s = sign(g);
  Tensor<T> moved(sources.shape());
  for (std::size_t i = 0; i < sources.size(); ++i) moved[i] = sources[i] - static_cast<T>(epsilon) * s[i];
  const Tensor<T> adv = clip_linf(moved, sources, epsilon);
  detail::require_box(adv, sources, epsilon);
  AttackConfig config;
  config.level = AttackLevel::label;
  config.epsilon = epsilon;
  config.step_size = epsilon;
  config.max_iters = 1;
  std::vector<AttackResult<T>> results(sources.dim(0));
  detail::fill_label_results(model, sources, targets, adv, config, 1, src_labels, tgt_labels, results);
  return results;
}

/// Iterative target gradient sign method with a per-step clip. iters = 0 picks
/// ceil(min(eps + 4, 1.25 eps)).
template <typename T>
std::vector<AttackResult<T>> itgsm(const ModelGraph<T>& model, const Tensor<T>& sources, const Tensor<T>& targets,
                                   double epsilon, std::size_t iters = 0, double step_size = 1.0) {
  detail::require_pair_batch(sources, targets);
  require(epsilon >= 0 && step_size >= 0, Errc::invalid_argument, "epsilon/step_size: must be >= 0");
  if (iters == 0) iters = default_iterations(epsilon);
  const auto tgt_labels = predict_labels(model, targets);
  const auto src_labels = predict_labels(model, sources);
  const Tensor<T> t_emb = embed(model, targets);
  Tensor<T> adv = sources;
  std::vector<std::vector<double>> traces(sources.dim(0));
  for (std::size_t it = 0; it < iters; ++it) {
    const Tensor<T> s = sign(detail::label_loss_grad(model, adv, tgt_labels));
    Tensor<T> moved(adv.shape());
    for (std::size_t i = 0; i < adv.size(); ++i) moved[i] = adv[i] - static_cast<T>(step_size) * s[i];
    adv = clip_linf(moved, sources, epsilon);
    detail::require_box(adv, sources, epsilon);
    const auto d = row_distances(embed(model, adv), t_emb);
    for (std::size_t r = 0; r < d.size(); ++r) traces[r].push_back(d[r]);
  }
  AttackConfig config;
  config.level = AttackLevel::label;
  config.epsilon = epsilon;
  config.step_size = step_size;
  config.max_iters = iters;
  std::vector<AttackResult<T>> results(sources.dim(0));
  detail::fill_label_results(model, sources, targets, adv, config, iters, src_labels, tgt_labels, results);
  for (std::size_t r = 0; r < results.size(); ++r) results[r].trace = std::move(traces[r]);
  return results;
}

/// Round to the 8-bit grid, then re-impose the epsilon band in integer space.
template <typename T>
Tensor<T> quantize_adversarial(const Tensor<T>& adv, const Tensor<T>& source, double epsilon) {
  require_same_shape(adv, source, "quantize_adversarial");
  Tensor<T> out(adv.shape());
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const double lo = std::max(0.0, std::ceil(static_cast<double>(source[i]) - epsilon - 1e-9));
    const double hi = std::min(255.0, std::floor(static_cast<double>(source[i]) + epsilon + 1e-9));
    out[i] = static_cast<T>(std::clamp(std::round(static_cast<double>(adv[i])), lo, hi));
  }
  return out;
}

}  // namespace fsal
