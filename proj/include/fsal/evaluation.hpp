#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsal/attacks.hpp"
#include "fsal/data.hpp"
#include "fsal/parallel.hpp"
#include "fsal/version.hpp"

namespace fsal {

/// Row indices of both sides of every pair, resolved against a dataset.
struct PairRows {
  std::vector<std::size_t> a;
  std::vector<std::size_t> b;
  std::vector<bool> same;
};

inline PairRows resolve_pairs(const Dataset& ds, const PairList& pairs) {
  std::map<std::string, std::size_t> lookup;
  for (std::size_t i = 0; i < ds.size(); ++i) lookup.emplace(ds.ref(i), i);
  PairRows rows;
  for (const auto& e : pairs.entries) {
    require(e.a != e.b, Errc::invalid_argument, "pair list entry pairs " + e.a + " with itself");
    const auto ia = lookup.find(e.a), ib = lookup.find(e.b);
    require(ia != lookup.end(), Errc::invalid_argument, "unresolved image reference " + e.a);
    require(ib != lookup.end(), Errc::invalid_argument, "unresolved image reference " + e.b);
    rows.a.push_back(ia->second);
    rows.b.push_back(ib->second);
    rows.same.push_back(e.same);
  }
  return rows;
}

/// Embeddings in fixed-size chunks; results do not depend on the chunk size.
template <typename T>
Tensor<T> embed_all(const ModelGraph<T>& model, const Tensor<T>& images, std::size_t chunk = 256) {
  const std::size_t n = images.dim(0);
  std::vector<Tensor<T>> parts;
  for (std::size_t i = 0; i < n; i += chunk) parts.push_back(embed(model, slice_batch(images, i, std::min(chunk, n - i))));
  if (parts.empty()) return Tensor<T>({0, model.embedding_dim});
  return concat_batch<T>(parts);
}

/// Distance of every pair under `model`. Each distinct image is embedded once.
template <typename T>
std::vector<double> pair_distances(const ModelGraph<T>& model, const Tensor<T>& images, const PairRows& rows) {
  require(rows.a.size() == rows.b.size(), Errc::invalid_argument, "pair rows disagree");
  std::set<std::size_t> used(rows.a.begin(), rows.a.end());
  used.insert(rows.b.begin(), rows.b.end());
  const std::vector<std::size_t> order(used.begin(), used.end());
  std::map<std::size_t, std::size_t> slot;
  for (std::size_t i = 0; i < order.size(); ++i) slot[order[i]] = i;
  const std::size_t per = images.sample_size();
  Shape shape = images.shape();
  shape[0] = order.size();
  Tensor<T> gathered(shape);
  for (std::size_t i = 0; i < order.size(); ++i) {
    require(order[i] < images.dim(0), Errc::invalid_argument, "pair row out of range");
    std::copy_n(images.data() + order[i] * per, per, gathered.data() + i * per);
  }
  const Tensor<T> emb = embed_all(model, gathered);
  const std::size_t d = model.embedding_dim;
  std::vector<double> out(rows.a.size());
  for (std::size_t p = 0; p < out.size(); ++p) {
    const T* x = emb.data() + slot[rows.a[p]] * d;
    const T* y = emb.data() + slot[rows.b[p]] * d;
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const double diff = static_cast<double>(x[i]) - static_cast<double>(y[i]);
      s += diff * diff;
    }
    out[p] = std::sqrt(s);
  }
  return out;
}

struct ThresholdReport {
  std::string model_id;
  double threshold{};
  double far_target{};
  double achieved_far{};
  double achieved_tar{};
  std::size_t negatives{};
  std::size_t positives{};
};

inline nlohmann::json to_json(const ThresholdReport& r) {
  return {{"model", r.model_id},          {"threshold", r.threshold}, {"far_target", r.far_target},
          {"achieved_far", r.achieved_far}, {"achieved_tar", r.achieved_tar}, {"negatives", r.negatives},
          {"positives", r.positives}};
}

inline ThresholdReport threshold_report_from_json(const nlohmann::json& j) {
  ThresholdReport r;
  r.model_id = j.at("model").get<std::string>();
  r.threshold = j.at("threshold").get<double>();
  r.far_target = j.at("far_target").get<double>();
  r.achieved_far = j.at("achieved_far").get<double>();
  r.achieved_tar = j.at("achieved_tar").get<double>();
  r.negatives = j.at("negatives").get<std::size_t>();
  r.positives = j.at("positives").get<std::size_t>();
  return r;
}

/// t_m is the largest observed negative distance t with #{d <= t} <= floor(far * N_neg),
/// falling back to the smallest negative distance. Distances strictly below t_m are
/// accepted, so the achieved FAR never exceeds the target.
inline ThresholdReport calibrate_threshold_from_distances(const std::vector<double>& distances,
                                                          const std::vector<bool>& same, double far_target,
                                                          std::string model_id = {}) {
  require(distances.size() == same.size(), Errc::invalid_argument, "distances and labels disagree");
  require(far_target >= 0 && far_target <= 1, Errc::invalid_argument, "far_target: must lie in [0, 1]");
  std::vector<double> neg, pos;
  for (std::size_t i = 0; i < distances.size(); ++i) (same[i] ? pos : neg).push_back(distances[i]);
  require(!neg.empty(), Errc::insufficient_data, "calibration needs negative pairs");
  if (far_target > 0)
    require(static_cast<double>(neg.size()) * far_target >= 1.0 - 1e-9, Errc::insufficient_data,
            "calibration at FAR " + std::to_string(far_target) + " needs at least " +
                std::to_string(static_cast<std::size_t>(std::ceil(1.0 / far_target - 1e-9))) + " negatives, got " +
                std::to_string(neg.size()));
  std::sort(neg.begin(), neg.end());
  const auto allowed = static_cast<std::size_t>(std::floor(far_target * static_cast<double>(neg.size()) + 1e-9));
  double t = neg.front();
  for (std::size_t i = 0; i < neg.size(); ++i) {
    const std::size_t at_or_below = static_cast<std::size_t>(std::upper_bound(neg.begin(), neg.end(), neg[i]) - neg.begin());
    if (at_or_below <= allowed) t = neg[i];
  }
  ThresholdReport r;
  r.model_id = std::move(model_id);
  r.threshold = std::clamp(t, 0.0, 2.0);
  r.far_target = far_target;
  r.negatives = neg.size();
  r.positives = pos.size();
  const auto below = [&](const std::vector<double>& v) {
    return static_cast<double>(std::count_if(v.begin(), v.end(), [&](double d) { return d < r.threshold; }));
  };
  r.achieved_far = below(neg) / static_cast<double>(neg.size());
  r.achieved_tar = pos.empty() ? 0.0 : below(pos) / static_cast<double>(pos.size());
  return r;
}

template <typename T>
ThresholdReport calibrate_threshold(const ModelGraph<T>& model, const Tensor<T>& images, const PairRows& rows,
                                    double far_target, std::string model_id = {}) {
  return calibrate_threshold_from_distances(pair_distances(model, images, rows), rows.same, far_target,
                                            std::move(model_id));
}

/// 100 * fraction of distances strictly below the threshold.
inline double hit_rate_from_distances(const std::vector<double>& distances, double threshold) {
  require(!distances.empty(), Errc::invalid_argument, "hit rate over zero pairs");
  const auto hits = std::count_if(distances.begin(), distances.end(), [&](double d) { return d < threshold; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(distances.size());
}

template <typename T>
double hit_rate(const ModelGraph<T>& target, const Tensor<T>& adversarial, const Tensor<T>& target_images,
                double threshold) {
  require_same_shape(adversarial, target_images, "hit_rate pair images");
  return hit_rate_from_distances(row_distances(embed_all(target, adversarial), embed_all(target, target_images)),
                                 threshold);
}

struct RocPoint {
  double threshold{};
  double far{};
  double tar{};
};

/// Accept when distance <= threshold, one point per distinct distance, preceded by a
/// point that accepts nothing.
inline std::vector<RocPoint> roc_curve_from_distances(const std::vector<double>& distances,
                                                      const std::vector<bool>& same) {
  require(distances.size() == same.size(), Errc::invalid_argument, "distances and labels disagree");
  std::vector<std::size_t> order(distances.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return distances[x] < distances[y]; });
  const auto n_pos = static_cast<std::size_t>(std::count(same.begin(), same.end(), true));
  const std::size_t n_neg = same.size() - n_pos;
  require(n_pos > 0 && n_neg > 0, Errc::invalid_argument, "ROC needs both positive and negative pairs");
  std::vector<RocPoint> curve;
  curve.push_back({std::nextafter(distances[order.front()], -1.0), 0.0, 0.0});
  std::size_t fp = 0, tp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (same[order[i]] ? tp : fp) += 1;
    if (i + 1 < order.size() && distances[order[i + 1]] == distances[order[i]]) continue;
    curve.push_back({distances[order[i]], static_cast<double>(fp) / static_cast<double>(n_neg),
                     static_cast<double>(tp) / static_cast<double>(n_pos)});
  }
  return curve;
}

template <typename T>
std::vector<RocPoint> roc_curve(const ModelGraph<T>& model, const Tensor<T>& images, const PairRows& rows) {
  return roc_curve_from_distances(pair_distances(model, images, rows), rows.same);
}

inline double roc_auc(const std::vector<RocPoint>& curve) {
  double area = 0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].far - curve[i - 1].far) * (curve[i].tar + curve[i - 1].tar) / 2.0;
  return area;
}

template <typename T>
struct Surrogate {
  std::string name;
  std::vector<const ModelGraph<T>*> members;  // more than one: ensemble
};

template <typename T>
struct Target {
  std::string name;
  const ModelGraph<T>* model{};
  double threshold{};
};

/// Attacks every (source, target) row pair on the surrogate, in chunks of `chunk`
/// pairs fanned out over `threads` workers. Output order is the pair order.
template <typename T>
std::vector<AttackResult<T>> attack_pairs(const Surrogate<T>& surrogate, const Tensor<T>& sources,
                                          const Tensor<T>& targets, const AttackConfig& config,
                                          std::size_t threads = 1, std::size_t chunk = 25) {
  detail::require_pair_batch(sources, targets);
  const std::size_t n = sources.dim(0);
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<std::vector<AttackResult<T>>> parts(chunks);
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * chunk, len = std::min(chunk, n - begin);
    const Tensor<T> src = slice_batch(sources, begin, len), tgt = slice_batch(targets, begin, len);
    if (config.level == AttackLevel::label) {
      require(surrogate.members.size() == 1, Errc::invalid_argument, "label-level attacks take one surrogate");
      parts[c] = itgsm(*surrogate.members.front(), src, tgt, config.epsilon, config.max_iters, config.step_size);
      for (auto& r : parts[c]) r.config = config;
    } else {
      parts[c] = run_attack_batch<T>(surrogate.members, src, tgt, config, begin);
    }
  });
  std::vector<AttackResult<T>> out;
  out.reserve(n);
  for (auto& p : parts)
    for (auto& r : p) out.push_back(std::move(r));
  return out;
}

struct HitReport {
  std::string surrogate;
  std::vector<std::string> targets;
  std::vector<double> rates;  // percent, one per target
  std::size_t pairs{};        // N_p, pairs that entered the rate
  std::size_t excluded{};
  nlohmann::json config;
};

inline nlohmann::json to_json(const HitReport& h) {
  return {{"surrogate", h.surrogate}, {"targets", h.targets}, {"rates", h.rates},
          {"pairs", h.pairs},         {"excluded", h.excluded}, {"config", h.config}};
}

/// Hit rate of each target over the non-excluded attack results.
template <typename T>
HitReport evaluate_hits(const std::string& surrogate_name, const std::vector<AttackResult<T>>& results,
                        const Tensor<T>& target_images, std::span<const Target<T>> targets,
                        const AttackConfig& config) {
  HitReport report;
  report.surrogate = surrogate_name;
  report.config = to_json(config);
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < results.size(); ++i) (results[i].ok() ? kept.push_back(i) : void(++report.excluded));
  report.pairs = kept.size();
  if (kept.empty()) {
    for (const auto& t : targets) {
      report.targets.push_back(t.name);
      report.rates.push_back(0.0);
    }
    return report;
  }
  std::vector<Tensor<T>> adv;
  for (std::size_t i : kept) adv.push_back(results[i].adversarial);
  const Tensor<T> adv_batch = concat_batch<T>(adv);
  Shape shape = target_images.shape();
  shape[0] = kept.size();
  Tensor<T> tgt(shape);
  const std::size_t per = target_images.sample_size();
  for (std::size_t k = 0; k < kept.size(); ++k)
    std::copy_n(target_images.data() + kept[k] * per, per, tgt.data() + k * per);
  for (const auto& t : targets) {
    report.targets.push_back(t.name);
    report.rates.push_back(hit_rate(*t.model, adv_batch, tgt, t.threshold));
  }
  return report;
}

struct TransferMatrix {
  std::vector<std::string> surrogates;
  std::vector<std::string> targets;
  std::vector<std::vector<double>> rates;  // [surrogate][target], percent
  std::vector<HitReport> reports;
  nlohmann::json config;

  /// Mean over cells whose surrogate and target names differ.
  double mean_off_diagonal() const {
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t s = 0; s < surrogates.size(); ++s)
      for (std::size_t t = 0; t < targets.size(); ++t)
        if (surrogates[s] != targets[t]) {
          sum += rates[s][t];
          ++n;
        }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  }
};

inline nlohmann::json to_json(const TransferMatrix& m, std::uint64_t seed) {
  nlohmann::json reports = nlohmann::json::array();
  for (const auto& r : m.reports) reports.push_back(to_json(r));
  return {{"surrogates", m.surrogates}, {"targets", m.targets},  {"rates", m.rates},
          {"mean_off_diagonal", m.mean_off_diagonal()},         {"reports", reports},
          {"config", m.config},         {"seed", seed},          {"version", kVersion}};
}

/// One attack run per surrogate; each adversarial set is scored on every target.
template <typename T>
TransferMatrix transfer_matrix(std::span<const Surrogate<T>> surrogates, std::span<const Target<T>> targets,
                               const Tensor<T>& sources, const Tensor<T>& target_images, const AttackConfig& config,
                               std::size_t threads = 1) {
  TransferMatrix m;
  m.config = to_json(config);
  for (const auto& t : targets) m.targets.push_back(t.name);
  if (targets.empty()) return m;
  for (const auto& s : surrogates) {
    const auto results = attack_pairs(s, sources, target_images, config, threads);
    HitReport report = evaluate_hits(s.name, results, target_images, targets, config);
    m.surrogates.push_back(s.name);
    m.rates.push_back(report.rates);
    m.reports.push_back(std::move(report));
  }
  return m;
}

struct SweepCurve {
  std::string parameter;
  std::vector<double> xs;
  std::vector<std::string> targets;
  std::vector<std::vector<double>> rates;  // [point][target]
  std::vector<double> means;               // equal-weight mean over off-diagonal cells

  std::size_t argmax() const {
    return static_cast<std::size_t>(std::max_element(means.begin(), means.end()) - means.begin());
  }
};

inline nlohmann::json to_json(const SweepCurve& c, std::uint64_t seed) {
  return {{"parameter", c.parameter}, {"x", c.xs},     {"targets", c.targets}, {"rates", c.rates},
          {"mean", c.means},          {"seed", seed}, {"version", kVersion}};
}

/// CSV: x, mean, one column per target; a comment line carries seed and version.
inline void write_curve_csv(const SweepCurve& c, std::uint64_t seed, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  require(static_cast<bool>(os), Errc::io, "cannot write " + path.string());
  os << "# seed=" << seed << " version=" << kVersion << '\n' << c.parameter << ",mean";
  for (const auto& t : c.targets) os << ',' << t;
  os << '\n';
  char buf[64];
  for (std::size_t i = 0; i < c.xs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", c.xs[i]);
    os << buf;
    std::snprintf(buf, sizeof buf, ",%.6f", c.means[i]);
    os << buf;
    for (double r : c.rates[i]) {
      std::snprintf(buf, sizeof buf, ",%.6f", r);
      os << buf;
    }
    os << '\n';
  }
}

namespace detail {

template <typename T>
void append_point(SweepCurve& curve, double x, const TransferMatrix& m) {
  curve.xs.push_back(x);
  curve.targets = m.targets;
  curve.rates.push_back(m.rates.empty() ? std::vector<double>{} : m.rates.front());
  curve.means.push_back(m.mean_off_diagonal());
}

}  // namespace detail

/// Mean off-diagonal hit rate as a function of the drop rate, shared seeds.
template <typename T>
SweepCurve drop_rate_sweep(const Surrogate<T>& surrogate, std::span<const Target<T>> targets,
                           const Tensor<T>& sources, const Tensor<T>& target_images, const AttackConfig& config,
                           const std::vector<double>& grid, std::size_t threads = 1) {
  require(std::find(grid.begin(), grid.end(), 0.0) != grid.end(), Errc::invalid_argument,
          "drop-rate grid must include 0");
  SweepCurve curve;
  curve.parameter = "drop_rate";
  for (double p : grid) {
    AttackConfig c = config;
    c.drop_rate = p;
    const TransferMatrix m =
        transfer_matrix<T>(std::span(&surrogate, 1), targets, sources, target_images, c, threads);
    detail::append_point<T>(curve, p, m);
  }
  return curve;
}

/// Hit rates after each iteration count in `grid`. The run goes to the largest count
/// once; adversarials are snapshotted on the way, which equals separate shorter runs
/// because no random stream depends on the iteration budget.
template <typename T>
SweepCurve iteration_sweep(const Surrogate<T>& surrogate, std::span<const Target<T>> targets,
                           const Tensor<T>& sources, const Tensor<T>& target_images, const AttackConfig& config,
                           std::vector<std::size_t> grid, std::size_t threads = 1, std::size_t chunk = 25) {
  require(!grid.empty(), Errc::invalid_argument, "iteration grid is empty");
  require(config.level == AttackLevel::feature, Errc::invalid_argument, "iteration sweep is feature level only");
  std::sort(grid.begin(), grid.end());
  require(grid.front() >= 1, Errc::invalid_argument, "iteration counts must be positive");
  AttackConfig full = config;
  full.max_iters = grid.back();
  const std::size_t n = sources.dim(0);
  const std::size_t chunks = (n + chunk - 1) / chunk;
  // snaps[g][c]: results of chunk c after grid[g] iterations
  std::vector<std::vector<std::vector<AttackResult<T>>>> snaps(grid.size(),
                                                               std::vector<std::vector<AttackResult<T>>>(chunks));
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * chunk, len = std::min(chunk, n - begin);
    const Tensor<T> src = slice_batch(sources, begin, len), tgt = slice_batch(target_images, begin, len);
    std::vector<Tensor<T>> taken(grid.size());
    const IterationObserver<T> observer = [&](std::size_t iter, const Tensor<T>& adv) {
      for (std::size_t g = 0; g < grid.size(); ++g)
        if (grid[g] == iter + 1) taken[g] = adv;
    };
    auto results = run_attack_batch<T>(surrogate.members, src, tgt, full, begin, &observer);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      snaps[g][c] = results;
      for (std::size_t r = 0; r < len; ++r) {
        snaps[g][c][r].adversarial = slice_batch(taken[g], r, 1);
        snaps[g][c][r].iterations = grid[g];
        auto& snap = snaps[g][c][r];
        if (snap.trace.size() >= grid[g]) {
          snap.trace.resize(grid[g]);
          snap.final_distance = snap.trace.back();
        } else if (grid[g] != full.max_iters) {
          snap.final_distance = std::numeric_limits<double>::quiet_NaN();
        }
      }
    }
  });
  SweepCurve curve;
  curve.parameter = "max_iters";
  for (std::size_t g = 0; g < grid.size(); ++g) {
    std::vector<AttackResult<T>> flat;
    for (auto& part : snaps[g])
      for (auto& r : part) flat.push_back(std::move(r));
    AttackConfig c = config;
    c.max_iters = grid[g];
    TransferMatrix m;
    m.config = to_json(c);
    for (const auto& t : targets) m.targets.push_back(t.name);
    HitReport report = evaluate_hits(surrogate.name, flat, target_images, targets, c);
    m.surrogates.push_back(surrogate.name);
    m.rates.push_back(report.rates);
    detail::append_point<T>(curve, static_cast<double>(grid[g]), m);
  }
  return curve;
}

struct CoverSelection {
  std::vector<std::string> selected;
  std::size_t covered{};
  std::vector<std::size_t> gains;  // newly covered pairs per selection step
};

inline nlohmann::json to_json(const CoverSelection& c) {
  return {{"selected", c.selected}, {"covered", c.covered}, {"gains", c.gains}};
}

/// Repeatedly selects the image incident to the most uncovered pairs (ties: smallest
/// reference) until every pair touches a selected image.
inline CoverSelection greedy_cover(const PairList& pairs) {
  require(!pairs.entries.empty(), Errc::invalid_argument, "greedy_cover needs a non-empty pair list");
  std::map<std::string, std::vector<std::size_t>> incident;
  for (std::size_t i = 0; i < pairs.entries.size(); ++i) {
    incident[pairs.entries[i].a].push_back(i);
    if (pairs.entries[i].b != pairs.entries[i].a) incident[pairs.entries[i].b].push_back(i);
  }
  std::vector<bool> covered(pairs.entries.size(), false);
  CoverSelection out;
  while (out.covered < pairs.entries.size()) {
    const std::string* best = nullptr;
    std::size_t best_gain = 0;
    for (const auto& [ref, edges] : incident) {
      const auto gain =
          static_cast<std::size_t>(std::count_if(edges.begin(), edges.end(), [&](std::size_t e) { return !covered[e]; }));
      if (gain > best_gain) {
        best_gain = gain;
        best = &ref;
      }
    }
    for (std::size_t e : incident[*best]) covered[e] = true;
    out.selected.push_back(*best);
    out.gains.push_back(best_gain);
    out.covered += best_gain;
  }
  return out;
}

}  // namespace fsal
