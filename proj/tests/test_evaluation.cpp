#include <gtest/gtest.h>

#include <bit>
#include <set>

#include "fsal/evaluation.hpp"
#include "support.hpp"

using namespace fsal;

namespace {

std::vector<double> tenths() {
  std::vector<double> d;
  for (int i = 0; i < 10; ++i) d.push_back(1.0 + 0.1 * i);
  return d;
}

PairList pair_list(const std::vector<std::pair<std::string, std::string>>& edges) {
  PairList p;
  for (const auto& [a, b] : edges) p.entries.push_back({a, b, false});
  return p;
}

/// Smallest vertex cover by enumerating every subset.
std::size_t exhaustive_cover(const PairList& p) {
  std::vector<std::string> nodes;
  for (const auto& e : p.entries) {
    nodes.push_back(e.a);
    nodes.push_back(e.b);
  }
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  std::size_t best = nodes.size();
  for (std::uint32_t mask = 0; mask < (1u << nodes.size()); ++mask) {
    const auto size = static_cast<std::size_t>(std::popcount(mask));
    if (size >= best) continue;
    auto in = [&](const std::string& s) {
      return (mask >> (std::lower_bound(nodes.begin(), nodes.end(), s) - nodes.begin())) & 1u;
    };
    bool ok = true;
    for (const auto& e : p.entries) ok = ok && (in(e.a) || in(e.b));
    if (ok) best = size;
  }
  return best;
}

}  // namespace

TEST(Threshold, OrderStatisticExample) {
  const auto d = tenths();
  const auto r = calibrate_threshold_from_distances(d, std::vector<bool>(10, false), 0.1, "m");
  EXPECT_DOUBLE_EQ(r.threshold, 1.0);
  EXPECT_LE(r.achieved_far, 0.1);
  EXPECT_EQ(r.negatives, 10u);
  EXPECT_EQ(r.model_id, "m");
}

TEST(Threshold, ZeroFarStaysAtMinimum) {
  const auto d = tenths();
  const auto r = calibrate_threshold_from_distances(d, std::vector<bool>(10, false), 0.0);
  EXPECT_LE(r.threshold, 1.0);
  EXPECT_EQ(r.achieved_far, 0.0);
}

TEST(Threshold, Errors) {
  const auto d = tenths();
  auto code = [&](double far, std::vector<bool> same) {
    try {
      calibrate_threshold_from_distances(d, same, far);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::io;
  };
  EXPECT_EQ(code(0.01, std::vector<bool>(10, false)), Errc::insufficient_data);
  EXPECT_EQ(code(0.5, std::vector<bool>(10, true)), Errc::insufficient_data);
  EXPECT_EQ(code(1.5, std::vector<bool>(10, false)), Errc::invalid_argument);
}

TEST(Threshold, RecountMatchesOnRandomDistances) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<double> d;
    std::vector<bool> same;
    for (int i = 0; i < 3000; ++i) {
      same.push_back(i % 3 == 0);
      const double v = same.back() ? rng.uniform(0.2, 1.2) : rng.uniform(0.8, 1.6);
      d.push_back(seed % 2 == 0 ? std::round(v * 50) / 50 : v);  // ties on even seeds
    }
    for (double far : {1e-3, 1e-2, 0.1}) {
      const auto r = calibrate_threshold_from_distances(d, same, far);
      std::size_t fa = 0, neg = 0, ta = 0, pos = 0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        if (same[i]) {
          ++pos;
          ta += d[i] < r.threshold;
        } else {
          ++neg;
          fa += d[i] < r.threshold;
        }
      }
      EXPECT_LE(static_cast<double>(fa) / neg, far + 1.0 / neg);
      EXPECT_LE(fa, static_cast<std::size_t>(std::floor(far * neg + 1e-9)));
      EXPECT_DOUBLE_EQ(r.achieved_far, static_cast<double>(fa) / neg);
      EXPECT_DOUBLE_EQ(r.achieved_tar, static_cast<double>(ta) / pos);
      EXPECT_GE(r.threshold, 0.0);
      EXPECT_LE(r.threshold, 2.0);
    }
  }
}

TEST(HitRate, DirectCount) {
  EXPECT_NEAR(hit_rate_from_distances({0.5, 1.2, 0.9}, 1.0), 200.0 / 3.0, 1e-12);
  EXPECT_EQ(hit_rate_from_distances({1.0, 1.0}, 1.0), 0.0);
  EXPECT_THROW(hit_rate_from_distances({}, 1.0), Error);
}

TEST(HitRate, MonotoneInThreshold) {
  Rng rng(4);
  std::vector<double> d(500);
  for (auto& v : d) v = rng.uniform(0.0, 2.0);
  double prev = -1;
  for (double t = 0.0; t <= 2.0; t += 0.01) {
    const double h = hit_rate_from_distances(d, t);
    EXPECT_GE(h, prev);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, 100.0);
    prev = h;
  }
}

TEST(HitRate, CleanNegativesReproduceFar) {
  Rng rng(8);
  std::vector<double> d(2000);
  for (auto& v : d) v = rng.uniform(0.5, 1.5);
  const auto r = calibrate_threshold_from_distances(d, std::vector<bool>(d.size(), false), 0.01);
  EXPECT_DOUBLE_EQ(hit_rate_from_distances(d, r.threshold), 100.0 * r.achieved_far);
  EXPECT_LE(hit_rate_from_distances(d, r.threshold), 1.0 + 100.0 / d.size());
}

TEST(Roc, SeparatedShuffledAndEndpoints) {
  std::vector<double> d;
  std::vector<bool> same;
  for (int i = 0; i < 100; ++i) {
    d.push_back(i < 50 ? 0.1 + i * 0.001 : 1.0 + i * 0.001);
    same.push_back(i < 50);
  }
  auto curve = roc_curve_from_distances(d, same);
  EXPECT_DOUBLE_EQ(roc_auc(curve), 1.0);
  EXPECT_EQ(curve.front().far, 0.0);
  EXPECT_EQ(curve.front().tar, 0.0);
  EXPECT_EQ(curve.back().far, 1.0);
  EXPECT_EQ(curve.back().tar, 1.0);

  Rng rng(12);
  std::vector<double> r(3000);
  std::vector<bool> lab(3000);
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i] = rng.uniform(0.0, 2.0);
    lab[i] = rng.uniform() < 0.5;
  }
  curve = roc_curve_from_distances(r, lab);
  EXPECT_NEAR(roc_auc(curve), 0.5, 0.05);
  for (std::size_t i = 1; i < curve.size(); ++i) {
    EXPECT_GE(curve[i].far, curve[i - 1].far);
    EXPECT_GE(curve[i].tar, curve[i - 1].tar);
  }
  EXPECT_THROW(roc_curve_from_distances({0.1, 0.2}, {true, true}), Error);
}

TEST(Cover, SmallExamples) {
  const auto shared = greedy_cover(pair_list({{"A", "B"}, {"B", "C"}}));
  EXPECT_EQ(shared.selected, std::vector<std::string>{"B"});
  EXPECT_EQ(shared.covered, 2u);
  const auto disjoint = greedy_cover(pair_list({{"A", "B"}, {"C", "D"}}));
  EXPECT_EQ(disjoint.selected, (std::vector<std::string>{"A", "C"}));
  EXPECT_EQ(exhaustive_cover(pair_list({{"A", "B"}, {"C", "D"}})), 2u);
  EXPECT_THROW(greedy_cover(PairList{}), Error);
}

TEST(Cover, WithinLogFactorOfExhaustiveOptimum) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const std::size_t n = 3 + rng.below(8);
    std::set<std::pair<std::size_t, std::size_t>> edges;
    const std::size_t m_target = 1 + rng.below(n * (n - 1) / 2);
    while (edges.size() < m_target) {
      std::size_t a = rng.below(n), b = rng.below(n);
      if (a == b) continue;
      edges.insert({std::min(a, b), std::max(a, b)});
    }
    PairList p;
    for (auto [a, b] : edges) p.entries.push_back({"img" + std::to_string(a), "img" + std::to_string(b), false});
    const auto g = greedy_cover(p);
    EXPECT_EQ(g.covered, p.entries.size());
    for (const auto& e : p.entries)
      EXPECT_TRUE(std::count(g.selected.begin(), g.selected.end(), e.a) ||
                  std::count(g.selected.begin(), g.selected.end(), e.b));
    for (std::size_t i = 1; i < g.gains.size(); ++i) EXPECT_LE(g.gains[i], g.gains[i - 1]);
    const double bound = (std::log(static_cast<double>(p.entries.size())) + 1.0) * exhaustive_cover(p);
    EXPECT_LE(static_cast<double>(g.selected.size()), bound) << "seed " << seed;
  }
}

TEST(Matrix, EmptyTargetsGiveEmptyMatrix) {
  const auto m = build_model<float>("tiny_a", 16, 1);
  Surrogate<float> s{"s", {&m}};
  const auto src = test::random_pixels<float>({2, 3, 32, 32}, 1), tgt = test::random_pixels<float>({2, 3, 32, 32}, 2);
  const auto mat = transfer_matrix<float>(std::span(&s, 1), std::span<const Target<float>>(), src, tgt, AttackConfig{});
  EXPECT_TRUE(mat.targets.empty());
  EXPECT_TRUE(mat.rates.empty());
  EXPECT_EQ(mat.mean_off_diagonal(), 0.0);
}

TEST(Matrix, TargetOrderDoesNotChangeCells) {
  const auto a = build_model<float>("tiny_a", 16, 1), b = build_model<float>("tiny_b", 16, 2);
  const auto c = build_model<float>("tiny_wide", 16, 3);
  const auto src = test::random_pixels<float>({6, 3, 32, 32}, 1), tgt = test::random_pixels<float>({6, 3, 32, 32}, 2);
  std::vector<Surrogate<float>> sur{{"a", {&a}}};
  std::vector<Target<float>> fwd{{"a", &a, 1.2}, {"b", &b, 1.0}, {"c", &c, 1.1}};
  std::vector<Target<float>> rev(fwd.rbegin(), fwd.rend());
  AttackConfig cfg;
  cfg.max_iters = 3;
  const auto m1 = transfer_matrix<float>(sur, fwd, src, tgt, cfg);
  const auto m2 = transfer_matrix<float>(sur, rev, src, tgt, cfg);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(m1.rates[0][t], m2.rates[0][2 - t]);
  EXPECT_EQ(m1.mean_off_diagonal(), (m1.rates[0][1] + m1.rates[0][2]) / 2);
}

TEST(Matrix, ThreadCountDoesNotChangeResults) {
  const auto a = build_model<float>("tiny_a", 16, 1);
  const auto src = test::random_pixels<float>({7, 3, 32, 32}, 3), tgt = test::random_pixels<float>({7, 3, 32, 32}, 4);
  Surrogate<float> s{"a", {&a}};
  AttackConfig cfg;
  cfg.max_iters = 4;
  cfg.drop_rate = 0.1;
  cfg.di_prob = 0.5;
  cfg.momentum = 1;
  const auto one = attack_pairs(s, src, tgt, cfg, 1, 2);
  const auto many = attack_pairs(s, src, tgt, cfg, 3, 3);
  for (std::size_t i = 0; i < one.size(); ++i) EXPECT_EQ(one[i].adversarial, many[i].adversarial);
}

TEST(Sweep, DropRateZeroPointIsTheBaseline) {
  const auto a = build_model<float>("tiny_a", 16, 1), b = build_model<float>("tiny_b", 16, 2);
  const auto src = test::random_pixels<float>({4, 3, 32, 32}, 5), tgt = test::random_pixels<float>({4, 3, 32, 32}, 6);
  Surrogate<float> s{"a", {&a}};
  std::vector<Target<float>> targets{{"b", &b, 1.3}};
  AttackConfig cfg;
  cfg.max_iters = 3;
  const auto curve = drop_rate_sweep<float>(s, targets, src, tgt, cfg, {0.0, 0.2});
  const auto base = transfer_matrix<float>(std::span(&s, 1), targets, src, tgt, cfg);
  EXPECT_EQ(curve.rates[0], base.rates[0]);
  EXPECT_THROW(drop_rate_sweep<float>(s, targets, src, tgt, cfg, {0.1, 0.2}), Error);
}
