// Acceptance run: one PASS/FAIL line per criterion. Exit status 0 only if all pass.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fsal/evaluation.hpp"
#include "fsal/image_io.hpp"
#include "fsal/layers.hpp"
#include "fsal/model_io.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace fsal;
using fsal::test::random_tensor;
using clk = std::chrono::steady_clock;

namespace {

double seconds_since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass{false};
  std::string detail;
};

// ---------------------------------------------------------------------------------
// Desk-scale laboratory shared by the transfer criteria

struct ZooEntry {
  std::string name;
  std::string arch;
  HeadMode head;
  std::size_t pool;
  std::uint64_t seed;
};

struct Lab {
  Dataset ds;
  DatasetSplit split;
  std::vector<ZooEntry> zoo;
  std::vector<ModelGraph<float>> models;
  std::vector<ThresholdReport> thresholds;
  std::vector<Target<float>> targets;
  PairRows calib;
  Tensor<float> sources, target_images;  // 400 impersonation pairs

  Surrogate<float> surrogate(std::size_t i) const { return {zoo[i].name, {&models[i]}}; }

  /// Every `stride`-th attack pair.
  std::pair<Tensor<float>, Tensor<float>> subset(std::size_t n) const {
    const std::size_t stride = sources.dim(0) / n;
    std::vector<Tensor<float>> s, t;
    for (std::size_t i = 0; i < n; ++i) {
      s.push_back(slice_batch(sources, i * stride, 1));
      t.push_back(slice_batch(target_images, i * stride, 1));
    }
    return {concat_batch<float>(s), concat_batch<float>(t)};
  }
};

constexpr double kFar = 1e-3;

const Lab& lab() {
  static const Lab l = [] {
    const auto start = clk::now();
    Lab out;
    SyntheticSpec spec;
    spec.identities = 60;
    spec.per_identity = 30;
    spec.identity_contrast = 0.2;
    spec.seed = 1;
    out.ds = generate_dataset(spec);
    out.split = split_identities(spec.identities, {0.4, 0.4, 0.2}, 2);
    out.zoo = {{"sur", "tiny_a", HeadMode::softmax, 0, 11},
               {"tb", "tiny_b", HeadMode::softmax, 1, 12},
               {"tw", "tiny_wide", HeadMode::margin, 1, 13},
               {"ta", "tiny_a", HeadMode::margin, 1, 14}};
    TrainConfig tc;
    tc.epochs = 6;
    tc.decay_epochs = {4};
    tc.base_lr = 0.02;
    for (const auto& z : out.zoo) {
      tc.seed = z.seed;
      out.models.push_back(train_model<float>(z.arch, out.ds.labeled(out.split.pools[z.pool]), z.head, tc).model);
    }
    out.calib = resolve_pairs(out.ds, pairs_from_split(out.ds, out.split.pools[2], 1000, 3000, 3));
    for (std::size_t i = 0; i < out.zoo.size(); ++i) {
      out.thresholds.push_back(calibrate_threshold(out.models[i], out.ds.images, out.calib, kFar, out.zoo[i].name));
      out.targets.push_back({out.zoo[i].name, &out.models[i], out.thresholds.back().threshold});
    }
    const PairRows attack = resolve_pairs(out.ds, impersonation_pairs(out.ds, out.split.pools[2], 20, 20, 4));
    out.sources = out.ds.gather(attack.a);
    out.target_images = out.ds.gather(attack.b);
    std::printf("info  lab: %zu identities x %zu images, %zu models, %zu attack pairs (%.1f s)\n", spec.identities,
                spec.per_identity, out.models.size(), attack.a.size(), seconds_since(start));
    for (const auto& t : out.thresholds)
      std::printf("info  %-4s threshold %.4f at FAR %.0e: achieved FAR %.4f, TAR %.3f\n", t.model_id.c_str(),
                  t.threshold, t.far_target, t.achieved_far, t.achieved_tar);
    std::fflush(stdout);
    return out;
  }();
  return l;
}

AttackConfig fim_config() {
  AttackConfig c;
  c.seed = 5;
  c.record_trace = false;
  return c;
}

AttackConfig dim_config(double drop_rate, std::size_t iters) {
  AttackConfig c = fim_config();
  c.momentum = 1.0;
  c.di_prob = 0.5;
  c.drop_rate = drop_rate;
  c.max_iters = iters;
  return c;
}

// ---------------------------------------------------------------------------------
// 1. Gradient fidelity

Layer<double> conv_layer(std::size_t in_c, std::size_t out_c, std::size_t stride, const Shape& in_shape,
                         std::uint64_t seed) {
  Conv2d<double> conv;
  conv.in_channels = in_c;
  conv.out_channels = out_c;
  conv.kernel = 3;
  conv.stride = stride;
  conv.pad = 1;
  conv.has_bias = true;
  conv.weight = random_tensor({out_c, in_c, 3, 3}, seed);
  conv.bias = random_tensor({out_c}, seed + 1);
  return make_layer<double>(conv, in_shape);
}

Layer<double> bn_layer(std::uint64_t seed) {
  BatchNorm<double> bn;
  bn.channels = 3;
  bn.gamma = random_tensor({3}, seed, 0.5, 1.5);
  bn.beta = random_tensor({3}, seed + 1);
  bn.running_mean = random_tensor({3}, seed + 2);
  bn.running_var = random_tensor({3}, seed + 3, 0.5, 2.0);
  return make_layer<double>(bn, {3, 4, 4});
}

Layer<double> prelu_layer(std::uint64_t seed) {
  PReLU<double> p;
  p.channels = 2;
  p.slope = random_tensor({2}, seed, 0.05, 0.5);
  return make_layer<double>(p, {2, 3, 3});
}

Layer<double> linear_layer(std::uint64_t seed) {
  Linear<double> lin;
  lin.in_features = 6;
  lin.out_features = 4;
  lin.weight = random_tensor({4, 6}, seed);
  lin.bias = random_tensor({4}, seed + 1);
  return make_layer<double>(lin, {6});
}

double layer_error(const Layer<double>& layer, const Tensor<double>& x, Mode mode, std::uint64_t seed) {
  LayerOutput<double> out = layer_forward(layer, x, mode);
  const auto r = random_tensor(out.output.shape(), seed);
  const auto analytic = layer_backward(layer, out.cache, r).grad_input;
  const auto numeric = test::numeric_gradient(
      [&](const Tensor<double>& xi) { return test::dot(layer_forward(layer, xi, mode).output, r); }, x);
  return test::relative_error(analytic, numeric);
}

ModelGraph<double> small_model(const std::string& arch, std::uint64_t seed) {
  auto m = build_model<double>(arch, 8, seed, 3, 8, 8);
  Rng rng(seed + 77);
  for (auto& layer : m.layers)
    if (auto* bn = std::get_if<BatchNorm<double>>(&layer.op)) {
      for (auto& v : bn->running_mean.values()) v = rng.uniform(-0.2, 0.2);
      for (auto& v : bn->running_var.values()) v = rng.uniform(0.5, 2.0);
      for (auto& v : bn->beta.values()) v = rng.uniform(-0.3, 0.3);
    }
  return m;
}

Outcome criterion_gradients() {
  std::map<std::string, double> worst;
  std::size_t cases = 0;
  auto record = [&](const std::string& what, double err) {
    worst[what] = std::max(worst[what], err);
    ++cases;
  };
  Rng warp_rng(11);
  const char* archs[] = {"tiny_a", "tiny_b", "tiny_wide"};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    record("conv", layer_error(conv_layer(2, 3, 1, {2, 5, 5}, seed), random_tensor({1, 2, 5, 5}, seed + 1),
                               Mode::infer, seed + 2));
    record("conv", layer_error(conv_layer(3, 2, 2, {3, 6, 6}, seed), random_tensor({2, 3, 6, 6}, seed + 1),
                               Mode::infer, seed + 2));
    record("batchnorm", layer_error(bn_layer(seed), random_tensor({4, 3, 4, 4}, seed + 1), Mode::infer, seed + 2));
    record("batchnorm", layer_error(bn_layer(seed), random_tensor({4, 3, 4, 4}, seed + 1), Mode::train, seed + 2));
    record("prelu", layer_error(prelu_layer(seed), random_tensor({2, 2, 3, 3}, seed + 1), Mode::infer, seed + 2));
    record("linear", layer_error(linear_layer(seed), random_tensor({3, 6}, seed + 1), Mode::infer, seed + 2));
    record("standardize", layer_error(make_layer<double>(Standardize<double>{}, {2, 2}),
                                      random_tensor({2, 2, 2}, seed, 0, 255), Mode::infer, seed + 2));
    record("flatten", layer_error(make_layer<double>(Flatten{}, {2, 2, 3}), random_tensor({2, 2, 2, 3}, seed),
                                  Mode::infer, seed + 2));
    record("avgpool", layer_error(make_layer<double>(AvgPool{2}, {2, 4, 4}), random_tensor({2, 2, 4, 4}, seed),
                                  Mode::infer, seed + 2));

    const auto v = random_tensor({2, 16}, seed + 3);
    const auto g = random_tensor({2, 16}, seed + 4);
    record("l2-normalize", test::relative_error(l2_normalize_backward(v, g, 1),
                                                test::numeric_gradient(
                                                    [&](const Tensor<double>& x) {
                                                      return test::dot(l2_normalize(x, 1), g);
                                                    },
                                                    v)));

    const auto d = di_transform<double>(9, 7, 1.0, DiRanges{}, warp_rng);
    const auto img = random_tensor({2, 9, 7}, seed + 5);
    const auto r = random_tensor({2, 9, 7}, seed + 6);
    record("di-warp", test::relative_error(
                          d.adjoint(r),
                          test::numeric_gradient([&](const Tensor<double>& x) { return test::dot(d.apply(x), r); }, img)));

    const auto m = small_model(archs[seed % 3], seed);
    const auto plan = sample_masks(m, default_instrumentation(m), 0.2, seed, seed + 1);
    const auto x = random_tensor({1, 3, 8, 8}, seed + 7, 20, 230);
    const auto adj = random_tensor({1, 8}, seed + 8);
    record("masked-model",
           test::relative_error(masked_embed_with_input_grad(m, x, &plan, adj).grad_input,
                                test::numeric_gradient(
                                    [&](const Tensor<double>& xi) { return test::dot(masked_embed(m, xi, plan), adj); },
                                    x)));
  }
  double max_err = 0;
  std::string parts;
  for (const auto& [k, e] : worst) {
    max_err = std::max(max_err, e);
    parts += fmt(" %s=%.1e", k.c_str(), e);
  }
  return {max_err < 1e-4, fmt("%zu cases, max relative error %.2e <", cases, max_err) + " 1e-4;" + parts};
}

// ---------------------------------------------------------------------------------
// 2. Constraint suite

Outcome criterion_constraints() {
  const Lab& l = lab();
  std::size_t attacks = 0, checks = 0, violations = 0;
  auto check_box = [&](const Tensor<float>& adv, const Tensor<float>& src, double eps) {
    ++checks;
    for (std::size_t i = 0; i < adv.size(); ++i) {
      const double a = adv[i], s = src[i];
      if (!(std::abs(a - s) <= eps) || a < 0.0 || a > 255.0) {
        ++violations;
        return;
      }
    }
  };

  struct Variant {
    std::string name;
    std::function<void(AttackConfig&)> set;
    bool ensemble{false};
    bool dodge{false};
  };
  const std::vector<Variant> variants = {
      {"FIM", [](AttackConfig&) {}},
      {"FFM", [](AttackConfig& c) { c.max_iters = 1, c.step_size = c.epsilon; }},
      {"M-FIM", [](AttackConfig& c) { c.momentum = 1; }},
      {"DI-FIM", [](AttackConfig& c) { c.di_prob = 1; }},
      {"DI-M-FIM", [](AttackConfig& c) { c.di_prob = 0.5, c.momentum = 1; }},
      {"DFANet-FIM", [](AttackConfig& c) { c.drop_rate = 0.2; }},
      {"DFANet-DI-M-FIM", [](AttackConfig& c) { c.drop_rate = 0.1, c.di_prob = 0.5, c.momentum = 1; }},
      {"DFANet-rescale-L2", [](AttackConfig& c) { c.drop_rate = 0.4, c.rescale = true, c.norm = GradNorm::l2; }},
      {"ensemble-DFANet-DI-M-FIM", [](AttackConfig& c) { c.drop_rate = 0.1, c.di_prob = 0.5, c.momentum = 1; }, true},
      {"ensemble-weighted-FIM", [](AttackConfig& c) { c.weights = {0.7, 0.3}, c.step_size = 2.5; }, true},
      {"dodge-FIM", [](AttackConfig&) {}, false, true},
      {"dodge-DFANet-DI-M-FIM", [](AttackConfig& c) { c.drop_rate = 0.2, c.di_prob = 0.5, c.momentum = 1; }, false, true},
  };
  const double budgets[] = {0.0, 2.0, 4.0, 8.0, 10.0, 16.0};

  // Positive pairs for dodging: two images of the same evaluation identity.
  std::vector<std::size_t> pa, pb;
  for (std::size_t i = 0; i < 100; ++i) {
    const std::size_t id = l.split.pools[2][i % l.split.pools[2].size()];
    pa.push_back(l.ds.index(id, i % 30));
    pb.push_back(l.ds.index(id, (i + 7) % 30));
  }
  const Tensor<float> pos_src = l.ds.gather(pa), pos_tgt = l.ds.gather(pb);
  const auto [imp_src, imp_tgt] = l.subset(100);

  for (std::size_t v = 0; v < variants.size(); ++v) {
    AttackConfig c = fim_config();
    c.seed = 100 + v;
    c.epsilon = budgets[v % 6];
    variants[v].set(c);
    if (variants[v].dodge) c.mode = AttackMode::dodge;
    std::vector<const ModelGraph<float>*> members{&l.models[0]};
    if (variants[v].ensemble) members.push_back(&l.models[1]);
    const Tensor<float>& src = variants[v].dodge ? pos_src : imp_src;
    const Tensor<float>& tgt = variants[v].dodge ? pos_tgt : imp_tgt;
    std::size_t calls = 0;
    const IterationObserver<float> obs = [&](std::size_t, const Tensor<float>& adv) {
      ++calls;
      check_box(adv, src, c.epsilon);
    };
    const auto rs = run_attack_batch<float>(members, src, tgt, c, 0, &obs);
    for (std::size_t r = 0; r < rs.size(); ++r) check_box(rs[r].adversarial, slice_batch(src, r, 1), c.epsilon);
    if (calls != c.max_iters) ++violations;
    attacks += rs.size();
  }

  // Label level: ITGSM checked after every iteration through its prefixes.
  const auto [lsrc, ltgt] = l.subset(50);
  for (std::size_t k = 1; k <= 13; ++k) {
    const auto rs = itgsm(l.models[0], lsrc, ltgt, 10.0, k);
    for (std::size_t r = 0; r < rs.size(); ++r) check_box(rs[r].adversarial, slice_batch(lsrc, r, 1), 10.0);
  }
  attacks += lsrc.dim(0);
  for (double eps : {1.0, 10.0}) {
    const auto rs = ftgsm(l.models[0], lsrc, ltgt, eps);
    for (std::size_t r = 0; r < rs.size(); ++r) check_box(rs[r].adversarial, slice_batch(lsrc, r, 1), eps);
    attacks += rs.size();
  }
  return {attacks >= 1000 && violations == 0,
          fmt("%zu attacks over %zu variants, %zu per-iteration checks, %zu violations", attacks, variants.size() + 2,
              checks, violations)};
}

// ---------------------------------------------------------------------------------
// 3. Degeneration equivalences

Tensor<float> stack(const std::vector<AttackResult<float>>& rs) {
  std::vector<Tensor<float>> parts;
  for (const auto& r : rs) parts.push_back(r.adversarial);
  return concat_batch<float>(parts);
}

Outcome criterion_degenerations() {
  const Lab& l = lab();
  const auto [src, tgt] = l.subset(100);
  const ModelGraph<float>& m = l.models[0];
  const std::vector<const ModelGraph<float>*> one{&m};
  std::vector<std::string> failed;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  };
  auto run = [&](const AttackConfig& c) { return stack(run_attack_batch<float>(one, src, tgt, c)); };

  AttackConfig base = fim_config();
  base.seed = 21;
  const Tensor<float> plain = fim(m, src, tgt, 10.0, 13);
  AttackConfig dfa0 = base;
  dfa0.drop_rate = 0.0;
  dfa0.instrumented = default_instrumentation(m).layers;
  expect(run(dfa0) == plain, "DFANet(p_d=0) vs FIM");
  AttackConfig dim = dim_config(0.0, 13);
  dim.seed = 21;
  AttackConfig dfa_dim0 = dim;
  dfa_dim0.instrumented = default_instrumentation(m).layers;
  expect(run(dfa_dim0) == run(dim), "DFANet-DI-M-FIM(p_d=0) vs DI-M-FIM");

  AttackConfig mu0 = base;
  mu0.momentum = 0.0;
  mu0.di_prob = 0.0;
  expect(run(mu0) == plain, "mu=0 vs FIM");
  AttackConfig p0 = dim;
  p0.di_prob = 0.0;
  p0.momentum = 0.0;
  expect(run(p0) == plain, "DI p=0 vs FIM");
  AttackConfig p0_mu = dim;
  p0_mu.di_prob = 0.0;
  AttackConfig mfim = base;
  mfim.momentum = 1.0;
  expect(run(p0_mu) == run(mfim), "DI-M-FIM with p=0 vs M-FIM");

  AttackConfig k1 = dim;
  k1.drop_rate = 0.1;
  k1.weights = {1.0};
  AttackConfig single = k1;
  single.weights.clear();
  expect(run(k1) == run(single), "ensemble K=1 vs single model");

  expect(stack(itgsm(m, src, tgt, 10.0, 1, 10.0)) == stack(ftgsm(m, src, tgt, 10.0)), "ITGSM(1, eps) vs FTGSM");
  AttackConfig ffm_cfg = base;
  ffm_cfg.max_iters = 1;
  ffm_cfg.step_size = 10.0;
  expect(run(ffm_cfg) == ffm(m, src, tgt, 10.0), "FIM(1, eps) vs FFM");

  std::string detail = fmt("9 bitwise equivalences on %zu pairs", src.dim(0));
  for (const auto& f : failed) detail += "; differs: " + f;
  return {failed.empty(), detail};
}

// ---------------------------------------------------------------------------------
// 4 and 5. White-box potency, feature versus label transfer

Outcome criterion_whitebox() {
  const Lab& l = lab();
  const auto sur = l.surrogate(0);
  const auto results = attack_pairs(sur, l.sources, l.target_images, fim_config());
  const auto report = evaluate_hits(sur.name, results, l.target_images, std::span(&l.targets[0], 1), fim_config());
  const double rate = report.rates.front();
  return {rate >= 95.0 && report.pairs >= 400,
          fmt("FIM eps=10, 13 iterations, %zu pairs: white-box hit rate %.2f%% >= 95%%", report.pairs, rate)};
}

Outcome criterion_feature_vs_label() {
  const Lab& l = lab();
  std::vector<Surrogate<float>> sur;
  for (std::size_t i = 0; i < l.models.size(); ++i) sur.push_back(l.surrogate(i));
  const auto feature = transfer_matrix<float>(sur, l.targets, l.sources, l.target_images, fim_config());
  AttackConfig label = fim_config();
  label.level = AttackLevel::label;
  const auto lab_m = transfer_matrix<float>(sur, l.targets, l.sources, l.target_images, label);
  const double f = feature.mean_off_diagonal(), g = lab_m.mean_off_diagonal();
  std::printf("info  FIM matrix (rows: surrogate, cols: target) and ITGSM matrix\n");
  for (std::size_t s = 0; s < sur.size(); ++s) {
    std::printf("info    %-4s", sur[s].name.c_str());
    for (double v : feature.rates[s]) std::printf(" %6.2f", v);
    std::printf("   |");
    for (double v : lab_m.rates[s]) std::printf(" %6.2f", v);
    std::printf("\n");
  }
  return {f - g >= 5.0, fmt("mean off-diagonal over %zu cells, %zu pairs: FIM %.2f%% vs ITGSM %.2f%% (+%.2f pp >= 5)",
                            sur.size() * (sur.size() - 1), l.sources.dim(0), f, g, f - g)};
}

// ---------------------------------------------------------------------------------
// 6, 7 and 8. DFANet sweep: mean off-diagonal hit rate at N_max 13 and 500 per drop rate

constexpr std::size_t kSweepPairs = 100;
constexpr double kFig5DropRate = 0.1;
const std::vector<double> kDropGrid{0.0, 0.05, 0.1, 0.2, 0.4};

/// Mean off-diagonal hit rate at N_max = 13 and 500 (one run, snapshots) for
/// FIM (variant 0) or DI-M-FIM (variant 1) with DFANet at `pd`. Memoized.
std::pair<double, double> sweep_point(int variant, double pd) {
  static std::map<std::pair<int, double>, std::pair<double, double>> cache;
  const auto key = std::make_pair(variant, pd);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  const Lab& l = lab();
  const auto [src, tgt] = l.subset(kSweepPairs);
  AttackConfig c = variant == 0 ? fim_config() : dim_config(0.0, 13);
  c.drop_rate = pd;
  const auto curve = iteration_sweep<float>(l.surrogate(0), l.targets, src, tgt, c, {13, 500});
  std::printf("info  %-15s p_d=%-4g  N=13 %6.2f%%  N=500 %6.2f%%\n", variant == 0 ? "DFANet-FIM" : "DFANet-DI-M-FIM",
              pd, curve.means[0], curve.means[1]);
  std::fflush(stdout);
  return cache[key] = {curve.means[0], curve.means[1]};
}

std::vector<double> curve_at_500(int variant) {
  std::vector<double> out;
  for (double pd : kDropGrid) out.push_back(sweep_point(variant, pd).second);
  return out;
}

std::size_t argmax(const std::vector<double>& v, std::size_t from = 0) {
  return static_cast<std::size_t>(std::max_element(v.begin() + static_cast<std::ptrdiff_t>(from), v.end()) - v.begin());
}

Outcome criterion_dfanet_gain() {
  const auto fim_curve = curve_at_500(0), dim_curve = curve_at_500(1);
  const std::size_t bf = argmax(fim_curve, 1), bd = argmax(dim_curve, 1);
  const double gain_fim = fim_curve[bf] - fim_curve[0];
  const double gain_dim = dim_curve[bd] - dim_curve[0];
  return {gain_fim >= 2.0 && gain_dim >= 2.0,
          fmt("N_max=500, %zu pairs, 3 held-out targets: DFANet-DI-M-FIM %.2f%% (p_d=%g) vs DI-M-FIM %.2f%% "
              "(+%.2f pp); DFANet-FIM %.2f%% (p_d=%g) vs FIM %.2f%% (+%.2f pp)",
              kSweepPairs, dim_curve[bd], kDropGrid[bd], dim_curve[0], gain_dim, fim_curve[bf], kDropGrid[bf],
              fim_curve[0], gain_fim)};
}

Outcome criterion_drop_curve() {
  const auto rates = curve_at_500(1);
  const std::size_t arg = argmax(rates);
  const bool interior = arg > 0 && arg + 1 < rates.size();
  const bool declines = rates.back() < rates[arg];
  std::string curve;
  for (std::size_t i = 0; i < rates.size(); ++i) curve += fmt(" %g:%.2f", kDropGrid[i], rates[i]);
  return {interior && declines, fmt("DFANet-DI-M-FIM at N_max=500, maximum at p_d=%g, last point %s;", kDropGrid[arg],
                                    declines ? "lower" : "not lower") +
                                    curve};
}

Outcome criterion_iterations() {
  const auto [dfa13, dfa500] = sweep_point(1, kFig5DropRate);
  const auto [fim13, fim500] = sweep_point(0, 0.0);
  return {dfa500 > dfa13 && std::abs(fim500 - fim13) < 2.0,
          fmt("DFANet-DI-M-FIM (p_d=%g) %.2f%% at N=13 -> %.2f%% at N=500; FIM %.2f%% -> %.2f%% (|change| %.2f pp < 2)",
              kFig5DropRate, dfa13, dfa500, fim13, fim500, std::abs(fim500 - fim13))};
}

// ---------------------------------------------------------------------------------
// 9. Trace properties

struct TraceStats {
  std::size_t non_increasing{};
  std::size_t with_increase{};
  bool mean_non_increasing{true};
};

TraceStats trace_stats(const std::vector<AttackResult<float>>& rs) {
  TraceStats t;
  std::vector<double> mean(rs.front().trace.size() + 1, 0.0);
  for (const auto& r : rs) {
    bool increase = false;
    double prev = r.initial_distance;
    mean[0] += r.initial_distance / static_cast<double>(rs.size());
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
      increase = increase || r.trace[i] > prev;
      prev = r.trace[i];
      mean[i + 1] += r.trace[i] / static_cast<double>(rs.size());
    }
    (increase ? t.with_increase : t.non_increasing)++;
  }
  for (std::size_t i = 1; i < mean.size(); ++i) t.mean_non_increasing = t.mean_non_increasing && mean[i] <= mean[i - 1];
  return t;
}

Outcome criterion_traces() {
  const Lab& l = lab();
  const auto [src, tgt] = l.subset(100);
  const auto sur = l.surrogate(0);
  AttackConfig fim_c = fim_config();
  fim_c.record_trace = true;
  const TraceStats f = trace_stats(attack_pairs(sur, src, tgt, fim_c));
  AttackConfig dfa = dim_config(kFig5DropRate, 500);
  dfa.record_trace = true;
  const TraceStats d = trace_stats(attack_pairs(sur, src, tgt, dfa));
  std::printf("info  FIM mean trace over 100 pairs is %s\n",
              f.mean_non_increasing ? "non-increasing" : "not non-increasing");
  return {f.non_increasing == 100 && d.with_increase >= 90,
          fmt("FIM (13 iterations) non-increasing on %zu/100 pairs (need 100); DFANet-DI-M-FIM (p_d=%g, "
              "500 iterations) fluctuates on %zu/100 pairs (need >= 90)",
              f.non_increasing, kFig5DropRate, d.with_increase)};
}

// ---------------------------------------------------------------------------------
// 10. Oracle equivalences

double plain_distance(const Tensor<float>& x, const Tensor<float>& y) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

std::size_t exhaustive_cover(const PairList& p) {
  std::vector<std::string> nodes;
  for (const auto& e : p.entries) {
    nodes.push_back(e.a);
    nodes.push_back(e.b);
  }
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  auto bit = [&](const std::string& s) {
    return static_cast<std::size_t>(std::lower_bound(nodes.begin(), nodes.end(), s) - nodes.begin());
  };
  std::size_t best = nodes.size();
  for (std::uint32_t mask = 0; mask < (1u << nodes.size()); ++mask) {
    const auto size = static_cast<std::size_t>(std::popcount(mask));
    if (size >= best) continue;
    bool ok = true;
    for (const auto& e : p.entries) ok = ok && (((mask >> bit(e.a)) & 1u) || ((mask >> bit(e.b)) & 1u));
    if (ok) best = size;
  }
  return best;
}

Outcome criterion_oracles(const fs::path& work) {
  const Lab& l = lab();
  std::vector<std::string> problems;

  // Hit rate against a recount from images written to disk.
  const auto [src, tgt] = l.subset(100);
  const auto results = attack_pairs(l.surrogate(0), src, tgt, fim_config());
  const fs::path dir = work / "oracle";
  fs::create_directories(dir);
  std::vector<Tensor<float>> quantized;
  for (std::size_t i = 0; i < results.size(); ++i) {
    quantized.push_back(quantize_adversarial(results[i].adversarial, slice_batch(src, i, 1), 10.0));
    write_image(quantized.back(), dir / fmt("adv%03zu.png", i));
    write_image(slice_batch(tgt, i, 1), dir / fmt("tgt%03zu.png", i));
  }
  const Tensor<float> adv_batch = concat_batch<float>(quantized);
  std::string hits;
  for (const auto& t : l.targets) {
    const double pipeline = hit_rate(*t.model, adv_batch, tgt, t.threshold);
    std::size_t count = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      const Shape one{1, 3, 32, 32};
      const auto a = embed(*t.model, read_image(dir / fmt("adv%03zu.png", i)).reshaped(one));
      const auto b = embed(*t.model, read_image(dir / fmt("tgt%03zu.png", i)).reshaped(one));
      count += plain_distance(a, b) < t.threshold;
    }
    const double recount = 100.0 * static_cast<double>(count) / static_cast<double>(results.size());
    if (recount != pipeline) problems.push_back(fmt("hit rate %s: %.2f vs recount %.2f", t.name.c_str(), pipeline, recount));
    hits += fmt(" %s=%.0f%%", t.name.c_str(), pipeline);
  }

  // Greedy cover against exhaustive search.
  std::size_t instances = 0;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    Rng rng(derive_seed(99, {seed}));
    const std::size_t n = 2 + rng.below(9);
    std::set<std::pair<std::size_t, std::size_t>> edges;
    const std::size_t m = 1 + rng.below(n * (n - 1) / 2);
    while (edges.size() < m) {
      const std::size_t a = rng.below(n), b = rng.below(n);
      if (a != b) edges.insert({std::min(a, b), std::max(a, b)});
    }
    PairList p;
    for (const auto& [a, b] : edges) p.entries.push_back({fmt("img%zu", a), fmt("img%zu", b), false});
    const auto g = greedy_cover(p);
    const std::set<std::string> chosen(g.selected.begin(), g.selected.end());
    bool all = g.covered == p.entries.size();
    for (const auto& e : p.entries) all = all && (chosen.count(e.a) || chosen.count(e.b));
    const double bound = (std::log(static_cast<double>(m)) + 1.0) * static_cast<double>(exhaustive_cover(p));
    if (!all || static_cast<double>(g.selected.size()) > bound + 1e-12)
      problems.push_back(fmt("cover instance %llu", static_cast<unsigned long long>(seed)));
    ++instances;
  }

  // Calibrated FAR against a recount with per-image embeddings.
  std::string fars;
  for (std::size_t k = 0; k < l.models.size(); ++k) {
    std::map<std::size_t, Tensor<float>> emb;
    auto embedding = [&](std::size_t row) -> const Tensor<float>& {
      auto it = emb.find(row);
      if (it == emb.end()) it = emb.emplace(row, embed(l.models[k], l.ds.image(row))).first;
      return it->second;
    };
    std::size_t negatives = 0, accepted = 0;
    for (std::size_t i = 0; i < l.calib.a.size(); ++i) {
      if (l.calib.same[i]) continue;
      ++negatives;
      accepted += plain_distance(embedding(l.calib.a[i]), embedding(l.calib.b[i])) < l.thresholds[k].threshold;
    }
    const double far = static_cast<double>(accepted) / static_cast<double>(negatives);
    if (far != l.thresholds[k].achieved_far || far > kFar + 1.0 / static_cast<double>(negatives))
      problems.push_back(fmt("FAR %s: reported %.5f, recount %.5f", l.zoo[k].name.c_str(),
                             l.thresholds[k].achieved_far, far));
    fars += fmt(" %s=%zu/%zu", l.zoo[k].name.c_str(), accepted, negatives);
  }

  std::string detail = "hit-rate recount from disk, 100 pairs:" + hits + fmt("; %zu cover instances", instances) +
                       "; FAR recount:" + fars;
  for (const auto& p : problems) detail += "; MISMATCH " + p;
  return {problems.empty(), detail};
}

// ---------------------------------------------------------------------------------
// 11. CLI determinism

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).generic_string()] = read_bytes(e.path());
  return files;
}

nlohmann::json manifest_without_run_fields(const fs::path& dir) {
  auto j = nlohmann::json::parse(read_bytes(dir / "manifest.json"));
  j.erase("duration_s");
  j.erase("out_dir");
  return j;
}

Outcome criterion_determinism(const fs::path& work, const std::string& fsal) {
  if (fsal.empty() || !fs::exists(fsal)) return {false, "fsal executable not found (pass --fsal)"};
  const fs::path dir = work / "cli";
  fs::create_directories(dir);
  const std::string d = dir.string();
  auto sh = [&](const std::string& args) {
    const std::string cmd = "cd '" + d + "' && '" + fs::absolute(fsal).string() + "' " + args + " >/dev/null 2>&1";
    return std::system(cmd.c_str());
  };
  const std::vector<std::pair<std::string, std::string>> steps = {
      {"data", "gen-data --identities 20 --per-identity 12 --calib-pos 100 --calib-neg 200 --attack-sources 5 "
               "--attack-targets 5"},
      {"m0", "train --data data/dataset.json --split data/split.json --pool 0 --epochs 2"},
      {"m1", "train --data data/dataset.json --split data/split.json --pool 1 --arch tiny_b --head margin --epochs 2"},
      {"cal", "calibrate --data data/dataset.json --pairs data/calib_pairs.csv --model m0/model.fsal,m1/model.fsal "
              "--far 0.01"},
      {"atk", "attack --data data/dataset.json --pairs data/attack_pairs.csv --surrogate m0/model.fsal,m1/model.fsal "
              "--pd 0.1 --mu 1 --di-p 0.5 --iters 5"},
      {"ev", "eval --data data/dataset.json --attack-dir atk --target m0/model.fsal,m1/model.fsal "
             "--thresholds cal/report.json"},
      {"mx", "matrix --data data/dataset.json --pairs data/attack_pairs.csv --surrogates m0/model.fsal,m1/model.fsal "
             "--targets m0/model.fsal,m1/model.fsal --thresholds cal/report.json --iters 3"},
      {"sw", "sweep --data data/dataset.json --pairs data/attack_pairs.csv --surrogate m0/model.fsal "
             "--targets m1/model.fsal --calib-pairs data/calib_pairs.csv --far 0.01 --grid 0,0.2 --iters 3"},
      {"si", "sweep --data data/dataset.json --pairs data/attack_pairs.csv --surrogate m0/model.fsal "
             "--targets m1/model.fsal --thresholds cal/report.json --param iters --grid 1,4 --mu 1 --pd 0.2"},
      {"tr", "trace --data data/dataset.json --pairs data/attack_pairs.csv --surrogate m0/model.fsal --iters 6 "
             "--pd 0.2 --di-p 1"},
      {"cv", "cover --pairs data/attack_pairs.csv"},
  };
  std::vector<std::string> problems;
  std::size_t files = 0;
  for (const auto& [out, args] : steps) {
    if (sh(args + " --threads 1 --seed 3 --out-dir " + out) != 0) {
      problems.push_back(out + ": first run failed");
      continue;
    }
    if (sh(args.substr(0, args.find(' ')) + " --config " + out + "/manifest.json --out-dir " + out + "_rerun") != 0) {
      problems.push_back(out + ": rerun from manifest failed");
      continue;
    }
    auto a = snapshot(dir / out), b = snapshot(dir / (out + "_rerun"));
    a.erase("manifest.json");
    b.erase("manifest.json");
    files += a.size();
    if (a != b) problems.push_back(out + ": outputs differ");
    if (manifest_without_run_fields(dir / out) != manifest_without_run_fields(dir / (out + "_rerun")))
      problems.push_back(out + ": manifests differ");
  }
  std::string detail = fmt("%zu runs re-executed from their manifests with --threads 1, %zu artifacts compared",
                           steps.size(), files);
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty() && files > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run"};
  std::string fsal_path;
  std::string work{"acceptance_work"};
  std::vector<int> only;
  app.add_option("--fsal", fsal_path, "Path to the fsal executable");
  app.add_option("--work", work, "Scratch directory")->capture_default_str();
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const fs::path scratch = work;
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient fidelity", 30, criterion_gradients},
      {2, "constraint suite", 120, criterion_constraints},
      {3, "degeneration equivalences", 60, criterion_degenerations},
      {4, "white-box potency", 120, criterion_whitebox},
      {5, "feature > label transferability", 300, criterion_feature_vs_label},
      {6, "DFANet gain", 600, criterion_dfanet_gain},
      {7, "drop-rate curve shape", 600, criterion_drop_curve},
      {8, "iteration-count trend", 300, criterion_iterations},
      {9, "trace properties", 120, criterion_traces},
      {10, "oracle equivalences", 60, [&] { return criterion_oracles(scratch); }},
      {11, "determinism", 120, [&] { return criterion_determinism(scratch, fsal_path); }},
  };

  bool needs_lab = false;
  for (const auto& c : criteria)
    if ((only.empty() || std::count(only.begin(), only.end(), c.id)) && c.id >= 2 && c.id <= 10) needs_lab = true;
  if (needs_lab) lab();  // shared setup, timed separately

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !std::count(only.begin(), only.end(), c.id)) continue;
    const auto start = clk::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = seconds_since(start);
    const bool in_budget = s < c.budget_s;
    if (!in_budget) o.detail += fmt("; over the %.0f s budget", c.budget_s);
    o.pass = o.pass && in_budget;
    failed += !o.pass;
    std::printf("%s %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), s);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
