// Trains a surrogate and a held-out target on synthetic identities, calibrates the
// target at FAR 1e-2, then compares FIM with DFANet-DI-M-FIM on 50 impersonation pairs.

#include <cstdio>

#include "fsal/evaluation.hpp"

int main() {
  using namespace fsal;

  SyntheticSpec spec;
  spec.identities = 20;
  spec.per_identity = 20;
  spec.identity_contrast = 0.2;
  const Dataset ds = generate_dataset(spec);
  const DatasetSplit split = split_identities(spec.identities, {0.4, 0.4, 0.2}, 2);

  TrainConfig tc;
  tc.epochs = 6;
  tc.decay_epochs = {4};
  tc.seed = 11;
  const auto surrogate = train_model<float>("tiny_a", ds.labeled(split.pools[0]), HeadMode::softmax, tc).model;
  tc.seed = 12;
  const auto target = train_model<float>("tiny_b", ds.labeled(split.pools[1]), HeadMode::margin, tc).model;

  const PairRows calib = resolve_pairs(ds, pairs_from_split(ds, split.pools[2], 200, 400, 3));
  const ThresholdReport t = calibrate_threshold(target, ds.images, calib, 1e-2, "target");
  std::printf("target threshold %.4f (FAR %.4f, TAR %.3f)\n", t.threshold, t.achieved_far, t.achieved_tar);

  const PairRows pairs = resolve_pairs(ds, impersonation_pairs(ds, split.pools[2], 10, 5, 4));
  const Tensor<float> sources = ds.gather(pairs.a), targets = ds.gather(pairs.b);
  const Surrogate<float> sur{"surrogate", {&surrogate}};
  const std::vector<Target<float>> held_out{{"target", &target, t.threshold}};

  AttackConfig fim;
  fim.seed = 5;
  AttackConfig dfanet = fim;
  dfanet.momentum = 1.0;
  dfanet.di_prob = 0.5;
  dfanet.drop_rate = 0.1;
  dfanet.max_iters = 100;

  for (const auto& [name, cfg] : {std::pair{"FIM", fim}, std::pair{"DFANet-DI-M-FIM", dfanet}}) {
    const auto results = attack_pairs(sur, sources, targets, cfg);
    const HitReport r = evaluate_hits(sur.name, results, targets, std::span(held_out), cfg);
    std::printf("%-16s transfer hit rate %.1f%% over %zu pairs\n", name, r.rates.front(), r.pairs);
  }
}
