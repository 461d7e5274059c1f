#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fsal/evaluation.hpp"
#include "fsal/image_io.hpp"
#include "fsal/model_io.hpp"
#include "fsal/parallel.hpp"
#include "fsal/training.hpp"
#include "fsal/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fsal;

namespace {

std::string config_scalar(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_float()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
    return buf;
  }
  return v.dump();
}

/// Rewrites argv so that `--config FILE` becomes one flag per key of FILE, placed right
/// after the subcommand. Keys also given on the command line are skipped, so flags win.
/// FILE is a flat JSON object keyed by flag name, or a run manifest (its "config" is used).
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::size_t sub = 1;
  while (sub < args.size() && args[sub].starts_with("-")) ++sub;
  std::string path;
  std::vector<std::string> rest;
  for (std::size_t i = sub + 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[++i];
    } else if (args[i].starts_with("--config=")) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (path.empty() || sub >= args.size()) return args;
  std::ifstream is(path);
  if (!is) throw CLI::ValidationError("--config", "cannot open " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw CLI::ValidationError("--config", path + ": " + e.what());
  }
  if (j.contains("subcommand") && j.contains("config")) j = j.at("config");
  if (!j.is_object()) throw CLI::ValidationError("--config", path + ": expected a JSON object");
  auto given = [&](const std::string& flag) {
    return std::any_of(rest.begin(), rest.end(),
                       [&](const std::string& a) { return a == flag || a.starts_with(flag + "="); });
  };
  std::vector<std::string> out(args.begin(), args.begin() + static_cast<std::ptrdiff_t>(sub + 1));
  for (const auto& [key, value] : j.items()) {
    const std::string flag = "--" + key;
    if (given(flag) || (value.is_array() && value.empty()) || (value.is_string() && value.get<std::string>().empty()))
      continue;
    if (value.is_array()) {
      out.push_back(flag);
      for (const auto& v : value) out.push_back(config_scalar(v));
    } else {
      out.push_back(flag + "=" + config_scalar(value));
    }
  }
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

/// One subcommand: registers flags and remembers them for the run manifest.
class Command {
 public:
  Command(CLI::App& app, const std::string& name, const std::string& description)
      : name_(name), sub_(app.add_subcommand(name, description)) {
    sub_->add_option("--config", config_, "JSON file of flag values, or a run manifest; flags given on the command line win");
    sub_->add_option("--out-dir", out_dir_, "Output directory")->capture_default_str();
    opt("seed", seed_, "Global seed (falls back to FSAL_SEED)")->envname("FSAL_SEED");
    opt("threads", threads_, "Worker threads");
  }

  template <typename V>
  CLI::Option* opt(const std::string& flag, V& var, const std::string& description) {
    dumpers_.push_back([flag, &var](json& j) { j[flag] = var; });
    CLI::Option* o = sub_->add_option("--" + flag, var, description)->capture_default_str();
    if constexpr (CLI::detail::is_mutable_container<V>::value) o->delimiter(',');
    return o;
  }

  CLI::Option* flag(const std::string& flag, bool& var, const std::string& description) {
    dumpers_.push_back([flag, &var](json& j) { j[flag] = var; });
    return sub_->add_flag("--" + flag, var, description)->capture_default_str();
  }

  CLI::App* app() const { return sub_; }
  bool parsed() const { return sub_->parsed(); }
  const std::string& name() const { return name_; }
  fs::path out_dir() const { return out_dir_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t threads() const { return threads_; }

  json resolved() const {
    json j = json::object();
    for (const auto& d : dumpers_) d(j);
    return j;
  }

 private:
  std::string name_;
  CLI::App* sub_;
  std::string config_;
  std::string out_dir_{"out"};
  std::uint64_t seed_{0};
  std::size_t threads_{hardware_threads()};
  std::vector<std::function<void(json&)>> dumpers_;
};

void write_json(const json& j, const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  require(static_cast<bool>(os), Errc::io, "cannot write " + path.string());
  os << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), Errc::io, "cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    fail(Errc::io, path.string() + ": " + e.what());
  }
}

std::string same_file_key(const std::string& path) { return fs::weakly_canonical(path).string(); }

/// Output files of a run, relative to the output directory, sorted.
std::vector<std::string> list_outputs(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest.json")
      out.push_back(fs::relative(e.path(), dir).generic_string());
  std::sort(out.begin(), out.end());
  return out;
}

void write_manifest(const Command& cmd, const std::vector<std::string>& inputs, double seconds) {
  json m;
  m["subcommand"] = cmd.name();
  m["version"] = kVersion;
  m["seed"] = cmd.seed();
  m["config"] = cmd.resolved();
  m["inputs"] = inputs;
  m["out_dir"] = cmd.out_dir().generic_string();
  m["outputs"] = list_outputs(cmd.out_dir());
  m["duration_s"] = seconds;
  write_json(m, cmd.out_dir() / "manifest.json");
}

// ---------------------------------------------------------------------------------
// Shared flag groups

struct AttackFlags {
  double eps{10.0};
  double step{1.0};
  std::size_t iters{0};
  double mu{0.0};
  double di_p{0.0};
  double di_translate{3.0};
  double di_rotate{10.0};
  double di_scale_lo{0.9};
  double di_scale_hi{1.1};
  double pd{0.0};
  std::vector<std::size_t> instrument;
  bool rescale{false};
  std::vector<double> weights;
  std::string mode{"impersonate"};
  std::string level{"feature"};
  std::string norm{"l1"};

  void add(Command& c) {
    c.opt("eps", eps, "L-infinity budget in pixel units");
    c.opt("step", step, "Step size per iteration");
    c.opt("iters", iters, "Maximum iterations (0: ceil(min(eps + 4, 1.25 eps)))");
    c.opt("mu", mu, "Momentum decay factor");
    c.opt("di-p", di_p, "Diverse-input transform probability");
    c.opt("di-translate", di_translate, "Diverse-input translation range in pixels");
    c.opt("di-rotate", di_rotate, "Diverse-input rotation range in degrees");
    c.opt("di-scale-lo", di_scale_lo, "Diverse-input minimum scale");
    c.opt("di-scale-hi", di_scale_hi, "Diverse-input maximum scale");
    c.opt("pd", pd, "Feature drop rate (0 disables DFANet)");
    c.opt("instrument", instrument, "Layer indices to instrument (empty: every post-activation conv output)");
    c.flag("rescale", rescale, "Divide surviving features by 1 - pd");
    c.opt("weights", weights, "Ensemble weights, one per surrogate (empty: uniform)");
    c.opt("mode", mode, "impersonate or dodge")->check(CLI::IsMember({"impersonate", "dodge"}));
    c.opt("level", level, "feature or label")->check(CLI::IsMember({"feature", "label"}));
    c.opt("norm", norm, "Gradient normalization, l1 or l2")->check(CLI::IsMember({"l1", "l2"}));
  }

  AttackConfig config(std::uint64_t seed) const {
    AttackConfig c;
    c.epsilon = eps;
    c.step_size = step;
    c.max_iters = iters == 0 ? default_iterations(eps) : iters;
    c.momentum = mu;
    c.di_prob = di_p;
    c.di = {di_translate, di_rotate, di_scale_lo, di_scale_hi};
    c.drop_rate = pd;
    c.instrumented = instrument;
    c.rescale = rescale;
    c.weights = weights;
    c.mode = attack_mode_from_string(mode);
    c.level = attack_level_from_string(level);
    c.norm = grad_norm_from_string(norm);
    c.seed = seed;
    return c;
  }
};

/// Dataset plus a pair list resolved against it.
struct PairInput {
  std::string data;
  std::string pairs;

  void add(Command& c) {
    c.opt("data", data, "Dataset manifest (dataset.json)")->required();
    c.opt("pairs", pairs, "Pair list CSV: pathA,pathB,same")->required();
  }
};

/// Verification thresholds for target models: read from a calibrate report or
/// calibrated in place on a pair list.
struct ThresholdInput {
  std::string thresholds;
  std::string calib_pairs;
  double far{1e-3};

  void add(Command& c) {
    c.opt("thresholds", thresholds, "report.json written by calibrate");
    c.opt("calib-pairs", calib_pairs, "Pair list to calibrate on when --thresholds is absent");
    c.opt("far", far, "False accept rate for in-place calibration");
  }

  double resolve(const std::string& model_path, const ModelGraph<float>& model, const Dataset& ds) const {
    if (!thresholds.empty()) {
      const json report = read_json(thresholds);
      for (const auto& m : report.at("models"))
        if (same_file_key(m.at("model").get<std::string>()) == same_file_key(model_path))
          return m.at("threshold").get<double>();
      fail(Errc::invalid_argument, "thresholds: no entry for " + model_path + " in " + thresholds);
    }
    require(!calib_pairs.empty(), Errc::invalid_argument, "thresholds: pass --thresholds or --calib-pairs");
    const PairRows rows = resolve_pairs(ds, read_pairs_csv(calib_pairs));
    return calibrate_threshold(model, ds.images, rows, far, model_path).threshold;
  }
};

struct LoadedModels {
  std::vector<std::string> paths;
  std::vector<std::unique_ptr<ModelGraph<float>>> models;

  const ModelGraph<float>* get(const std::string& path) {
    for (std::size_t i = 0; i < paths.size(); ++i)
      if (same_file_key(paths[i]) == same_file_key(path)) return models[i].get();
    paths.push_back(path);
    models.push_back(std::make_unique<ModelGraph<float>>(load_model<float>(path)));
    return models.back().get();
  }
};

std::vector<Target<float>> load_targets(LoadedModels& zoo, const std::vector<std::string>& paths,
                                        const ThresholdInput& th, const Dataset& ds) {
  std::vector<Target<float>> targets;
  for (const auto& p : paths) {
    const ModelGraph<float>* m = zoo.get(p);
    targets.push_back({p, m, th.resolve(p, *m, ds)});
  }
  return targets;
}

Surrogate<float> load_surrogate(LoadedModels& zoo, const std::vector<std::string>& paths) {
  require(!paths.empty(), Errc::invalid_argument, "surrogate: at least one model required");
  Surrogate<float> s;
  for (std::size_t i = 0; i < paths.size(); ++i) s.name += (i ? "+" : "") + paths[i];
  for (const auto& p : paths) s.members.push_back(zoo.get(p));
  return s;
}

struct AttackInputs {
  Dataset ds;
  PairRows rows;
  Tensor<float> sources;
  Tensor<float> targets;
};

AttackInputs load_attack_inputs(const PairInput& in) {
  AttackInputs a;
  a.ds = read_dataset(in.data);
  a.rows = resolve_pairs(a.ds, read_pairs_csv(in.pairs));
  require(!a.rows.a.empty(), Errc::insufficient_data, "pairs: empty pair list");
  a.sources = a.ds.gather(a.rows.a);
  a.targets = a.ds.gather(a.rows.b);
  return a;
}

std::string image_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.png", i);
  return buf;
}

// ---------------------------------------------------------------------------------
// Subcommands

struct GenData {
  SyntheticSpec spec;
  std::vector<double> split{0.4, 0.4, 0.2};
  std::size_t calib_pos{300};
  std::size_t calib_neg{300};
  std::size_t attack_sources{10};
  std::size_t attack_targets{10};

  void add(Command& c) {
    c.opt("identities", spec.identities, "Number of synthetic identities");
    c.opt("per-identity", spec.per_identity, "Images per identity");
    c.opt("channels", spec.channels, "1 or 3");
    c.opt("height", spec.height, "Image height");
    c.opt("width", spec.width, "Image width");
    c.opt("translate-px", spec.translate_px, "Maximum nuisance translation");
    c.opt("brightness", spec.brightness, "Maximum relative brightness change");
    c.opt("noise-sigma", spec.noise_sigma, "Pixel noise standard deviation");
    c.opt("rotate-deg", spec.rotate_deg, "Maximum nuisance rotation");
    c.opt("identity-contrast", spec.identity_contrast, "Weight of the identity pattern in (0, 1]");
    c.opt("split", split, "Identity pool fractions; the last pool is the evaluation pool");
    c.opt("calib-pos", calib_pos, "Positive calibration pairs");
    c.opt("calib-neg", calib_neg, "Negative calibration pairs");
    c.opt("attack-sources", attack_sources, "Source images for impersonation pairs");
    c.opt("attack-targets", attack_targets, "Target images for impersonation pairs");
  }

  std::vector<std::string> run(const Command& c) {
    spec.seed = derive_seed(c.seed(), {1});
    const Dataset ds = generate_dataset(spec);
    const DatasetSplit s = split_identities(spec.identities, split, derive_seed(c.seed(), {2}));
    const auto& eval_pool = s.pools.back();
    const PairList calib = pairs_from_split(ds, eval_pool, calib_pos, calib_neg, derive_seed(c.seed(), {3}));
    const PairList attack =
        impersonation_pairs(ds, eval_pool, attack_sources, attack_targets, derive_seed(c.seed(), {4}));
    write_dataset(ds, c.out_dir());
    write_json(to_json(s), c.out_dir() / "split.json");
    write_pairs_csv(calib, c.out_dir() / "calib_pairs.csv");
    write_pairs_csv(attack, c.out_dir() / "attack_pairs.csv");
    return {};
  }
};

struct Train {
  std::string data;
  std::string split;
  std::size_t pool{0};
  std::string arch{"tiny_a"};
  std::string head{"softmax"};
  TrainConfig tc;

  void add(Command& c) {
    c.opt("data", data, "Dataset manifest (dataset.json)")->required();
    c.opt("split", split, "split.json from gen-data (empty: all identities)");
    c.opt("pool", pool, "Identity pool to train on");
    c.opt("arch", arch, "Architecture: tiny_a, tiny_b or tiny_wide");
    c.opt("head", head, "softmax or margin")->check(CLI::IsMember({"softmax", "margin"}));
    c.opt("lr", tc.base_lr, "Base learning rate");
    c.opt("decay-epochs", tc.decay_epochs, "Epochs at which the learning rate decays");
    c.opt("decay-factor", tc.decay_factor, "Learning-rate decay factor");
    c.opt("momentum", tc.momentum, "SGD momentum");
    c.opt("weight-decay", tc.weight_decay, "L2 weight decay");
    c.opt("batch-size", tc.batch_size, "Mini-batch size");
    c.opt("epochs", tc.epochs, "Training epochs");
    c.opt("embedding-dim", tc.embedding_dim, "Embedding dimension");
    c.opt("margin", tc.margin, "Cosine margin for the margin head");
    c.opt("scale", tc.scale, "Logit scale for the margin head");
  }

  std::vector<std::string> run(const Command& c) {
    const Dataset ds = read_dataset(data);
    std::vector<std::size_t> ids;
    if (split.empty()) {
      for (std::size_t i = 0; i < ds.spec.identities; ++i) ids.push_back(i);
    } else {
      const auto pools = read_json(split).at("pools").get<std::vector<std::vector<std::size_t>>>();
      require(pool < pools.size(), Errc::invalid_argument, "pool: index out of range");
      ids = pools[pool];
    }
    tc.seed = c.seed();
    const auto result = train_model<float>(arch, ds.labeled(ids), head_mode_from_string(head), tc);
    save_model(result.model, c.out_dir() / "model.fsal");
    write_train_log(result.log, c.out_dir() / "train_log.jsonl");
    return {data, split};
  }
};

struct Calibrate {
  std::string data;
  std::string pairs;
  std::vector<std::string> models;
  double far{1e-3};

  void add(Command& c) {
    c.opt("data", data, "Dataset manifest (dataset.json)")->required();
    c.opt("pairs", pairs, "Calibration pair list CSV")->required();
    c.opt("model", models, "Model files to calibrate")->required();
    c.opt("far", far, "Target false accept rate");
  }

  std::vector<std::string> run(const Command& c) {
    const Dataset ds = read_dataset(data);
    const PairRows rows = resolve_pairs(ds, read_pairs_csv(pairs));
    json reports = json::array();
    std::ofstream curve(c.out_dir() / "curve.csv", std::ios::trunc);
    require(static_cast<bool>(curve), Errc::io, "cannot write curve.csv");
    curve << "model,threshold,far,tar\n";
    for (const auto& path : models) {
      const auto model = load_model<float>(path);
      const auto d = pair_distances(model, ds.images, rows);
      const auto r = calibrate_threshold_from_distances(d, rows.same, far, path);
      const auto roc = roc_curve_from_distances(d, rows.same);
      reports.push_back({{"model", path},
                         {"threshold", r.threshold},
                         {"far_target", r.far_target},
                         {"achieved_far", r.achieved_far},
                         {"achieved_tar", r.achieved_tar},
                         {"negatives", r.negatives},
                         {"positives", r.positives},
                         {"auc", roc_auc(roc)}});
      char buf[128];
      for (const auto& p : roc) {
        std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g\n", p.threshold, p.far, p.tar);
        curve << path << buf;
      }
    }
    write_json({{"models", reports}, {"version", kVersion}}, c.out_dir() / "report.json");
    std::vector<std::string> inputs{data, pairs};
    inputs.insert(inputs.end(), models.begin(), models.end());
    return inputs;
  }
};

struct Attack {
  PairInput in;
  std::vector<std::string> surrogates;
  AttackFlags flags;

  void add(Command& c) {
    in.add(c);
    c.opt("surrogate", surrogates, "Surrogate model files; more than one forms an ensemble")->required();
    flags.add(c);
  }

  std::vector<std::string> run(const Command& c) {
    AttackInputs a = load_attack_inputs(in);
    LoadedModels zoo;
    const Surrogate<float> s = load_surrogate(zoo, surrogates);
    const AttackConfig cfg = flags.config(c.seed());
    const auto results = attack_pairs(s, a.sources, a.targets, cfg, c.threads());
    fs::create_directories(c.out_dir() / "adv");
    PairList adv_pairs;
    json per_pair = json::array();
    for (std::size_t i = 0; i < results.size(); ++i) {
      json r = to_json(results[i]);
      r["source"] = a.ds.ref(a.rows.a[i]);
      r["target"] = a.ds.ref(a.rows.b[i]);
      if (results[i].ok()) {
        const std::string name = "adv/" + image_name(i);
        write_image(quantize_adversarial(results[i].adversarial, a.ds.image(a.rows.a[i]), cfg.epsilon),
                    c.out_dir() / name);
        adv_pairs.entries.push_back({name, a.ds.ref(a.rows.b[i]), a.rows.same[i]});
        r["adversarial"] = name;
      }
      per_pair.push_back(std::move(r));
    }
    write_pairs_csv(adv_pairs, c.out_dir() / "adv" / "pairs.csv");
    write_json({{"surrogate", s.name}, {"config", to_json(cfg)}, {"pairs", per_pair}, {"version", kVersion}},
               c.out_dir() / "report.json");
    std::vector<std::string> inputs{in.data, in.pairs};
    inputs.insert(inputs.end(), surrogates.begin(), surrogates.end());
    return inputs;
  }
};

struct Eval {
  std::string data;
  std::string attack_dir;
  std::vector<std::string> targets;
  ThresholdInput th;

  void add(Command& c) {
    c.opt("data", data, "Dataset manifest (dataset.json)")->required();
    c.opt("attack-dir", attack_dir, "Output directory of an attack run")->required();
    c.opt("target", targets, "Target model files")->required();
    th.add(c);
  }

  std::vector<std::string> run(const Command& c) {
    const Dataset ds = read_dataset(data);
    const PairList list = read_pairs_csv(fs::path(attack_dir) / "adv" / "pairs.csv");
    require(!list.entries.empty(), Errc::insufficient_data, "attack-dir: no adversarial images");
    std::vector<Tensor<float>> adv, tgt;
    const fs::path data_dir = fs::path(data).parent_path();
    for (const auto& e : list.entries) {
      adv.push_back(read_image(fs::path(attack_dir) / e.a).reshaped(prepend_batch(ds.spec)));
      tgt.push_back(read_image(data_dir / e.b).reshaped(prepend_batch(ds.spec)));
    }
    const Tensor<float> adv_batch = concat_batch<float>(adv), tgt_batch = concat_batch<float>(tgt);
    LoadedModels zoo;
    json rows = json::array();
    for (const auto& t : load_targets(zoo, targets, th, ds))
      rows.push_back({{"model", t.name},
                      {"threshold", t.threshold},
                      {"hit_rate", hit_rate(*t.model, adv_batch, tgt_batch, t.threshold)},
                      {"pairs", list.entries.size()}});
    write_json({{"targets", rows}, {"version", kVersion}}, c.out_dir() / "report.json");
    std::vector<std::string> inputs{data, attack_dir};
    inputs.insert(inputs.end(), targets.begin(), targets.end());
    return inputs;
  }

  static Shape prepend_batch(const SyntheticSpec& s) { return {1, s.channels, s.height, s.width}; }
};

struct Matrix {
  PairInput in;
  std::vector<std::string> surrogates;
  std::vector<std::string> targets;
  ThresholdInput th;
  AttackFlags flags;

  void add(Command& c) {
    in.add(c);
    c.opt("surrogates", surrogates, "Surrogate model files, one matrix row each")->required();
    c.opt("targets", targets, "Target model files, one matrix column each")->required();
    th.add(c);
    flags.add(c);
  }

  std::vector<std::string> run(const Command& c) {
    AttackInputs a = load_attack_inputs(in);
    LoadedModels zoo;
    const auto tg = load_targets(zoo, targets, th, a.ds);
    std::vector<Surrogate<float>> sg;
    for (const auto& p : surrogates) sg.push_back(load_surrogate(zoo, {p}));
    const AttackConfig cfg = flags.config(c.seed());
    const auto m = transfer_matrix<float>(sg, tg, a.sources, a.targets, cfg, c.threads());
    write_json(to_json(m, c.seed()), c.out_dir() / "report.json");
    std::vector<std::string> inputs{in.data, in.pairs};
    inputs.insert(inputs.end(), surrogates.begin(), surrogates.end());
    inputs.insert(inputs.end(), targets.begin(), targets.end());
    return inputs;
  }
};

struct Sweep {
  PairInput in;
  std::vector<std::string> surrogates;
  std::vector<std::string> targets;
  std::string param{"pd"};
  std::vector<double> grid{0.0, 0.05, 0.1, 0.2, 0.4};
  ThresholdInput th;
  AttackFlags flags;

  void add(Command& c) {
    in.add(c);
    c.opt("surrogate", surrogates, "Surrogate model files; more than one forms an ensemble")->required();
    c.opt("targets", targets, "Target model files")->required();
    c.opt("param", param, "pd (drop rate) or iters (maximum iterations)")->check(CLI::IsMember({"pd", "iters"}));
    c.opt("grid", grid, "Sweep points");
    th.add(c);
    flags.add(c);
  }

  std::vector<std::string> run(const Command& c) {
    AttackInputs a = load_attack_inputs(in);
    LoadedModels zoo;
    const auto tg = load_targets(zoo, targets, th, a.ds);
    const Surrogate<float> s = load_surrogate(zoo, surrogates);
    const AttackConfig cfg = flags.config(c.seed());
    SweepCurve curve;
    if (param == "pd") {
      curve = drop_rate_sweep<float>(s, tg, a.sources, a.targets, cfg, grid, c.threads());
    } else {
      std::vector<std::size_t> iters;
      for (double g : grid) {
        require(g >= 1 && g == std::floor(g), Errc::invalid_argument, "grid: iteration counts must be positive integers");
        iters.push_back(static_cast<std::size_t>(g));
      }
      curve = iteration_sweep<float>(s, tg, a.sources, a.targets, cfg, iters, c.threads());
    }
    write_curve_csv(curve, c.seed(), c.out_dir() / "curve.csv");
    write_json(to_json(curve, c.seed()), c.out_dir() / "report.json");
    std::vector<std::string> inputs{in.data, in.pairs};
    inputs.insert(inputs.end(), surrogates.begin(), surrogates.end());
    inputs.insert(inputs.end(), targets.begin(), targets.end());
    return inputs;
  }
};

struct Trace {
  PairInput in;
  std::vector<std::string> surrogates;
  AttackFlags flags;

  void add(Command& c) {
    in.add(c);
    c.opt("surrogate", surrogates, "Surrogate model files; more than one forms an ensemble")->required();
    flags.add(c);
  }

  std::vector<std::string> run(const Command& c) {
    AttackInputs a = load_attack_inputs(in);
    LoadedModels zoo;
    const Surrogate<float> s = load_surrogate(zoo, surrogates);
    AttackConfig cfg = flags.config(c.seed());
    cfg.record_trace = true;
    const auto results = attack_pairs(s, a.sources, a.targets, cfg, c.threads());
    std::ofstream csv(c.out_dir() / "curve.csv", std::ios::trunc);
    require(static_cast<bool>(csv), Errc::io, "cannot write curve.csv");
    csv << "pair,iteration,distance\n";
    json per_pair = json::array();
    std::size_t monotone = 0, with_increase = 0, ok = 0;
    char buf[64];
    for (std::size_t i = 0; i < results.size(); ++i) {
      const auto& r = results[i];
      if (!r.ok()) {
        per_pair.push_back({{"pair", i}, {"error", r.error}});
        continue;
      }
      ++ok;
      std::snprintf(buf, sizeof buf, "%zu,0,%.17g\n", i, r.initial_distance);
      csv << buf;
      std::size_t increases = 0;
      double prev = r.initial_distance;
      for (std::size_t k = 0; k < r.trace.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g\n", i, k + 1, r.trace[k]);
        csv << buf;
        increases += r.trace[k] > prev;
        prev = r.trace[k];
      }
      monotone += increases == 0;
      with_increase += increases > 0;
      per_pair.push_back({{"pair", i}, {"increases", increases}, {"initial_distance", r.initial_distance},
                          {"final_distance", r.final_distance}});
    }
    write_json({{"surrogate", s.name},
                {"config", to_json(cfg)},
                {"pairs", ok},
                {"non_increasing", monotone},
                {"with_increase", with_increase},
                {"per_pair", per_pair},
                {"version", kVersion}},
               c.out_dir() / "report.json");
    std::vector<std::string> inputs{in.data, in.pairs};
    inputs.insert(inputs.end(), surrogates.begin(), surrogates.end());
    return inputs;
  }
};

struct Cover {
  std::string pairs;

  void add(Command& c) { c.opt("pairs", pairs, "Pair list CSV")->required(); }

  std::vector<std::string> run(const Command& c) {
    write_json(to_json(greedy_cover(read_pairs_csv(pairs))), c.out_dir() / "report.json");
    return {pairs};
  }
};

bool input_error(Errc code) {
  switch (code) {
    case Errc::invalid_argument:
    case Errc::io:
    case Errc::shape_mismatch:
    case Errc::insufficient_data:
    case Errc::checksum:
    case Errc::version:
    case Errc::truncated:
    case Errc::unknown_architecture:
    case Errc::degenerate_pair:
      return true;
    default:
      return false;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-space adversarial attacks on face verification models, desk-scale laboratory"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  GenData gen_data;
  Train train;
  Calibrate calibrate;
  Attack attack;
  Eval eval;
  Matrix matrix;
  Sweep sweep;
  Trace trace;
  Cover cover;

  std::vector<std::pair<std::unique_ptr<Command>, std::function<std::vector<std::string>(const Command&)>>> commands;
  auto reg = [&](const std::string& name, const std::string& desc, auto& impl) {
    auto cmd = std::make_unique<Command>(app, name, desc);
    impl.add(*cmd);
    commands.emplace_back(std::move(cmd), [&impl](const Command& c) { return impl.run(c); });
  };
  reg("gen-data", "Generate a synthetic identity dataset, identity split and pair lists", gen_data);
  reg("train", "Train an embedding model on one identity pool", train);
  reg("calibrate", "Calibrate verification thresholds at a target FAR", calibrate);
  reg("attack", "Attack every pair of a pair list and write adversarial images", attack);
  reg("eval", "Hit rates of adversarial images on target models", eval);
  reg("matrix", "Surrogate x target transfer matrix", matrix);
  reg("sweep", "Hit rate as a function of the drop rate or the iteration budget", sweep);
  reg("trace", "Per-iteration surrogate distance traces", trace);
  reg("cover", "Greedy cover of the images in a pair list", cover);

  try {
    const std::vector<std::string> args = expand_config(argc, argv);
    std::vector<const char*> ptrs;
    for (const auto& a : args) ptrs.push_back(a.c_str());
    app.parse(static_cast<int>(ptrs.size()), ptrs.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  for (auto& [cmd, run] : commands) {
    if (!cmd->parsed()) continue;
    try {
      require(cmd->threads() >= 1, Errc::invalid_argument, "threads: must be >= 1");
      const auto start = std::chrono::steady_clock::now();
      fs::create_directories(cmd->out_dir());
      const auto inputs = run(*cmd);
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      write_manifest(*cmd, inputs, seconds);
      return 0;
    } catch (const Error& e) {
      std::cerr << "fsal " << cmd->name() << ": " << e.what() << '\n';
      return input_error(e.code()) ? 1 : 2;
    } catch (const nlohmann::json::exception& e) {
      std::cerr << "fsal " << cmd->name() << ": bad JSON input: " << e.what() << '\n';
      return 1;
    } catch (const std::filesystem::filesystem_error& e) {
      std::cerr << "fsal " << cmd->name() << ": io: " << e.what() << '\n';
      return 1;
    } catch (const std::exception& e) {
      std::cerr << "fsal " << cmd->name() << ": internal error: " << e.what() << '\n';
      return 2;
    }
  }
  return 2;
}
