#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsal/image_io.hpp"
#include "fsal/rng.hpp"
#include "fsal/tensor.hpp"
#include "fsal/training.hpp"
#include "fsal/warp.hpp"

namespace fsal {

struct SyntheticSpec {
  std::size_t identities{20};
  std::size_t per_identity{30};
  std::size_t channels{3};
  std::size_t height{32};
  std::size_t width{32};
  std::uint64_t seed{1};
  double translate_px{2.0};
  double brightness{0.10};
  double noise_sigma{4.0};
  double rotate_deg{8.0};
  double identity_contrast{1.0};  // weight of the identity pattern against a shared template

  void validate() const {
    require(identities >= 2, Errc::invalid_argument, "synthetic spec needs at least two identities");
    require(per_identity >= 1 && (channels == 1 || channels == 3) && height >= 8 && width >= 8, Errc::invalid_argument,
            "invalid synthetic image geometry");
    require(translate_px >= 0 && 2 * translate_px < static_cast<double>(std::min(height, width)) && brightness >= 0 &&
                brightness < 1 && noise_sigma >= 0 && rotate_deg >= 0 && rotate_deg <= 45 &&
                identity_contrast > 0 && identity_contrast <= 1,
            Errc::invalid_argument, "synthetic variation ranges out of frame");
  }
};

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"identities", s.identities}, {"per_identity", s.per_identity}, {"channels", s.channels},
          {"height", s.height},         {"width", s.width},               {"seed", s.seed},
          {"translate_px", s.translate_px}, {"brightness", s.brightness}, {"noise_sigma", s.noise_sigma},
          {"rotate_deg", s.rotate_deg}, {"identity_contrast", s.identity_contrast}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.identities = j.at("identities").get<std::size_t>();
  s.per_identity = j.at("per_identity").get<std::size_t>();
  s.channels = j.at("channels").get<std::size_t>();
  s.height = j.at("height").get<std::size_t>();
  s.width = j.at("width").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.translate_px = j.at("translate_px").get<double>();
  s.brightness = j.at("brightness").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.rotate_deg = j.at("rotate_deg").get<double>();
  s.identity_contrast = j.value("identity_contrast", 1.0);
  return s;
}

/// Images stored identity-major: image k of identity i sits at row i * per_identity + k.
struct Dataset {
  SyntheticSpec spec;
  Tensor<float> images;  // N x C x H x W, integer pixels in [0, 255]
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t index(std::size_t identity, std::size_t k) const { return identity * spec.per_identity + k; }

  /// Reference used in pair lists and manifests, relative to the dataset directory.
  std::string ref(std::size_t i) const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "images/id%04zu/%03zu.png", labels[i], i % spec.per_identity);
    return buf;
  }

  Tensor<float> image(std::size_t i) const { return slice_batch(images, i, 1); }

  Tensor<float> gather(const std::vector<std::size_t>& rows) const {
    Shape shape = images.shape();
    shape[0] = rows.size();
    Tensor<float> out(shape);
    const std::size_t per = images.sample_size();
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(images.data() + rows[r] * per, per, out.data() + r * per);
    return out;
  }

  std::vector<std::size_t> rows_of(const std::vector<std::size_t>& identities) const {
    std::vector<std::size_t> rows;
    for (std::size_t id : identities)
      for (std::size_t k = 0; k < spec.per_identity; ++k) rows.push_back(index(id, k));
    return rows;
  }

  /// Training view of the given identities, relabelled 0..|ids|-1 in the given order.
  LabeledImages labeled(const std::vector<std::size_t>& identities) const {
    LabeledImages out;
    out.images = gather(rows_of(identities));
    out.classes = identities.size();
    for (std::size_t i = 0; i < identities.size(); ++i)
      for (std::size_t k = 0; k < spec.per_identity; ++k) out.labels.push_back(i);
    return out;
  }
};

namespace detail {

struct Glyph {
  int kind;  // 0 disc, 1 square, 2 ring, 3 bar
  double cx, cy, size, angle;
  double color[3];
};

inline void paint_glyph(std::vector<double>& canvas, std::size_t channels, std::size_t h, std::size_t w,
                        const Glyph& g) {
  const double ca = std::cos(g.angle), sa = std::sin(g.angle);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - g.cx, dy = static_cast<double>(y) - g.cy;
      const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
      const double r = std::sqrt(dx * dx + dy * dy);
      bool inside = false;
      switch (g.kind) {
        case 0: inside = r <= g.size; break;
        case 1: inside = std::abs(u) <= g.size * 0.8 && std::abs(v) <= g.size * 0.8; break;
        case 2: inside = r <= g.size && r >= g.size * 0.55; break;
        default: inside = std::abs(u) <= g.size * 1.3 && std::abs(v) <= g.size * 0.35; break;
      }
      if (!inside) continue;
      for (std::size_t c = 0; c < channels; ++c) canvas[(c * h + y) * w + x] = g.color[c];
    }
  }
}

inline std::vector<double> random_pattern(const SyntheticSpec& spec, std::uint64_t stream) {
  const std::size_t h = spec.height, w = spec.width, ch = spec.channels;
  Rng rng(stream);
  std::vector<double> canvas(ch * h * w);
  // Low-frequency field: a per-channel mean plus a few random plane waves.
  for (std::size_t c = 0; c < ch; ++c) {
    const double mean = rng.uniform(70.0, 185.0);
    struct Wave {
      double fx, fy, phase, amp;
    };
    Wave waves[3];
    for (auto& wv : waves)
      wv = {rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(0.0, 2.0 * std::numbers::pi),
            rng.uniform(10.0, 30.0)};
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double v = mean;
        for (const auto& wv : waves)
          v += wv.amp * std::cos(2.0 * std::numbers::pi *
                                     (wv.fx * static_cast<double>(x) / w + wv.fy * static_cast<double>(y) / h) +
                                 wv.phase);
        canvas[(c * h + y) * w + x] = v;
      }
  }
  const std::size_t glyphs = 3 + rng.below(3);
  for (std::size_t g = 0; g < glyphs; ++g) {
    Glyph glyph;
    glyph.kind = static_cast<int>(rng.below(4));
    const double margin = 0.2 * static_cast<double>(std::min(h, w));
    glyph.cx = rng.uniform(margin, static_cast<double>(w) - 1.0 - margin);
    glyph.cy = rng.uniform(margin, static_cast<double>(h) - 1.0 - margin);
    glyph.size = rng.uniform(0.08, 0.2) * static_cast<double>(std::min(h, w));
    glyph.angle = rng.uniform(0.0, std::numbers::pi);
    for (double& c : glyph.color) c = rng.uniform(0.0, 255.0);
    paint_glyph(canvas, ch, h, w, glyph);
  }
  return canvas;
}

inline std::vector<double> identity_base(const SyntheticSpec& spec, std::size_t identity) {
  std::vector<double> own = random_pattern(spec, derive_seed(spec.seed, {0x62617365ULL, identity}));
  if (spec.identity_contrast >= 1.0) return own;
  const std::vector<double> shared = random_pattern(spec, derive_seed(spec.seed, {0x736861726564ULL}));
  for (std::size_t i = 0; i < own.size(); ++i)
    own[i] = spec.identity_contrast * own[i] + (1.0 - spec.identity_contrast) * shared[i];
  return own;
}

}  // namespace detail

/// Seeded synthetic identities: a per-identity base pattern, and per image an
/// independent draw of translation, rotation, brightness and pixel noise.
inline Dataset generate_dataset(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  const std::size_t h = spec.height, w = spec.width, ch = spec.channels, plane = ch * h * w;
  ds.images = Tensor<float>({spec.identities * spec.per_identity, ch, h, w});
  ds.labels.reserve(spec.identities * spec.per_identity);
  for (std::size_t id = 0; id < spec.identities; ++id) {
    const std::vector<double> base = detail::identity_base(spec, id);
    for (std::size_t k = 0; k < spec.per_identity; ++k) {
      Rng rng(derive_seed(spec.seed, {0x696d67ULL, id, k}));
      WarpParams params;
      params.tx = rng.uniform(-spec.translate_px, spec.translate_px);
      params.ty = rng.uniform(-spec.translate_px, spec.translate_px);
      params.rotate_deg = rng.uniform(-spec.rotate_deg, spec.rotate_deg);
      const double gain = 1.0 + rng.uniform(-spec.brightness, spec.brightness);
      const Warp<double> warp(h, w, params, Border::replicate);
      std::vector<double> moved(plane);
      warp.apply(base.data(), moved.data(), ch);
      float* dst = ds.images.data() + ds.labels.size() * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = moved[i] * gain + spec.noise_sigma * rng.normal();
        dst[i] = static_cast<float>(std::clamp(std::round(v), 0.0, 255.0));
      }
      ds.labels.push_back(id);
    }
  }
  return ds;
}

struct DatasetSplit {
  std::vector<std::vector<std::size_t>> pools;  // surrogate-train, target-train, eval-pairs by convention
  std::uint64_t seed{};
};

inline nlohmann::json to_json(const DatasetSplit& s) { return {{"pools", s.pools}, {"seed", s.seed}}; }

/// Random partition of identity ids into pools with the given fractions
/// (largest-remainder rounding; pools sorted ascending).
inline DatasetSplit split_identities(std::size_t identities, const std::vector<double>& fractions,
                                     std::uint64_t seed) {
  require(!fractions.empty(), Errc::invalid_argument, "no split fractions");
  double total = 0.0;
  for (double f : fractions) {
    require(f >= 0.0, Errc::invalid_argument, "negative split fraction");
    total += f;
  }
  require(std::abs(total - 1.0) < 1e-9, Errc::invalid_argument, "split fractions must sum to 1");
  std::vector<std::size_t> sizes(fractions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = fractions[i] * static_cast<double>(identities);
    sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    assigned += sizes[i];
    remainders.emplace_back(exact - static_cast<double>(sizes[i]), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < identities; ++i, ++assigned) ++sizes[remainders[i % remainders.size()].second];
  for (std::size_t i = 0; i < sizes.size(); ++i)
    require(sizes[i] > 0, Errc::insufficient_data, "split pool " + std::to_string(i) + " would be empty");

  std::vector<std::size_t> ids(identities);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {0x73706c6974ULL}));
  rng.shuffle(ids.begin(), ids.end());
  DatasetSplit split;
  split.seed = seed;
  std::size_t pos = 0;
  for (std::size_t size : sizes) {
    std::vector<std::size_t> pool(ids.begin() + static_cast<std::ptrdiff_t>(pos),
                                  ids.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(pool.begin(), pool.end());
    split.pools.push_back(std::move(pool));
    pos += size;
  }
  return split;
}

struct PairEntry {
  std::string a;
  std::string b;
  bool same{};
};

struct PairList {
  std::vector<PairEntry> entries;
  std::uint64_t seed{};

  std::size_t positives() const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.same; }));
  }
  std::size_t negatives() const { return entries.size() - positives(); }
};

namespace detail {

inline std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(
    std::vector<std::pair<std::size_t, std::size_t>> candidates, std::size_t n, Rng& rng, const char* what) {
  require(candidates.size() >= n, Errc::insufficient_data,
          std::string("requested ") + std::to_string(n) + " " + what + " pairs, only " +
              std::to_string(candidates.size()) + " available");
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(candidates.size() - i));
    std::swap(candidates[i], candidates[j]);
  }
  candidates.resize(n);
  return candidates;
}

}  // namespace detail

/// Verification pairs drawn without replacement from the images of `pool`.
/// Positives come first, then negatives.
inline PairList pairs_from_split(const Dataset& ds, const std::vector<std::size_t>& pool, std::size_t n_pos,
                                 std::size_t n_neg, std::uint64_t seed) {
  const std::vector<std::size_t> rows = ds.rows_of(pool);
  std::vector<std::pair<std::size_t, std::size_t>> pos, neg;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j)
      (ds.labels[rows[i]] == ds.labels[rows[j]] ? pos : neg).emplace_back(rows[i], rows[j]);
  Rng rng(derive_seed(seed, {0x7061697273ULL}));
  PairList list;
  list.seed = seed;
  for (auto [a, b] : detail::sample_pairs(std::move(pos), n_pos, rng, "positive"))
    list.entries.push_back({ds.ref(a), ds.ref(b), true});
  for (auto [a, b] : detail::sample_pairs(std::move(neg), n_neg, rng, "negative"))
    list.entries.push_back({ds.ref(a), ds.ref(b), false});
  return list;
}

/// Impersonation pairs: the pool's identities are halved into source and target
/// identities; n_src source images x n_tgt target images, every entry negative.
inline PairList impersonation_pairs(const Dataset& ds, const std::vector<std::size_t>& pool, std::size_t n_src,
                                    std::size_t n_tgt, std::uint64_t seed) {
  require(pool.size() >= 2, Errc::insufficient_data, "impersonation pairs need at least two identities");
  Rng rng(derive_seed(seed, {0x696d7065ULL}));
  std::vector<std::size_t> ids = pool;
  rng.shuffle(ids.begin(), ids.end());
  const std::size_t half = ids.size() / 2;
  std::vector<std::size_t> src_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(half));
  std::vector<std::size_t> tgt_ids(ids.begin() + static_cast<std::ptrdiff_t>(half), ids.end());
  auto pick = [&](std::vector<std::size_t> identities, std::size_t n) {
    std::sort(identities.begin(), identities.end());
    std::vector<std::size_t> rows = ds.rows_of(identities);
    require(rows.size() >= n, Errc::insufficient_data, "not enough images for impersonation pairs");
    // Round-robin over identities so every identity contributes.
    std::vector<std::vector<std::size_t>> per(identities.size());
    for (std::size_t i = 0; i < identities.size(); ++i) {
      per[i] = ds.rows_of({identities[i]});
      rng.shuffle(per[i].begin(), per[i].end());
    }
    std::vector<std::size_t> out;
    for (std::size_t k = 0; out.size() < n; ++k)
      for (std::size_t i = 0; i < per.size() && out.size() < n; ++i)
        if (k < per[i].size()) out.push_back(per[i][k]);
    return out;
  };
  const auto srcs = pick(src_ids, n_src);
  const auto tgts = pick(tgt_ids, n_tgt);
  PairList list;
  list.seed = seed;
  for (std::size_t s : srcs)
    for (std::size_t t : tgts) list.entries.push_back({ds.ref(s), ds.ref(t), false});
  return list;
}

/// CSV: pathA,pathB,same(0|1), no header.
inline void write_pairs_csv(const PairList& list, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  require(static_cast<bool>(os), Errc::io, "cannot write " + path.string());
  for (const auto& e : list.entries) os << e.a << ',' << e.b << ',' << (e.same ? 1 : 0) << '\n';
}

inline PairList read_pairs_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), Errc::io, "cannot open " + path.string());
  PairList list;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    PairEntry e;
    std::string flag;
    if (!std::getline(ss, e.a, ',') || !std::getline(ss, e.b, ',') || !std::getline(ss, flag, ',') ||
        (flag != "0" && flag != "1"))
      fail(Errc::io, path.string() + ":" + std::to_string(lineno) + ": expected pathA,pathB,same(0|1)");
    require(e.a != e.b, Errc::invalid_argument, path.string() + ":" + std::to_string(lineno) + ": image paired with itself");
    e.same = flag == "1";
    list.entries.push_back(std::move(e));
  }
  return list;
}

/// Writes PNGs under dir/images and the manifest dir/dataset.json.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  nlohmann::json manifest;
  manifest["spec"] = to_json(ds.spec);
  nlohmann::json identities = nlohmann::json::array();
  for (std::size_t id = 0; id < ds.spec.identities; ++id) {
    nlohmann::json paths = nlohmann::json::array();
    for (std::size_t k = 0; k < ds.spec.per_identity; ++k) {
      const std::size_t i = ds.index(id, k);
      const std::filesystem::path p = dir / ds.ref(i);
      std::filesystem::create_directories(p.parent_path());
      write_image(ds.image(i), p);
      paths.push_back(ds.ref(i));
    }
    identities.push_back({{"id", id}, {"images", paths}});
  }
  manifest["identities"] = identities;
  std::ofstream os(dir / "dataset.json", std::ios::trunc);
  require(static_cast<bool>(os), Errc::io, "cannot write dataset manifest");
  os << manifest.dump(2) << '\n';
}

/// Loads a dataset written by write_dataset (pixels are read back from the PNGs).
inline Dataset read_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  require(static_cast<bool>(is), Errc::io, "cannot open " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::io, "bad dataset manifest: " + std::string(e.what()));
  }
  Dataset ds;
  ds.spec = synthetic_spec_from_json(manifest.at("spec"));
  const auto dir = manifest_path.parent_path();
  ds.images = Tensor<float>({ds.spec.identities * ds.spec.per_identity, ds.spec.channels, ds.spec.height, ds.spec.width});
  const std::size_t per = ds.images.sample_size();
  for (const auto& ident : manifest.at("identities")) {
    const std::size_t id = ident.at("id").get<std::size_t>();
    const auto& paths = ident.at("images");
    require(paths.size() == ds.spec.per_identity, Errc::io, "identity image count disagrees with spec");
    for (std::size_t k = 0; k < paths.size(); ++k) {
      Tensor<float> img = read_image(dir / paths[k].get<std::string>());
      require(img.size() == per, Errc::shape_mismatch, "image geometry disagrees with spec");
      std::copy_n(img.data(), per, ds.images.data() + ds.index(id, k) * per);
    }
  }
  ds.labels.resize(ds.spec.identities * ds.spec.per_identity);
  for (std::size_t i = 0; i < ds.labels.size(); ++i) ds.labels[i] = i / ds.spec.per_identity;
  return ds;
}

}  // namespace fsal
