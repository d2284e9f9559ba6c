#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sgg/config.hpp"
#include "sgg/model.hpp"
#include "sgg/random.hpp"

namespace sgg {

// Synthetic long-tail scene generator. The world is built so that the two
// bias ingredients are actually present in the data:
//  - the rank-1 predicate is cheap: it dominates the label distribution
//    (Zipf prior) and its instances follow a canonical box arrangement, so
//    it is predictable from geometry alone;
//  - tail predicates are expensive: boxes are placed at random and the only
//    per-instance evidence is a predicate-specific cue pattern stamped into
//    both objects' feature maps, competing with noise and clutter patches.
// Class pairs restrict which predicates are plausible (the compat table),
// which is the knowledge the teacher scores can exploit.
struct WorldSpec {
  size_t num_classes = 10;      // p
  size_t num_predicates = 11;   // N, index 0 reserved for background
  double zipf_s = 1.5;
  uint64_t seed = 1;
  size_t num_images = 500;
  size_t objects_per_image = 3;
  size_t max_triplets = 2;
  double image_size = 256.0;

  double prototype_scale = 1.0;
  double feature_noise = 0.45;
  double cue_scale = 1.4;
  size_t cue_patches = 3;
  double clutter_scale = 0.7;
  size_t clutter_patches = 3;
  size_t tail_support_min = 2;
  size_t tail_support_max = 4;

  // Derived tables (build_world): per ordered class pair a probability
  // distribution over its plausible predicates, plus its support list.
  std::vector<std::vector<int>> compat_support;      // [p*p] -> predicate ids
  std::vector<std::vector<double>> compat_probs;     // [p*p] -> matching probs
  std::vector<std::vector<int>> predicate_pairs;     // [N] -> supporting pair ids
  std::vector<std::vector<float>> prototypes;        // [p] 8x8 patterns
  std::vector<std::vector<float>> cues;              // [N] 8x8 patterns
  bool built = false;
};

namespace synth_detail {

inline std::vector<double> zipf_weights(size_t num_predicates, double s) {
  std::vector<double> w(num_predicates, 0.0);  // index 0 (background) stays 0
  for (size_t r = 1; r < num_predicates; ++r) w[r] = std::pow(double(r), -s);
  return w;
}

inline int sample_discrete(Rng& rng, const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = rng.uniform() * total;
  for (size_t i = 0; i < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0) return int(i);
  }
  return int(weights.size() - 1);
}

inline std::vector<float> pattern(Rng rng, size_t n, double scale) {
  std::vector<float> v(n);
  for (auto& x : v) x = float(rng.normal(0.0, scale));
  return v;
}

}  // namespace synth_detail

inline void build_world(WorldSpec& spec) {
  require<ValidationError>(spec.num_classes >= 2, "world: num_classes must be >= 2");
  require<ValidationError>(spec.num_predicates >= 3, "world: num_predicates must be >= 3");
  require<ValidationError>(spec.zipf_s > 0, "world: zipf_s must be > 0");
  require<ValidationError>(spec.objects_per_image >= 2, "world: objects_per_image must be >= 2");
  const size_t p = spec.num_classes, N = spec.num_predicates;
  Rng root(spec.seed);

  spec.prototypes.assign(p, {});
  for (size_t c = 0; c < p; ++c)
    spec.prototypes[c] = synth_detail::pattern(root.fork(fnv1a64("proto") + c),
                                               kPatchDim, spec.prototype_scale);
  spec.cues.assign(N, {});
  for (size_t r = 1; r < N; ++r)
    spec.cues[r] =
        synth_detail::pattern(root.fork(fnv1a64("cue") + r), kPatchDim, 1.0);

  const auto zw = synth_detail::zipf_weights(N, spec.zipf_s);
  spec.compat_support.assign(p * p, {});
  spec.compat_probs.assign(p * p, {});
  spec.predicate_pairs.assign(N, {});
  require<ValidationError>(spec.tail_support_min >= 1 &&
                               spec.tail_support_max >= spec.tail_support_min &&
                               spec.tail_support_max <= N - 2,
                           "world: tail support range infeasible for N=", N);
  for (size_t a = 0; a < p; ++a) {
    for (size_t b = 0; b < p; ++b) {
      Rng rng = root.fork(fnv1a64("compat") + a * p + b);
      const size_t ntail =
          spec.tail_support_min +
          rng.below(spec.tail_support_max - spec.tail_support_min + 1);
      std::vector<int> support = {1};  // rank-1 head predicate everywhere
      std::vector<char> used(N, 0);
      used[1] = 1;
      while (support.size() < 1 + ntail) {
        const int r = 2 + int(rng.below(N - 2));
        if (used[r]) continue;
        used[r] = 1;
        support.push_back(r);
      }
      std::sort(support.begin() + 1, support.end());
      double z = 0.0;
      for (int r : support) z += zw[size_t(r)];
      std::vector<double> probs;
      for (int r : support) probs.push_back(zw[size_t(r)] / z);
      const size_t pair_id = a * p + b;
      spec.compat_support[pair_id] = support;
      spec.compat_probs[pair_id] = std::move(probs);
      for (int r : support) spec.predicate_pairs[size_t(r)].push_back(int(pair_id));
    }
  }
  for (size_t r = 1; r < N; ++r)
    require<ValidationError>(!spec.predicate_pairs[r].empty(),
                             "world: predicate ", r, " has no supporting class pair");
  spec.built = true;
}

namespace synth_detail {

inline void add_patch(Tensor<float>& map, size_t patch_row, size_t patch_col,
                      const std::vector<float>& pat, double amp) {
  for (size_t y = 0; y < kPatchSide; ++y)
    for (size_t x = 0; x < kPatchSide; ++x)
      map[(patch_row * kPatchSide + y) * kFeatureSide + patch_col * kPatchSide + x] +=
          float(amp) * pat[y * kPatchSide + x];
}

inline Tensor<float> base_feature_map(const WorldSpec& spec, int class_id, Rng& rng) {
  Tensor<float> map({kFeatureSide, kFeatureSide});
  const auto& proto = spec.prototypes[size_t(class_id)];
  for (size_t y = 0; y < kFeatureSide; ++y)
    for (size_t x = 0; x < kFeatureSide; ++x)
      map[y * kFeatureSide + x] =
          proto[(y % kPatchSide) * kPatchSide + (x % kPatchSide)] +
          float(rng.normal(0.0, spec.feature_noise));
  // clutter: other predicates' patterns at reduced amplitude
  const size_t blocks = kFeatureSide / kPatchSide;
  for (size_t i = 0; i < spec.clutter_patches; ++i) {
    const size_t r = 1 + rng.below(spec.num_predicates - 1);
    add_patch(map, rng.below(blocks), rng.below(blocks), spec.cues[r],
              spec.clutter_scale);
  }
  return map;
}

inline void stamp_cue(const WorldSpec& spec, Tensor<float>& map, int predicate, Rng& rng) {
  const size_t blocks = kFeatureSide / kPatchSide;
  for (size_t i = 0; i < spec.cue_patches; ++i)
    add_patch(map, rng.below(blocks), rng.below(blocks),
              spec.cues[size_t(predicate)], spec.cue_scale);
}

inline BBox random_box(Rng& rng, double S) {
  const double w = rng.uniform(0.14, 0.34) * S;
  const double h = rng.uniform(0.14, 0.34) * S;
  const double x0 = rng.uniform(0.0, S - w);
  const double y0 = rng.uniform(0.0, S - h);
  return BBox{x0, y0, x0 + w, y0 + h};
}

// Canonical head arrangement: subject sits above the object with horizontal
// overlap and a small vertical gap. This is what makes the head predicate
// recoverable from geometry alone.
inline std::pair<BBox, BBox> head_arrangement(Rng& rng, double S) {
  const double wo = rng.uniform(0.16, 0.32) * S;
  const double ho = rng.uniform(0.14, 0.26) * S;
  const double ws = rng.uniform(0.16, 0.32) * S;
  const double hs = rng.uniform(0.14, 0.26) * S;
  const double oxc = rng.uniform(0.25 * S, 0.75 * S);
  const double oyc = rng.uniform(0.55 * S, 0.8 * S);
  const double sxc = oxc + rng.uniform(-0.25, 0.25) * wo;
  const double gap = rng.uniform(0.01, 0.05) * S;
  const double syc = oyc - ho / 2 - gap - hs / 2;
  auto clampbox = [&](double xc, double yc, double w, double h) {
    double x0 = std::max(0.0, std::min(xc - w / 2, S - w));
    double y0 = std::max(0.0, std::min(yc - h / 2, S - h));
    return BBox{x0, y0, x0 + w, y0 + h};
  };
  return {clampbox(sxc, syc, ws, hs), clampbox(oxc, oyc, wo, ho)};
}

}  // namespace synth_detail

// Deterministic generation: per-image streams are forked from the world
// seed by image index, so the dataset is reproducible bit-for-bit and
// independent of any parallel evaluation order.
inline Dataset generate(const WorldSpec& spec_in, size_t num_images,
                        size_t objects_per_image) {
  WorldSpec spec = spec_in;
  if (!spec.built) build_world(spec);
  require<ValidationError>(objects_per_image >= 2,
                           "generate: objects_per_image must be >= 2");
  Dataset ds;
  for (size_t c = 0; c < spec.num_classes; ++c) ds.class_names.push_back(cat("class_", c));
  ds.predicate_names.push_back("__background__");
  for (size_t r = 1; r < spec.num_predicates; ++r)
    ds.predicate_names.push_back(cat("rel_", r));

  Rng root(spec.seed);
  const double S = spec.image_size;
  for (size_t img = 0; img < num_images; ++img) {
    Rng rng = root.fork(fnv1a64("image") + img);
    ImageRecord rec;
    rec.image_id = cat("synth_", img);
    rec.width = S;
    rec.height = S;

    const size_t max_t = std::min(spec.max_triplets, objects_per_image / 2);
    const size_t T = 1 + rng.below(std::max<size_t>(max_t, 1));
    struct Pending {
      int subj_class, obj_class, predicate;
      BBox sb, ob;
    };
    std::vector<Pending> pend;
    const auto zw = synth_detail::zipf_weights(spec.num_predicates, spec.zipf_s);
    for (size_t ti = 0; ti < T; ++ti) {
      const int r = synth_detail::sample_discrete(rng, zw);
      const auto& pairs = spec.predicate_pairs[size_t(r)];
      const int pair_id = pairs[rng.below(pairs.size())];
      const int a = pair_id / int(spec.num_classes);
      const int b = pair_id % int(spec.num_classes);
      BBox sb, ob;
      if (r == 1) {
        auto boxes = synth_detail::head_arrangement(rng, S);
        sb = boxes.first;
        ob = boxes.second;
      } else {
        sb = synth_detail::random_box(rng, S);
        ob = synth_detail::random_box(rng, S);
      }
      pend.push_back(Pending{a, b, r, sb, ob});
    }

    // realize objects: two per triplet plus unrelated distractors
    for (const auto& pd : pend) {
      ObjectInstance subj, obj;
      subj.class_id = pd.subj_class;
      subj.bbox = pd.sb;
      subj.feature_map = synth_detail::base_feature_map(spec, pd.subj_class, rng);
      synth_detail::stamp_cue(spec, subj.feature_map, pd.predicate, rng);
      obj.class_id = pd.obj_class;
      obj.bbox = pd.ob;
      obj.feature_map = synth_detail::base_feature_map(spec, pd.obj_class, rng);
      synth_detail::stamp_cue(spec, obj.feature_map, pd.predicate, rng);
      const int si = int(rec.objects.size());
      rec.objects.push_back(std::move(subj));
      rec.objects.push_back(std::move(obj));
      rec.gt_triplets.push_back(RelationTriplet{si, si + 1, pd.predicate});
    }
    while (rec.objects.size() < objects_per_image) {
      ObjectInstance d;
      d.class_id = int(rng.below(spec.num_classes));
      d.bbox = synth_detail::random_box(rng, S);
      d.feature_map = synth_detail::base_feature_map(spec, d.class_id, rng);
      rec.objects.push_back(std::move(d));
    }

    // shuffle object order so creation order leaks nothing
    std::vector<int> perm(rec.objects.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = int(i);
    for (size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<ObjectInstance> shuffled(rec.objects.size());
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) {
      shuffled[size_t(perm[i])] = std::move(rec.objects[i]);
      inv[i] = perm[i];
    }
    rec.objects = std::move(shuffled);
    for (auto& tr : rec.gt_triplets) {
      tr.subject_idx = inv[size_t(tr.subject_idx)];
      tr.object_idx = inv[size_t(tr.object_idx)];
    }
    ds.records.push_back(std::move(rec));
  }
  validate_dataset(ds);
  return ds;
}

inline std::vector<size_t> predicate_histogram(const Dataset& ds) {
  require<ValidationError>(!ds.records.empty(), "predicate_histogram: empty dataset");
  std::vector<size_t> counts(ds.num_predicates(), 0);
  for (const auto& rec : ds.records)
    for (const auto& tr : rec.gt_triplets) counts[size_t(tr.predicate_id)]++;
  return counts;
}

// Built-in presets. "tiny" keeps CI fast; "bench" is the acceptance-scale
// world.
inline WorldSpec tiny_world() {
  WorldSpec w;
  w.num_classes = 10;
  w.num_predicates = 11;
  w.num_images = 500;
  w.objects_per_image = 3;
  w.zipf_s = 1.5;
  w.seed = 7;
  return w;
}

inline WorldSpec bench_world() {
  WorldSpec w;
  w.num_classes = 30;
  w.num_predicates = 21;
  w.num_images = 2000;
  w.objects_per_image = 3;
  w.zipf_s = 1.5;
  w.seed = 7;
  return w;
}

inline WorldSpec world_from_config(const KvConfig& cfg) {
  WorldSpec w;
  const std::string preset = cfg.get_string("world.preset", "");
  if (preset == "tiny")
    w = tiny_world();
  else if (preset == "bench")
    w = bench_world();
  else
    require<ValidationError>(preset.empty(), "unknown world.preset '", preset, "'");
  w.num_classes = size_t(cfg.get_int("world.classes", (long long)w.num_classes));
  w.num_predicates = size_t(cfg.get_int("world.predicates", (long long)w.num_predicates));
  w.zipf_s = cfg.get_double("world.zipf_s", w.zipf_s);
  w.seed = uint64_t(cfg.get_int("world.seed", (long long)w.seed));
  w.num_images = size_t(cfg.get_int("world.images", (long long)w.num_images));
  w.objects_per_image =
      size_t(cfg.get_int("world.objects_per_image", (long long)w.objects_per_image));
  w.max_triplets = size_t(cfg.get_int("world.max_triplets", (long long)w.max_triplets));
  w.image_size = cfg.get_double("world.image_size", w.image_size);
  w.prototype_scale = cfg.get_double("world.prototype_scale", w.prototype_scale);
  w.feature_noise = cfg.get_double("world.feature_noise", w.feature_noise);
  w.cue_scale = cfg.get_double("world.cue_scale", w.cue_scale);
  w.cue_patches = size_t(cfg.get_int("world.cue_patches", (long long)w.cue_patches));
  w.clutter_scale = cfg.get_double("world.clutter_scale", w.clutter_scale);
  w.clutter_patches =
      size_t(cfg.get_int("world.clutter_patches", (long long)w.clutter_patches));
  w.tail_support_min =
      size_t(cfg.get_int("world.tail_support_min", (long long)w.tail_support_min));
  w.tail_support_max =
      size_t(cfg.get_int("world.tail_support_max", (long long)w.tail_support_max));
  require<ValidationError>(w.zipf_s > 0, "config key 'world.zipf_s' must be > 0");
  return w;
}

inline std::string world_to_config_text(const WorldSpec& w) {
  std::ostringstream os;
  os << "[world]\n";
  os << "classes = " << w.num_classes << "\n";
  os << "predicates = " << w.num_predicates << "\n";
  os << "zipf_s = " << w.zipf_s << "\n";
  os << "seed = " << w.seed << "\n";
  os << "images = " << w.num_images << "\n";
  os << "objects_per_image = " << w.objects_per_image << "\n";
  os << "max_triplets = " << w.max_triplets << "\n";
  os << "image_size = " << w.image_size << "\n";
  os << "prototype_scale = " << w.prototype_scale << "\n";
  os << "feature_noise = " << w.feature_noise << "\n";
  os << "cue_scale = " << w.cue_scale << "\n";
  os << "cue_patches = " << w.cue_patches << "\n";
  os << "clutter_scale = " << w.clutter_scale << "\n";
  os << "clutter_patches = " << w.clutter_patches << "\n";
  os << "tail_support_min = " << w.tail_support_min << "\n";
  os << "tail_support_max = " << w.tail_support_max << "\n";
  return os.str();
}

}  // namespace sgg
