#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "sgg/pipeline.hpp"
#include "sgg/threadpool.hpp"

namespace sgg {

// Logical Bias Learning: counterfactual scoring of every object pair,
// student/teacher total-direct-effect logits, a variance-gated uncertainty
// test, and the re-ranking rule on the final logits.
//
// Student:  Y_S = Y_{x,z,w} - Y_{x-bar,z,w}      (vision-only effect)
// Teacher:  Y_T = Y_{x,z,w} - Y_{x-bar,z-bar,w}  (vision + class effect)
// Gate:     top-K softmax variance of Y_S below the calibrated training
//           mean means "uncertain" -> re-rank the top-K of Y_S by Y_T.

struct CounterfactualScores {
  std::vector<float> y_xzw;         // factual: vision + class + bbox
  std::vector<float> y_xbar_zw;     // vision masked
  std::vector<float> y_xbar_zbar_w; // vision and class masked
};

enum class BaselineMode { TrainingMean, Zero };

struct InterventionBaseline {
  Tensor<float> x_bar;  // [4096] mean enhanced visual feature
  Tensor<float> z_bar;  // [300] mean class embedding
};

struct LblConfig {
  size_t k = 3;
  double v_threshold = 0.0;
  InterventionBaseline baselines;
};

// Arithmetic means of the training objects' visual features (enhanced when
// the model has an OEM, raw flattened otherwise) and class embeddings.
// Computed once after training and frozen.
inline InterventionBaseline compute_baselines(SggModel<float>& M, const Dataset& ds,
                                              BaselineMode mode = BaselineMode::TrainingMean,
                                              size_t max_images = 0) {
  require<ValidationError>(!ds.records.empty(), "compute_baselines: empty dataset");
  InterventionBaseline out;
  out.x_bar = Tensor<float>({kEnhancedDim});
  out.z_bar = Tensor<float>({kClassEmbedDim});
  if (mode == BaselineMode::Zero) return out;

  const size_t n_images =
      max_images == 0 ? ds.records.size() : std::min(max_images, ds.records.size());
  std::vector<std::vector<double>> ximg(n_images), zimg(n_images);
  std::vector<size_t> counts(n_images, 0);
  parallel_for(n_images, [&](size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; ++i) {
      const auto& rec = ds.records[i];
      SceneInputs scene = SceneInputs::ground_truth(rec);
      const size_t O = rec.objects.size();
      Tape<float> tape;
      Var maps = tape.leaf(pipe_detail::maps_tensor<float>(rec));
      Var fts = tape.leaf(pipe_detail::class_embed_tensor<float>(M.embeddings,
                                                                 scene.input_classes));
      auto vision = vision_features(tape, M, maps, fts, O);
      const auto& feats = tape.val(vision.features);
      const auto& f = tape.val(fts);
      ximg[i].assign(kEnhancedDim, 0.0);
      zimg[i].assign(kClassEmbedDim, 0.0);
      for (size_t o = 0; o < O; ++o) {
        for (size_t j = 0; j < kEnhancedDim; ++j)
          ximg[i][j] += double(feats[o * kEnhancedDim + j]);
        for (size_t j = 0; j < kClassEmbedDim; ++j)
          zimg[i][j] += double(f[o * kClassEmbedDim + j]);
      }
      counts[i] = O;
    }
  });
  std::vector<double> xsum(kEnhancedDim, 0.0), zsum(kClassEmbedDim, 0.0);
  size_t total = 0;
  for (size_t i = 0; i < n_images; ++i) {
    for (size_t j = 0; j < kEnhancedDim; ++j) xsum[j] += ximg[i][j];
    for (size_t j = 0; j < kClassEmbedDim; ++j) zsum[j] += zimg[i][j];
    total += counts[i];
  }
  require<ValidationError>(total > 0, "compute_baselines: dataset has no objects");
  for (size_t j = 0; j < kEnhancedDim; ++j) out.x_bar[j] = float(xsum[j] / double(total));
  for (size_t j = 0; j < kClassEmbedDim; ++j) out.z_bar[j] = float(zsum[j] / double(total));
  return out;
}

// Three relation-head passes per pair. Pass 1 is the plain factual forward.
// Pass 2 replaces both pair objects' visual features with x-bar; pass 3
// additionally replaces both class embeddings with z-bar. Bounding boxes
// and the (factual) union features are left untouched in every pass, and
// the context encoder is re-run per pass since it mixes all objects.
//
// All 1+2P passes are stacked row-wise into single embedding/decoder GEMMs
// so the big weight matrices stream once per scene instead of once per
// pass; each pass keeps its own context encoding. Row-independent kernels
// make the batched results bitwise equal to pass-at-a-time evaluation.
inline std::vector<CounterfactualScores> score_counterfactuals(
    SggModel<float>& M, const SceneInputs& scene, const std::vector<OrderedPair>& pairs,
    const InterventionBaseline& baselines) {
  const size_t O = scene.rec->objects.size();
  const size_t P = pairs.size();
  std::vector<CounterfactualScores> out(P);
  if (P == 0) return out;

  // vision runs once; interventions substitute its outputs
  Tensor<float> enhanced;
  {
    Tape<float> tape;
    Var maps = tape.leaf(pipe_detail::maps_tensor<float>(*scene.rec));
    Var fts = tape.leaf(
        pipe_detail::class_embed_tensor<float>(M.embeddings, scene.input_classes));
    auto vision = vision_features(tape, M, maps, fts, O);
    enhanced = tape.val(vision.features).clone();
  }
  Tensor<float> fts_plain =
      pipe_detail::class_embed_tensor<float>(M.embeddings, scene.input_classes);
  Tensor<float> umaps = union_maps_tensor<float>(scene, pairs);

  // variant blocks: 0 = factual, 1+p = pass 2 of pair p, 1+P+p = pass 3
  const size_t variants = 1 + 2 * P;
  Tensor<float> vf_all({variants * O, kEnhancedDim});
  Tensor<float> ft_all({variants * O, kClassEmbedDim});
  for (size_t v = 0; v < variants; ++v) {
    std::copy(enhanced.data(), enhanced.data() + enhanced.size(),
              vf_all.data() + v * O * kEnhancedDim);
    std::copy(fts_plain.data(), fts_plain.data() + fts_plain.size(),
              ft_all.data() + v * O * kClassEmbedDim);
  }
  for (size_t p = 0; p < P; ++p) {
    const size_t rows[2] = {size_t(pairs[p].subject), size_t(pairs[p].object)};
    for (size_t which = 0; which < 2; ++which) {
      float* vf2 = vf_all.data() + (1 + p) * O * kEnhancedDim;
      float* vf3 = vf_all.data() + (1 + P + p) * O * kEnhancedDim;
      for (size_t j = 0; j < kEnhancedDim; ++j) {
        vf2[rows[which] * kEnhancedDim + j] = baselines.x_bar[j];
        vf3[rows[which] * kEnhancedDim + j] = baselines.x_bar[j];
      }
      float* ft3 = ft_all.data() + (1 + P + p) * O * kClassEmbedDim;
      for (size_t j = 0; j < kClassEmbedDim; ++j)
        ft3[rows[which] * kClassEmbedDim + j] = baselines.z_bar[j];
    }
  }
  Tensor<float> nbox1 = normalized_boxes<float>(scene.boxes, scene.width, scene.height);
  Tensor<float> nbox_all({variants * O, 4});
  for (size_t v = 0; v < variants; ++v)
    std::copy(nbox1.data(), nbox1.data() + nbox1.size(), nbox_all.data() + v * O * 4);

  Tape<float> tape;
  Var embeds = embed_objects(tape, M.rel, tape.leaf(std::move(vf_all)),
                             tape.leaf(std::move(ft_all)), tape.leaf(std::move(nbox_all)));
  std::vector<Var> ctxs;
  for (size_t v = 0; v < variants; ++v) {
    std::vector<size_t> idx(O);
    for (size_t i = 0; i < O; ++i) idx[i] = v * O + i;
    ctxs.push_back(encode_context(tape, M.rel, gather_rows(tape, embeds, idx),
                                  scene.boxes));
  }
  Var ctx_all = concat_rows(tape, ctxs);

  // pair rows: P factual, then one per pass-2 variant, one per pass-3
  std::vector<size_t> sidx, oidx, uidx;
  for (size_t p = 0; p < P; ++p) {
    sidx.push_back(size_t(pairs[p].subject));
    oidx.push_back(size_t(pairs[p].object));
    uidx.push_back(p);
  }
  for (size_t v = 0; v < 2 * P; ++v) {
    const size_t p = v < P ? v : v - P;
    sidx.push_back((1 + v) * O + size_t(pairs[p].subject));
    oidx.push_back((1 + v) * O + size_t(pairs[p].object));
    uidx.push_back(p);
  }
  Var ufeat = union_features(tape, M.rel, tape.leaf(std::move(umaps)), P);
  Var urows = gather_rows(tape, ufeat, uidx);
  Var subj = gather_rows(tape, ctx_all, sidx);
  Var obj = gather_rows(tape, ctx_all, oidx);
  Var logits = relation_logits(tape, M.rel, subj, obj, urows);
  const auto& Z = tape.val(logits);
  const size_t N = Z.cols();
  for (size_t p = 0; p < P; ++p) {
    out[p].y_xzw.assign(Z.data() + p * N, Z.data() + (p + 1) * N);
    out[p].y_xbar_zw.assign(Z.data() + (P + p) * N, Z.data() + (P + p + 1) * N);
    out[p].y_xbar_zbar_w.assign(Z.data() + (2 * P + p) * N, Z.data() + (2 * P + p + 1) * N);
  }
  return out;
}

// TDE without logic (student): Y_S = Y_{x,z,w} - Y_{x-bar,z,w}, elementwise
// on logits, in 64-bit.
inline std::vector<double> tde_student(const CounterfactualScores& s) {
  require<ValidationError>(s.y_xzw.size() == s.y_xbar_zw.size(),
                           "tde_student: score lengths differ");
  std::vector<double> out(s.y_xzw.size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = double(s.y_xzw[i]) - double(s.y_xbar_zw[i]);
  return out;
}

// TDE with logic (teacher): Y_T = Y_{x,z,w} - Y_{x-bar,z-bar,w}.
inline std::vector<double> tde_teacher(const CounterfactualScores& s) {
  require<ValidationError>(s.y_xzw.size() == s.y_xbar_zbar_w.size(),
                           "tde_teacher: score lengths differ");
  std::vector<double> out(s.y_xzw.size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = double(s.y_xzw[i]) - double(s.y_xbar_zbar_w[i]);
  return out;
}

inline std::vector<double> softmax_vec(std::span<const double> logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double denom = 0.0;
  std::vector<double> p(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) denom += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= denom;
  return p;
}

// Ranking order by descending value, ties broken by lower index.
inline std::vector<int> descending_order(std::span<const double> v) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (v[size_t(a)] != v[size_t(b)]) return v[size_t(a)] > v[size_t(b)];
    return a < b;
  });
  return idx;
}

// Population variance of the K largest softmax probabilities of the logits
// (ties in the top-K broken by lower index).
inline double topk_variance(std::span<const double> logits, size_t k) {
  require<ValidationError>(k >= 2, "topk_variance: K must be >= 2");
  require<ValidationError>(k <= logits.size(), "topk_variance: K=", k, " exceeds N=",
                           logits.size());
  const auto probs = softmax_vec(logits);
  auto order = descending_order(probs);
  double mean = 0.0;
  for (size_t i = 0; i < k; ++i) mean += probs[size_t(order[i])];
  mean /= double(k);
  double var = 0.0;
  for (size_t i = 0; i < k; ++i) {
    const double d = probs[size_t(order[i])] - mean;
    var += d * d;
  }
  return var / double(k);
}

// Calibrated gate threshold: the mean student top-K variance over every
// ordered pair of the (optionally capped) training set, with frozen
// baselines.
inline double calibrate_threshold(SggModel<float>& M, const Dataset& ds, size_t k,
                                  const InterventionBaseline& baselines,
                                  size_t max_images = 0) {
  require<ValidationError>(!ds.records.empty(), "calibrate_threshold: empty dataset");
  const size_t n_images =
      max_images == 0 ? ds.records.size() : std::min(max_images, ds.records.size());
  std::vector<double> sums(n_images, 0.0);
  std::vector<size_t> counts(n_images, 0);
  parallel_for(n_images, [&](size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; ++i) {
      const auto& rec = ds.records[i];
      if (rec.objects.size() < 2) continue;
      SceneInputs scene = SceneInputs::ground_truth(rec);
      auto pairs = all_ordered_pairs(rec.objects.size());
      auto scores = score_counterfactuals(M, scene, pairs, baselines);
      for (const auto& s : scores) {
        sums[i] += topk_variance(tde_student(s), k);
        counts[i]++;
      }
    }
  });
  double total = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < n_images; ++i) {
    total += sums[i];
    n += counts[i];
  }
  require<ValidationError>(n > 0, "calibrate_threshold: no object pairs");
  return total / double(n);
}

struct RankedPredicate {
  int predicate_id = 0;
  double rank_score = 0.0;
};

// Eq.-7 prediction rule. Certain (V^K_p >= V^K): the ranking is Y_S
// descending. Uncertain: the K best Y_S entries are re-ordered by Y_T
// (restricted to that set) and the tail keeps its Y_S order. Rank scores
// are positional so downstream top-K extraction follows the final order.
// Ties break toward the lower predicate index everywhere.
inline std::vector<RankedPredicate> lbl_predict(const CounterfactualScores& s,
                                                const LblConfig& cfg) {
  const auto ys = tde_student(s);
  const size_t n = ys.size();
  require<ValidationError>(cfg.k >= 2 && cfg.k <= n, "lbl_predict: invalid K=", cfg.k);
  require<ValidationError>(cfg.v_threshold >= 0, "lbl_predict: negative threshold");
  auto order = descending_order(ys);
  const double vkp = topk_variance(ys, cfg.k);
  if (vkp < cfg.v_threshold) {
    const auto yt = tde_teacher(s);
    std::stable_sort(order.begin(), order.begin() + long(cfg.k), [&](int a, int b) {
      if (yt[size_t(a)] != yt[size_t(b)]) return yt[size_t(a)] > yt[size_t(b)];
      return a < b;
    });
  }
  std::vector<RankedPredicate> out(n);
  for (size_t pos = 0; pos < n; ++pos)
    out[pos] = RankedPredicate{order[pos], double(n - pos)};
  return out;
}

// Calibration artifact: K, threshold and both baselines, in the checkpoint
// binary convention (K is stored as a scalar float).
inline void save_calibration(const LblConfig& cfg, const std::string& path) {
  ParamStore<float> s(0);
  s.create("lbl.k", {1}, Init::Zero).value[0] = float(cfg.k);
  s.create("lbl.v_threshold", {1}, Init::Zero).value[0] = float(cfg.v_threshold);
  auto& xb = s.create("lbl.x_bar", {kEnhancedDim}, Init::Zero);
  for (size_t i = 0; i < kEnhancedDim; ++i) xb.value[i] = cfg.baselines.x_bar[i];
  auto& zb = s.create("lbl.z_bar", {kClassEmbedDim}, Init::Zero);
  for (size_t i = 0; i < kClassEmbedDim; ++i) zb.value[i] = cfg.baselines.z_bar[i];
  s.save(path);
}

inline LblConfig load_calibration(const std::string& path) {
  ParamStore<float> s(0);
  auto& k = s.create("lbl.k", {1}, Init::Zero);
  auto& vt = s.create("lbl.v_threshold", {1}, Init::Zero);
  auto& xb = s.create("lbl.x_bar", {kEnhancedDim}, Init::Zero);
  auto& zb = s.create("lbl.z_bar", {kClassEmbedDim}, Init::Zero);
  s.load(path);
  LblConfig cfg;
  cfg.k = size_t(k.value[0]);
  cfg.v_threshold = double(vt.value[0]);
  cfg.baselines.x_bar = Tensor<float>({kEnhancedDim});
  cfg.baselines.z_bar = Tensor<float>({kClassEmbedDim});
  for (size_t i = 0; i < kEnhancedDim; ++i) cfg.baselines.x_bar[i] = xb.value[i];
  for (size_t i = 0; i < kClassEmbedDim; ++i) cfg.baselines.z_bar[i] = zb.value[i];
  require<ValidationError>(cfg.k >= 2, "calibration artifact: K must be >= 2");
  require<ValidationError>(cfg.v_threshold >= 0,
                           "calibration artifact: negative threshold");
  return cfg;
}

}  // namespace sgg
