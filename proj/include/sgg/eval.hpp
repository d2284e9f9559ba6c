#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sgg/lbl.hpp"
#include "sgg/train.hpp"

namespace sgg {

// Task protocols and the metric stack: Recall@K / mean-Recall@K with the
// graph constraint (one predicate per ordered pair), greedy matching in
// rank order, exact-identity localization for PredCls/SGCls and IoU >= 0.5
// for SGDet.

enum class TaskProtocol { PredCls, SGCls, SGDet };
enum class Strategy { Plain, Tde, TdeLogic, Lbl };

inline const char* task_name(TaskProtocol t) {
  switch (t) {
    case TaskProtocol::PredCls: return "predcls";
    case TaskProtocol::SGCls: return "sgcls";
    default: return "sgdet";
  }
}

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Plain: return "plain";
    case Strategy::Tde: return "tde";
    case Strategy::TdeLogic: return "tde-logic";
    default: return "lbl";
  }
}

struct EvalOptions {
  TaskProtocol task = TaskProtocol::PredCls;
  double det_class_error = 0.2;  // detector simulation: class corruption rate
  double det_box_sigma = 0.05;   // box jitter, fraction of box size
  double iou_threshold = 0.5;    // SGDet localization match
  uint64_t seed = 1;
  std::vector<size_t> recall_ks = {20, 50, 100};
};

// Detector simulation. PredCls: ground-truth boxes and classes. SGCls:
// ground-truth boxes, corrupted classes. SGDet: jittered boxes, corrupted
// classes. Streams are forked per image, independent of evaluation order.
inline SceneInputs protocol_inputs(const ImageRecord& rec, size_t image_index,
                                   size_t num_classes, const EvalOptions& opt) {
  SceneInputs s = SceneInputs::ground_truth(rec);
  if (opt.task == TaskProtocol::PredCls) return s;
  Rng rng = Rng(opt.seed).fork(fnv1a64("detector") + image_index);
  for (size_t i = 0; i < s.input_classes.size(); ++i) {
    if (rng.uniform() < opt.det_class_error) {
      const int shift = 1 + int(rng.below(num_classes - 1));
      s.input_classes[i] = int((size_t(s.input_classes[i]) + size_t(shift)) % num_classes);
    }
  }
  if (opt.task == TaskProtocol::SGDet) {
    for (auto& b : s.boxes) {
      const double sx = opt.det_box_sigma * b.width();
      const double sy = opt.det_box_sigma * b.height();
      BBox j{b.xmin + rng.normal(0, sx), b.ymin + rng.normal(0, sy),
             b.xmax + rng.normal(0, sx), b.ymax + rng.normal(0, sy)};
      j.xmin = std::clamp(j.xmin, 0.0, rec.width - 1.0);
      j.ymin = std::clamp(j.ymin, 0.0, rec.height - 1.0);
      j.xmax = std::clamp(j.xmax, j.xmin + 1.0, rec.width);
      j.ymax = std::clamp(j.ymax, j.ymin + 1.0, rec.height);
      b = j;
    }
  }
  return s;
}

struct CandidateTriplet {
  int subject = 0, object = 0;
  int predicate = 0;
  int subject_class = 0, object_class = 0;
  BBox subject_box, object_box;
  double confidence = 0.0;
};

// Globally ranked candidates: descending confidence, stable ties by
// (subject, object).
inline std::vector<CandidateTriplet> rank_triplets(std::vector<CandidateTriplet> cands) {
  std::stable_sort(cands.begin(), cands.end(),
                   [](const CandidateTriplet& a, const CandidateTriplet& b) {
                     if (a.confidence != b.confidence) return a.confidence > b.confidence;
                     if (a.subject != b.subject) return a.subject < b.subject;
                     return a.object < b.object;
                   });
  return cands;
}

// Greedy top-K matching. A ground-truth triplet is hit when a top-K
// candidate carries the same predicate, matching subject/object classes and
// a localization match (pair identity, or IoU for SGDet). Each candidate
// consumes at most one ground-truth triplet.
inline std::vector<size_t> match_triplets(const ImageRecord& rec,
                                          const std::vector<CandidateTriplet>& ranked,
                                          size_t K, TaskProtocol task,
                                          double iou_threshold, size_t num_predicates) {
  std::vector<size_t> hits(num_predicates, 0);
  std::vector<char> matched(rec.gt_triplets.size(), 0);
  const size_t limit = std::min(K, ranked.size());
  for (size_t c = 0; c < limit; ++c) {
    const auto& cand = ranked[c];
    for (size_t g = 0; g < rec.gt_triplets.size(); ++g) {
      if (matched[g]) continue;
      const auto& gt = rec.gt_triplets[g];
      if (cand.predicate != gt.predicate_id) continue;
      const auto& gs = rec.objects[size_t(gt.subject_idx)];
      const auto& go = rec.objects[size_t(gt.object_idx)];
      if (cand.subject_class != gs.class_id || cand.object_class != go.class_id)
        continue;
      bool localized;
      if (task == TaskProtocol::SGDet) {
        localized = iou(cand.subject_box, gs.bbox) >= iou_threshold &&
                    iou(cand.object_box, go.bbox) >= iou_threshold;
      } else {
        localized = cand.subject == gt.subject_idx && cand.object == gt.object_idx;
      }
      if (!localized) continue;
      matched[g] = 1;
      hits[size_t(gt.predicate_id)]++;
      break;
    }
  }
  return hits;
}

struct EvalReport {
  std::vector<size_t> ks;
  std::vector<size_t> gt_counts;                 // per predicate
  std::map<size_t, std::vector<size_t>> hits_at; // K -> per-predicate hits

  double recall(size_t K, size_t predicate) const {
    const auto& h = hits_at.at(K);
    return gt_counts[predicate] == 0
               ? 0.0
               : double(h[predicate]) / double(gt_counts[predicate]);
  }
  // Unweighted mean over predicates with at least one GT instance.
  double mean_recall(size_t K) const {
    double sum = 0.0;
    size_t n = 0;
    for (size_t p = 0; p < gt_counts.size(); ++p) {
      if (gt_counts[p] == 0) continue;
      sum += recall(K, p);
      ++n;
    }
    return n == 0 ? 0.0 : sum / double(n);
  }
  // Frequency-weighted recall: total hits over total GT.
  double weighted_recall(size_t K) const {
    size_t hits = 0, total = 0;
    const auto& h = hits_at.at(K);
    for (size_t p = 0; p < gt_counts.size(); ++p) {
      hits += h[p];
      total += gt_counts[p];
    }
    return total == 0 ? 0.0 : double(hits) / double(total);
  }
};

inline std::vector<double> to_double(const std::vector<float>& v) {
  return std::vector<double>(v.begin(), v.end());
}

// Per-pair candidate extraction for one strategy. The ranking basis is the
// strategy's score vector; the pair confidence is the softmax probability
// of the chosen (top non-background) predicate under that basis, except
// that LBL pairs use the student (Y_S) probabilities.
inline std::optional<CandidateTriplet> pair_candidate(
    const CounterfactualScores& scores, Strategy strategy, const LblConfig& lbl) {
  std::vector<double> basis;
  std::vector<int> ranking;
  std::vector<double> conf_basis;
  switch (strategy) {
    case Strategy::Plain:
      basis = to_double(scores.y_xzw);
      ranking = descending_order(basis);
      conf_basis = basis;
      break;
    case Strategy::Tde:
      basis = tde_student(scores);
      ranking = descending_order(basis);
      conf_basis = basis;
      break;
    case Strategy::TdeLogic:
      basis = tde_teacher(scores);
      ranking = descending_order(basis);
      conf_basis = basis;
      break;
    case Strategy::Lbl: {
      auto ranked = lbl_predict(scores, lbl);
      ranking.reserve(ranked.size());
      for (const auto& r : ranked) ranking.push_back(r.predicate_id);
      conf_basis = tde_student(scores);
      break;
    }
  }
  int candidate = -1;
  for (int pred : ranking) {
    if (pred != 0) {
      candidate = pred;
      break;
    }
  }
  if (candidate < 0) return std::nullopt;
  const auto probs = softmax_vec(conf_basis);
  CandidateTriplet c;
  c.predicate = candidate;
  c.confidence = probs[size_t(candidate)];
  return c;
}

// Scores one dataset slice once and derives a report per strategy.
// Images are processed in parallel, results aggregated in index order.
inline std::vector<EvalReport> evaluate_strategies(
    SggModel<float>& M, const Dataset& ds, const std::vector<size_t>& record_indices,
    const LblConfig& lbl, const EvalOptions& opt, const std::vector<Strategy>& strategies) {
  const size_t N = ds.num_predicates();
  const bool need_cf = !(strategies.size() == 1 && strategies[0] == Strategy::Plain);
  struct PerImage {
    std::vector<std::vector<size_t>> hits;  // [strategy][K] flattened below
    std::vector<size_t> gt;
  };
  std::vector<PerImage> slots(record_indices.size());
  parallel_for(record_indices.size(), [&](size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; ++i) {
      const auto& rec = ds.records[record_indices[i]];
      auto& slot = slots[i];
      slot.gt.assign(N, 0);
      for (const auto& tr : rec.gt_triplets) slot.gt[size_t(tr.predicate_id)]++;
      slot.hits.assign(strategies.size() * opt.recall_ks.size(), std::vector<size_t>(N, 0));
      if (rec.objects.size() < 2) continue;
      SceneInputs scene = protocol_inputs(rec, record_indices[i], ds.num_classes(), opt);
      auto pairs = all_ordered_pairs(rec.objects.size());
      std::vector<CounterfactualScores> scores;
      if (need_cf) {
        scores = score_counterfactuals(M, scene, pairs, lbl.baselines);
      } else {
        // plain-only fast path: factual pass only
        scores.resize(pairs.size());
        Tape<float> tape;
        Var maps = tape.leaf(pipe_detail::maps_tensor<float>(rec));
        Var fts = tape.leaf(
            pipe_detail::class_embed_tensor<float>(M.embeddings, scene.input_classes));
        auto vision = vision_features(tape, M, maps, fts, rec.objects.size());
        Var u = union_features(tape, M.rel,
                               tape.leaf(union_maps_tensor<float>(scene, pairs)),
                               pairs.size());
        Var logits = head_logits(tape, M, scene, vision.features, fts, pairs, u);
        const auto& Z = tape.val(logits);
        for (size_t p = 0; p < pairs.size(); ++p)
          scores[p].y_xzw.assign(Z.data() + p * N, Z.data() + (p + 1) * N);
      }
      for (size_t s = 0; s < strategies.size(); ++s) {
        std::vector<CandidateTriplet> cands;
        for (size_t p = 0; p < pairs.size(); ++p) {
          auto cand = pair_candidate(scores[p], strategies[s], lbl);
          if (!cand) continue;
          cand->subject = pairs[p].subject;
          cand->object = pairs[p].object;
          cand->subject_class = scene.input_classes[size_t(pairs[p].subject)];
          cand->object_class = scene.input_classes[size_t(pairs[p].object)];
          cand->subject_box = scene.boxes[size_t(pairs[p].subject)];
          cand->object_box = scene.boxes[size_t(pairs[p].object)];
          cands.push_back(*cand);
        }
        auto ranked = rank_triplets(std::move(cands));
        for (size_t ki = 0; ki < opt.recall_ks.size(); ++ki) {
          slot.hits[s * opt.recall_ks.size() + ki] = match_triplets(
              rec, ranked, opt.recall_ks[ki], opt.task, opt.iou_threshold, N);
        }
      }
    }
  });
  std::vector<EvalReport> reports(strategies.size());
  for (size_t s = 0; s < strategies.size(); ++s) {
    auto& rep = reports[s];
    rep.ks = opt.recall_ks;
    rep.gt_counts.assign(N, 0);
    for (size_t ki = 0; ki < opt.recall_ks.size(); ++ki)
      rep.hits_at[opt.recall_ks[ki]].assign(N, 0);
    for (const auto& slot : slots) {
      for (size_t p = 0; p < N; ++p) rep.gt_counts[p] += slot.gt[p];
      for (size_t ki = 0; ki < opt.recall_ks.size(); ++ki) {
        auto& dst = rep.hits_at[opt.recall_ks[ki]];
        const auto& src = slot.hits[s * opt.recall_ks.size() + ki];
        for (size_t p = 0; p < N; ++p) dst[p] += src[p];
      }
    }
  }
  return reports;
}

// Ranked predicate list for a single record (the predict command).
struct PairPrediction {
  OrderedPair pair;
  std::vector<RankedPredicate> ranking;
  double confidence = 0.0;  // probability of the top non-background predicate
};

inline std::vector<PairPrediction> predict_record(SggModel<float>& M,
                                                  const Dataset& ds, size_t record_index,
                                                  const LblConfig& lbl, Strategy strategy,
                                                  const EvalOptions& opt) {
  const auto& rec = ds.records[record_index];
  std::vector<PairPrediction> out;
  if (rec.objects.size() < 2) return out;
  SceneInputs scene = protocol_inputs(rec, record_index, ds.num_classes(), opt);
  auto pairs = all_ordered_pairs(rec.objects.size());
  auto scores = score_counterfactuals(M, scene, pairs, lbl.baselines);
  for (size_t p = 0; p < pairs.size(); ++p) {
    PairPrediction pp;
    pp.pair = pairs[p];
    std::vector<double> basis;
    switch (strategy) {
      case Strategy::Plain: basis = to_double(scores[p].y_xzw); break;
      case Strategy::Tde: basis = tde_student(scores[p]); break;
      case Strategy::TdeLogic: basis = tde_teacher(scores[p]); break;
      case Strategy::Lbl: basis = tde_student(scores[p]); break;
    }
    if (strategy == Strategy::Lbl) {
      pp.ranking = lbl_predict(scores[p], lbl);
    } else {
      auto order = descending_order(basis);
      for (size_t pos = 0; pos < order.size(); ++pos)
        pp.ranking.push_back(RankedPredicate{order[pos], double(order.size() - pos)});
    }
    auto cand = pair_candidate(scores[p], strategy, lbl);
    pp.confidence = cand ? cand->confidence : 0.0;
    out.push_back(std::move(pp));
  }
  return out;
}

}  // namespace sgg
