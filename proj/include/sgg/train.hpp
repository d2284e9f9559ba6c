#pragma once

#include <map>
#include <ostream>
#include <vector>

#include "sgg/optim.hpp"
#include "sgg/pipeline.hpp"

namespace sgg {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  size_t batch = 12;
  size_t steps = 5000;
  uint64_t seed = 1;
  double bg_ratio = 3.0;   // sampled background pairs per positive, cap
  size_t log_every = 50;
};

struct TrainResult {
  std::vector<std::pair<size_t, double>> loss_curve;  // (1-based step, loss)
};

// Deterministic training-pair enumeration for one image: every annotated
// ordered pair with its ground-truth predicate, plus a seeded background
// sample capped at bg_ratio times the positive count (label 0).
inline std::vector<std::pair<OrderedPair, int>> enumerate_training_pairs(
    const ImageRecord& rec, double bg_ratio, Rng rng) {
  std::map<std::pair<int, int>, int> positive;
  for (const auto& tr : rec.gt_triplets)
    positive.emplace(std::make_pair(tr.subject_idx, tr.object_idx), tr.predicate_id);
  std::vector<std::pair<OrderedPair, int>> out;
  std::vector<OrderedPair> background;
  const int M = int(rec.objects.size());
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < M; ++j) {
      if (i == j) continue;
      auto it = positive.find({i, j});
      if (it != positive.end())
        out.push_back({OrderedPair{i, j}, it->second});
      else
        background.push_back(OrderedPair{i, j});
    }
  }
  size_t want = size_t(bg_ratio * double(out.size()));
  want = std::min(want, background.size());
  for (size_t i = background.size(); i > 1; --i)
    std::swap(background[i - 1], background[rng.below(i)]);
  for (size_t i = 0; i < want; ++i) out.push_back({background[i], 0});
  return out;
}

namespace train_detail {

struct BatchLayout {
  std::vector<size_t> images;                  // dataset indices
  std::vector<SceneInputs> scenes;
  std::vector<size_t> obj_offset;              // per image
  size_t total_objects = 0;
  std::vector<size_t> pair_subject, pair_object;  // global object rows
  std::vector<int> pair_label;
  std::vector<std::vector<OrderedPair>> image_pairs;
};

inline BatchLayout layout_batch(const Dataset& ds, const std::vector<size_t>& images,
                                double bg_ratio, uint64_t seed) {
  BatchLayout L;
  L.images = images;
  for (size_t img : images) {
    const auto& rec = ds.records[img];
    L.obj_offset.push_back(L.total_objects);
    L.scenes.push_back(SceneInputs::ground_truth(rec));
    auto pairs = enumerate_training_pairs(rec, bg_ratio,
                                          Rng(seed).fork(fnv1a64("pairs") + img));
    std::vector<OrderedPair> plist;
    for (const auto& [pr, label] : pairs) {
      L.pair_subject.push_back(L.total_objects + size_t(pr.subject));
      L.pair_object.push_back(L.total_objects + size_t(pr.object));
      L.pair_label.push_back(label);
      plist.push_back(pr);
    }
    L.image_pairs.push_back(std::move(plist));
    L.total_objects += rec.objects.size();
  }
  return L;
}

}  // namespace train_detail

// One training forward pass over a batch; returns the scalar loss var.
// Only the factual configuration is ever trained; interventions exist only
// at inference time.
template <class T>
Var batch_loss(Tape<T>& t, SggModel<T>& M, const Dataset& ds,
               const train_detail::BatchLayout& L) {
  // stacked object inputs
  Tensor<T> maps({L.total_objects, kFlatFeature});
  Tensor<T> fts({L.total_objects, kClassEmbedDim});
  Tensor<T> nbox({L.total_objects, 4});
  std::vector<int> gt_classes(L.total_objects);
  size_t row = 0;
  for (size_t k = 0; k < L.scenes.size(); ++k) {
    const auto& scene = L.scenes[k];
    Tensor<T> m = pipe_detail::maps_tensor<T>(*scene.rec);
    Tensor<T> f = pipe_detail::class_embed_tensor<T>(M.embeddings, scene.input_classes);
    Tensor<T> nb = normalized_boxes<T>(scene.boxes, scene.width, scene.height);
    const size_t O = scene.rec->objects.size();
    std::copy(m.data(), m.data() + m.size(), maps.data() + row * kFlatFeature);
    std::copy(f.data(), f.data() + f.size(), fts.data() + row * kClassEmbedDim);
    std::copy(nb.data(), nb.data() + nb.size(), nbox.data() + row * 4);
    for (size_t i = 0; i < O; ++i) gt_classes[row + i] = scene.rec->objects[i].class_id;
    row += O;
  }
  Var maps_v = t.leaf(std::move(maps));
  Var fts_v = t.leaf(std::move(fts));
  Var nbox_v = t.leaf(std::move(nbox));

  auto vision = vision_features(t, M, maps_v, fts_v, L.total_objects);
  Var embeds = embed_objects(t, M.rel, vision.features, fts_v, nbox_v);

  // per-image bidirectional context, re-stacked in batch order
  std::vector<Var> ctxs;
  for (size_t k = 0; k < L.scenes.size(); ++k) {
    const size_t O = L.scenes[k].rec->objects.size();
    std::vector<size_t> idx(O);
    for (size_t i = 0; i < O; ++i) idx[i] = L.obj_offset[k] + i;
    Var mine = gather_rows(t, embeds, idx);
    ctxs.push_back(encode_context(t, M.rel, mine, L.scenes[k].boxes));
  }
  Var ctx_all = concat_rows(t, ctxs);

  Var rel_ce;
  bool have_rel = !L.pair_label.empty();
  if (have_rel) {
    Var subj = gather_rows(t, ctx_all, L.pair_subject);
    Var obj = gather_rows(t, ctx_all, L.pair_object);
    // union maps, image by image
    Tensor<T> umaps({L.pair_label.size(), kFlatFeature});
    size_t prow = 0;
    for (size_t k = 0; k < L.scenes.size(); ++k) {
      if (L.image_pairs[k].empty()) continue;
      Tensor<T> u = union_maps_tensor<T>(L.scenes[k], L.image_pairs[k]);
      std::copy(u.data(), u.data() + L.image_pairs[k].size() * kFlatFeature,
                umaps.data() + prow * kFlatFeature);
      prow += L.image_pairs[k].size();
    }
    Var ufeat = union_features(t, M.rel, t.leaf(std::move(umaps)), L.pair_label.size());
    Var logits = relation_logits(t, M.rel, subj, obj, ufeat);
    rel_ce = cross_entropy_mean(t, logits, L.pair_label);
  }

  if (vision.has_class_logits) {
    Var obj_ce = cross_entropy_mean(t, vision.class_logits, gt_classes);
    return have_rel ? add(t, rel_ce, obj_ce) : obj_ce;
  }
  require<ValidationError>(have_rel, "batch has neither pairs nor an OEM loss");
  return rel_ce;
}

// Deterministic training loop: seeded epoch shuffles, linear LR decay to
// zero over the configured steps, loss logged every log_every steps.
inline TrainResult train_model(SggModel<float>& M, const Dataset& ds,
                               const TrainConfig& cfg, std::ostream* progress = nullptr) {
  require<ValidationError>(!ds.records.empty(), "train: empty dataset");
  TrainResult res;
  if (cfg.steps == 0) return res;

  Rng order_root(cfg.seed ^ fnv1a64("epoch-order"));
  std::vector<size_t> order;
  size_t cursor = 0;
  uint64_t epoch = 0;
  auto next_image = [&]() {
    if (cursor >= order.size()) {
      order.resize(ds.records.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng r = order_root.fork(epoch++);
      for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[r.below(i)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  AdamWConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  for (size_t step = 0; step < cfg.steps; ++step) {
    std::vector<size_t> images;
    for (size_t b = 0; b < cfg.batch; ++b) images.push_back(next_image());
    auto L = train_detail::layout_batch(ds, images, cfg.bg_ratio, cfg.seed);
    Tape<float> tape;
    Var loss = batch_loss(tape, M, ds, L);
    const double value = double(tape.val(loss)[0]);
    if (!std::isfinite(value))
      throw NumericError(cat("non-finite training loss at step ", step + 1));
    M.store.zero_grads();
    tape.backward(loss);
    AdamWConfig stepcfg = adam;
    stepcfg.lr = cfg.lr * (1.0 - double(step) / double(cfg.steps));
    adamw_step(M.store, stepcfg, int64_t(step) + 1);
    const bool log = (step + 1) % cfg.log_every == 0 || step == 0 || step + 1 == cfg.steps;
    if (log) {
      res.loss_curve.emplace_back(step + 1, value);
      if (progress)
        (*progress) << "step " << step + 1 << "/" << cfg.steps << " loss " << value
                    << " lr " << stepcfg.lr << "\n";
    }
  }
  return res;
}

}  // namespace sgg
