#pragma once

#include <optional>
#include <vector>

#include "sgg/embedding.hpp"
#include "sgg/oem.hpp"
#include "sgg/relation.hpp"

namespace sgg {

// Assembly of the full relation-prediction model: OEM (optional, the
// ablation switch), Eq.-3 object embedding, recurrent context, union
// features and the relation decoder. Templated on the scalar type so the
// gradient suite can instantiate the identical model in float64.

struct ModelConfig {
  size_t num_classes = 0;
  size_t num_predicates = 0;
  bool use_oem = true;
  size_t heads = 4;
  size_t gru_hidden = 128;
  size_t union_channels = 2;
  uint64_t init_seed = 1;
};

template <class T>
class SggModel {
 public:
  SggModel(const ModelConfig& c, ClassEmbeddingTable emb)
      : cfg(c), store(c.init_seed), embeddings(std::move(emb)) {
    require<ValidationError>(cfg.num_classes >= 2 && cfg.num_predicates >= 2,
                             "model: class/predicate counts too small");
    if (cfg.use_oem) oem.emplace(OemParams<T>::create(store, cfg.num_classes, cfg.heads));
    rel = RelationParams<T>::create(store, cfg.num_predicates, cfg.gru_hidden,
                                    cfg.union_channels);
  }

  ModelConfig cfg;
  ParamStore<T> store;
  std::optional<OemParams<T>> oem;
  RelationParams<T> rel;
  ClassEmbeddingTable embeddings;
};

// One scene as the model sees it under a task protocol: the classes used as
// inputs (ground truth for PredCls/training, detector-simulated otherwise)
// and the boxes (jittered for SGDet).
struct SceneInputs {
  const ImageRecord* rec = nullptr;
  std::vector<int> input_classes;
  std::vector<BBox> boxes;
  double width = 0, height = 0;

  static SceneInputs ground_truth(const ImageRecord& rec) {
    SceneInputs s;
    s.rec = &rec;
    s.width = rec.width;
    s.height = rec.height;
    for (const auto& o : rec.objects) {
      s.input_classes.push_back(o.class_id);
      s.boxes.push_back(o.bbox);
    }
    return s;
  }
};

struct OrderedPair {
  int subject = 0;
  int object = 0;
};

inline std::vector<OrderedPair> all_ordered_pairs(size_t num_objects) {
  std::vector<OrderedPair> out;
  for (size_t i = 0; i < num_objects; ++i)
    for (size_t j = 0; j < num_objects; ++j)
      if (i != j) out.push_back(OrderedPair{int(i), int(j)});
  return out;
}

namespace pipe_detail {

template <class T>
Tensor<T> maps_tensor(const ImageRecord& rec) {
  Tensor<T> maps({rec.objects.size(), kFlatFeature});
  for (size_t i = 0; i < rec.objects.size(); ++i)
    for (size_t j = 0; j < kFlatFeature; ++j)
      maps[i * kFlatFeature + j] = T(rec.objects[i].feature_map[j]);
  return maps;
}

template <class T>
Tensor<T> class_embed_tensor(const ClassEmbeddingTable& tab,
                             const std::vector<int>& classes) {
  Tensor<T> out({classes.size(), kClassEmbedDim});
  for (size_t i = 0; i < classes.size(); ++i) {
    const float* row = tab.row(classes[i]);
    for (size_t j = 0; j < kClassEmbedDim; ++j) out[i * kClassEmbedDim + j] = T(row[j]);
  }
  return out;
}

}  // namespace pipe_detail

template <class T>
struct VisionOut {
  Var features;           // [O, 4096] enhanced (OEM) or raw flattened maps
  Var class_logits;       // [O, p]; only valid when has_class_logits
  bool has_class_logits = false;
  Tensor<T> attn_weights; // [O, 64] layer-1 attention (empty without OEM)
};

// Vision stage for a batch of scenes whose objects are stacked row-wise.
template <class T>
VisionOut<T> vision_features(Tape<T>& t, SggModel<T>& M, Var maps, Var queries,
                             size_t num_objects) {
  VisionOut<T> out;
  if (M.cfg.use_oem) {
    auto o = oem_forward(t, *M.oem, maps, queries, num_objects);
    out.features = o.enhanced;
    out.class_logits = o.class_logits;
    out.has_class_logits = true;
    out.attn_weights = t.val(o.attn_weights);
  } else {
    out.features = maps;
  }
  return out;
}

// Relation head over one scene: Eq.-3 embeddings, bidirectional context in
// reading order, union features from the raw maps, and the pair decoder.
// vf must be [O, 4096] rows aligned with the scene's objects; ft likewise
// [O, 300]. Union maps always come from the scene's stored (factual)
// feature maps; interventions touch only vf and ft.
template <class T>
Var head_logits(Tape<T>& t, SggModel<T>& M, const SceneInputs& scene, Var vf, Var ft,
                const std::vector<OrderedPair>& pairs, Var union_feats) {
  const size_t O = scene.rec->objects.size();
  require(t.val(vf).rows() == O && t.val(ft).rows() == O, "head: row mismatch");
  Var nbox = t.leaf(normalized_boxes<T>(scene.boxes, scene.width, scene.height));
  Var embeds = embed_objects(t, M.rel, vf, ft, nbox);
  Var ctx = encode_context(t, M.rel, embeds, scene.boxes);
  std::vector<size_t> sidx, oidx;
  for (const auto& p : pairs) {
    sidx.push_back(size_t(p.subject));
    oidx.push_back(size_t(p.object));
  }
  Var subj = gather_rows(t, ctx, sidx);
  Var obj = gather_rows(t, ctx, oidx);
  return relation_logits(t, M.rel, subj, obj, union_feats);
}

// Union-feature input rows for a pair list (data path shared by train/eval).
template <class T>
Tensor<T> union_maps_tensor(const SceneInputs& scene, const std::vector<OrderedPair>& pairs) {
  Tensor<T> out({std::max<size_t>(pairs.size(), 1), kFlatFeature});
  for (size_t i = 0; i < pairs.size(); ++i) {
    ObjectInstance subj = scene.rec->objects[size_t(pairs[i].subject)];
    ObjectInstance obj = scene.rec->objects[size_t(pairs[i].object)];
    subj.bbox = scene.boxes[size_t(pairs[i].subject)];
    obj.bbox = scene.boxes[size_t(pairs[i].object)];
    Tensor<T> u = build_union_map<T>(subj, obj);
    for (size_t j = 0; j < kFlatFeature; ++j) out[i * kFlatFeature + j] = u[j];
  }
  return out;
}

}  // namespace sgg
