#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "sgg/model.hpp"
#include "sgg/ops.hpp"
#include "sgg/spatial.hpp"

namespace sgg {

// Relation head: object embedding (three projections with layer norms,
// summed), a single-layer bidirectional gated recurrent context encoder over
// the objects of one image, union-region features, and the decoder
// logits = W8 ((W7 [x_i; x_j]) ⊙ u_ij).

template <class T>
struct RelationParams {
  Parameter<T>*w1, *w2, *w3;             // vf/ft/bbox projections to 2048
  Parameter<T>*ln1_g, *ln1_b, *ln2_g, *ln2_b;
  // GRU, forward and backward directions (z update, r reset, h candidate)
  struct GruDir {
    Parameter<T>*wz, *uz, *bz, *wr, *ur, *br, *wh, *uh, *bh;
  } fwd, bwd;
  Parameter<T>*ctx_w, *ctx_b;            // [2*hidden -> 2048]
  Parameter<T>*w7;                       // [4096 -> 4096]
  Parameter<T>*w8;                       // [4096 -> N]
  Parameter<T>*u_conv_w, *u_conv_b;      // union encoder conv 1 -> C
  Parameter<T>*u_proj_w, *u_proj_b;      // C*16*16 -> 4096
  size_t hidden = 128;
  size_t union_channels = 2;

  static RelationParams create(ParamStore<T>& s, size_t num_predicates,
                               size_t hidden = 128, size_t union_channels = 2) {
    RelationParams P;
    P.hidden = hidden;
    P.union_channels = union_channels;
    auto mat = [&](const std::string& n, size_t in, size_t out) {
      return &s.create(n, {in, out}, Init::XavierUniform);
    };
    auto vec0 = [&](const std::string& n, size_t d) {
      return &s.create(n, {d}, Init::Zero);
    };
    auto vec1 = [&](const std::string& n, size_t d) {
      return &s.create(n, {d}, Init::One);
    };
    P.w1 = mat("rel.embed.w1", kEnhancedDim, kObjectDim);
    P.w2 = mat("rel.embed.w2", kClassEmbedDim, kObjectDim);
    P.w3 = mat("rel.embed.w3", 4, kObjectDim);
    P.ln1_g = vec1("rel.embed.ln1.g", kObjectDim);
    P.ln1_b = vec0("rel.embed.ln1.b", kObjectDim);
    P.ln2_g = vec1("rel.embed.ln2.g", kObjectDim);
    P.ln2_b = vec0("rel.embed.ln2.b", kObjectDim);
    auto dir = [&](const std::string& d) {
      GruDir g;
      g.wz = mat("rel.ctx." + d + ".wz", kObjectDim, hidden);
      g.uz = mat("rel.ctx." + d + ".uz", hidden, hidden);
      g.bz = vec0("rel.ctx." + d + ".bz", hidden);
      g.wr = mat("rel.ctx." + d + ".wr", kObjectDim, hidden);
      g.ur = mat("rel.ctx." + d + ".ur", hidden, hidden);
      g.br = vec0("rel.ctx." + d + ".br", hidden);
      g.wh = mat("rel.ctx." + d + ".wh", kObjectDim, hidden);
      g.uh = mat("rel.ctx." + d + ".uh", hidden, hidden);
      g.bh = vec0("rel.ctx." + d + ".bh", hidden);
      return g;
    };
    P.fwd = dir("fwd");
    P.bwd = dir("bwd");
    P.ctx_w = mat("rel.ctx.out.w", 2 * hidden, kObjectDim);
    P.ctx_b = vec0("rel.ctx.out.b", kObjectDim);
    P.w7 = mat("rel.head.w7", 2 * kObjectDim, 4096);
    P.w8 = mat("rel.head.w8", 4096, num_predicates);
    P.u_conv_w = &s.create("rel.union.conv.w", {union_channels, 1, 3, 3},
                           Init::XavierUniform, 9, 9 * union_channels);
    P.u_conv_b = vec0("rel.union.conv.b", union_channels);
    P.u_proj_w = mat("rel.union.proj.w", union_channels * 16 * 16, 4096);
    P.u_proj_b = vec0("rel.union.proj.b", 4096);
    return P;
  }
};

// Normalized bbox input: [xmin/W, ymin/H, xmax/W, ymax/H].
template <class T>
Tensor<T> normalized_boxes(const std::vector<BBox>& boxes, double W, double H) {
  require<ValidationError>(W > 0 && H > 0, "normalized_boxes: W,H must be > 0");
  Tensor<T> out({boxes.size(), 4});
  for (size_t i = 0; i < boxes.size(); ++i) {
    out[i * 4 + 0] = T(boxes[i].xmin / W);
    out[i * 4 + 1] = T(boxes[i].ymin / H);
    out[i * 4 + 2] = T(boxes[i].xmax / W);
    out[i * 4 + 3] = T(boxes[i].ymax / H);
  }
  return out;
}

// Eq.-3 embedding: LN(W1 vf + W2 ft) + LN(W3 bbox), batched over objects.
template <class T>
Var embed_objects(Tape<T>& t, const RelationParams<T>& P, Var vf, Var ft, Var nbox) {
  Var a = linear_no_bias(t, vf, t.use(*P.w1));
  Var b = linear_no_bias(t, ft, t.use(*P.w2));
  Var vis = layer_norm_rows(t, add(t, a, b), t.use(*P.ln1_g), t.use(*P.ln1_b));
  Var pos = layer_norm_rows(t, linear_no_bias(t, nbox, t.use(*P.w3)),
                            t.use(*P.ln2_g), t.use(*P.ln2_b));
  return add(t, vis, pos);
}

namespace rel_detail {

template <class T>
Var gru_step(Tape<T>& t, const typename RelationParams<T>::GruDir& G, Var x, Var h) {
  Var z = sigmoid_op(t, add_bias(t, add(t, linear_no_bias(t, x, t.use(*G.wz)),
                                        linear_no_bias(t, h, t.use(*G.uz))),
                                 t.use(*G.bz)));
  Var r = sigmoid_op(t, add_bias(t, add(t, linear_no_bias(t, x, t.use(*G.wr)),
                                        linear_no_bias(t, h, t.use(*G.ur))),
                                 t.use(*G.br)));
  Var cand = tanh_op(t, add_bias(t, add(t, linear_no_bias(t, x, t.use(*G.wh)),
                                        linear_no_bias(t, mul(t, r, h), t.use(*G.uh))),
                                 t.use(*G.bh)));
  // h' = h + z * (cand - h)
  return add(t, h, mul(t, z, sub(t, cand, h)));
}

// Left-to-right reading order: ascending bbox center x, ties by center y,
// then by index.
inline std::vector<size_t> reading_order(const std::vector<BBox>& boxes) {
  std::vector<size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    const double ax = boxes[a].xmin + boxes[a].xmax, bx = boxes[b].xmin + boxes[b].xmax;
    if (ax != bx) return ax < bx;
    const double ay = boxes[a].ymin + boxes[a].ymax, by = boxes[b].ymin + boxes[b].ymax;
    if (ay != by) return ay < by;
    return a < b;
  });
  return order;
}

}  // namespace rel_detail

// Bidirectional recurrent context over one image's object embeddings
// ([M, 2048] rows). Objects are visited left-to-right by box center (and in
// reverse), the per-position forward/backward states are concatenated and
// projected back to 2048-d, and outputs are returned in the original object
// order. Every output depends on every input.
template <class T>
Var encode_context(Tape<T>& t, const RelationParams<T>& P, Var embeddings,
                   const std::vector<BBox>& boxes) {
  const size_t M = t.val(embeddings).rows();
  require<ValidationError>(M >= 1, "encode_context: empty object list");
  require(boxes.size() == M, "encode_context: ", boxes.size(), " boxes for ", M,
          " embeddings");
  const auto order = rel_detail::reading_order(boxes);
  Var h0 = t.leaf(Tensor<T>::zeros({1, P.hidden}));
  std::vector<Var> fwd_states(M), bwd_states(M);
  Var h = h0;
  for (size_t s = 0; s < M; ++s) {
    Var x = gather_rows(t, embeddings, {order[s]});
    h = rel_detail::gru_step(t, P.fwd, x, h);
    fwd_states[s] = h;
  }
  h = h0;
  for (size_t s = M; s-- > 0;) {
    Var x = gather_rows(t, embeddings, {order[s]});
    h = rel_detail::gru_step(t, P.bwd, x, h);
    bwd_states[s] = h;
  }
  std::vector<Var> rows(M);
  for (size_t s = 0; s < M; ++s) {
    Var both = concat_cols(t, fwd_states[s], bwd_states[s]);
    rows[size_t(order[s])] = linear(t, both, t.use(*P.ctx_w), t.use(*P.ctx_b));
  }
  std::vector<Var> flat;
  flat.reserve(M);
  for (size_t i = 0; i < M; ++i) flat.push_back(rows[i]);
  return concat_rows(t, flat);
}

// Union map construction (data path, no gradient into the stored feature
// maps): the union rectangle of the two boxes is sampled on a 64x64 grid in
// a shared normalized frame; each object contributes a bilinear sample of
// its own map wherever the grid point lands inside its box, and the two
// contributions are summed.
template <class T>
Tensor<T> build_union_map(const ObjectInstance& subject, const ObjectInstance& object) {
  const BBox ub = union_box(subject.bbox, object.bbox);
  Tensor<T> out({kFeatureSide * kFeatureSide});
  auto sample_into = [&](const ObjectInstance& obj) {
    const BBox& b = obj.bbox;
    const double bw = b.width(), bh = b.height();
    if (bw <= 0 || bh <= 0) return;
    for (size_t y = 0; y < kFeatureSide; ++y) {
      const double py = ub.ymin + (double(y) + 0.5) / kFeatureSide * ub.height();
      const double ly = (py - b.ymin) / bh * kFeatureSide - 0.5;
      for (size_t x = 0; x < kFeatureSide; ++x) {
        const double px = ub.xmin + (double(x) + 0.5) / kFeatureSide * ub.width();
        const double lx = (px - b.xmin) / bw * kFeatureSide - 0.5;
        const auto r = spatial_detail::bilerp(obj.feature_map.data(), kFeatureSide,
                                              kFeatureSide, float(ly), float(lx));
        out[y * kFeatureSide + x] += T(r.value);
      }
    }
  };
  sample_into(subject);
  sample_into(object);
  return out;
}

// Learned union-feature encoder: small conv + pool + projection to 4096-d.
// umaps: [P, 64*64] union maps.
template <class T>
Var union_features(Tape<T>& t, const RelationParams<T>& P, Var umaps, size_t num_pairs) {
  Var conv = gelu(t, conv3x3(t, umaps, t.use(*P.u_conv_w), t.use(*P.u_conv_b),
                             num_pairs, 1, P.union_channels, kFeatureSide,
                             kFeatureSide));
  Var pooled = avg_pool2d(t, conv, num_pairs, P.union_channels, kFeatureSide,
                          kFeatureSide, 4);
  // pooled is [P, C, 16, 16]; linear consumes the trailing dims as one row
  return linear(t, pooled, t.use(*P.u_proj_w), t.use(*P.u_proj_b));
}

// Decoder: logits = W8 ((W7 [x_i; x_j]) ⊙ u), rows are pairs.
template <class T>
Var relation_logits(Tape<T>& t, const RelationParams<T>& P, Var subj_enc,
                    Var obj_enc, Var union_feat) {
  Var pair = concat_cols(t, subj_enc, obj_enc);
  Var proj = linear_no_bias(t, pair, t.use(*P.w7));
  Var gated = mul(t, proj, union_feat);
  return linear_no_bias(t, gated, t.use(*P.w8));
}

}  // namespace sgg
