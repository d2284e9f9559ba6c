#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "sgg/attention.hpp"
#include "sgg/model.hpp"
#include "sgg/ops.hpp"
#include "sgg/spatial.hpp"

namespace sgg {

// Object Enhancement Module. Two layers over the 64x64 bbox-level feature
// map. Layer 1 queries the patch tokens with the class word embedding
// (cross-attention, Eq.-style q K^T / sqrt(300)), layer 2 re-attends at a
// finer granularity over the most attended patches (FGMHSA). Each layer
// runs a parallel deformable-convolution branch and an MLP with residual
// connections, and the final 4096-d enhanced feature also feeds a p-way
// auxiliary classifier.

template <class T>
struct OemParams {
  // layer 1: class-query cross attention
  Parameter<T>*l1_ln_g, *l1_ln_b;        // LN over 64-d patch tokens
  Parameter<T>*l1_proj_w, *l1_proj_b;    // 64 -> 300 keys/values
  Parameter<T>*l1_back_w, *l1_back_b;    // 300 -> 64 back-projection
  Parameter<T>*l1_asm_w, *l1_asm_b;      // 4096 -> 4096 assembled-map projection
  Parameter<T>*l1_off_w, *l1_off_b;      // offset predictor conv, zero-init
  Parameter<T>*l1_dc_w, *l1_dc_b;        // deformable 3x3 kernel
  Parameter<T>*l1_mlp_w, *l1_mlp_b;      // 4096 -> 4096
  // layer 2: fine-grained MHSA
  Parameter<T>*l2_ln_g, *l2_ln_b;        // LN over 64-d fine tokens
  Parameter<T>*l2_proj_w, *l2_proj_b;    // 64 -> 300 token projection
  Parameter<T>*l2_wq, *l2_bq, *l2_wk, *l2_bk, *l2_wv, *l2_bv, *l2_wo, *l2_bo;
  Parameter<T>*l2_pool_w, *l2_pool_b;    // 300 -> 4096 pooled projection
  Parameter<T>*l2_off_w, *l2_off_b;
  Parameter<T>*l2_dc_w, *l2_dc_b;
  Parameter<T>*l2_mlp_w, *l2_mlp_b;
  // auxiliary classifier head
  Parameter<T>*cls_w, *cls_b;            // 4096 -> p

  size_t heads = 4;

  static OemParams create(ParamStore<T>& s, size_t num_classes, size_t heads = 4) {
    OemParams P;
    P.heads = heads;
    auto mat = [&](const char* n, size_t in, size_t out) {
      return &s.create(n, {in, out}, Init::XavierUniform);
    };
    auto vec0 = [&](const char* n, size_t d) { return &s.create(n, {d}, Init::Zero); };
    auto vec1 = [&](const char* n, size_t d) { return &s.create(n, {d}, Init::One); };
    P.l1_ln_g = vec1("oem.l1.ln.g", kPatchDim);
    P.l1_ln_b = vec0("oem.l1.ln.b", kPatchDim);
    P.l1_proj_w = mat("oem.l1.proj.w", kPatchDim, kClassEmbedDim);
    P.l1_proj_b = vec0("oem.l1.proj.b", kClassEmbedDim);
    P.l1_back_w = mat("oem.l1.back.w", kClassEmbedDim, kPatchDim);
    P.l1_back_b = vec0("oem.l1.back.b", kPatchDim);
    P.l1_asm_w = mat("oem.l1.asm.w", kFlatFeature, kEnhancedDim);
    P.l1_asm_b = vec0("oem.l1.asm.b", kEnhancedDim);
    // offsets start at zero so the deformable conv opens as a plain conv
    P.l1_off_w = &s.create("oem.l1.off.w", {18, 1, 3, 3}, Init::Zero);
    P.l1_off_b = vec0("oem.l1.off.b", 18);
    P.l1_dc_w = &s.create("oem.l1.dc.w", {9}, Init::XavierUniform, 9, 1);
    P.l1_dc_b = vec0("oem.l1.dc.b", 1);
    P.l1_mlp_w = mat("oem.l1.mlp.w", kEnhancedDim, kEnhancedDim);
    P.l1_mlp_b = vec0("oem.l1.mlp.b", kEnhancedDim);

    P.l2_ln_g = vec1("oem.l2.ln.g", kPatchDim);
    P.l2_ln_b = vec0("oem.l2.ln.b", kPatchDim);
    P.l2_proj_w = mat("oem.l2.proj.w", kPatchDim, kClassEmbedDim);
    P.l2_proj_b = vec0("oem.l2.proj.b", kClassEmbedDim);
    P.l2_wq = mat("oem.l2.attn.wq", kClassEmbedDim, kClassEmbedDim);
    P.l2_bq = vec0("oem.l2.attn.bq", kClassEmbedDim);
    P.l2_wk = mat("oem.l2.attn.wk", kClassEmbedDim, kClassEmbedDim);
    P.l2_bk = vec0("oem.l2.attn.bk", kClassEmbedDim);
    P.l2_wv = mat("oem.l2.attn.wv", kClassEmbedDim, kClassEmbedDim);
    P.l2_bv = vec0("oem.l2.attn.bv", kClassEmbedDim);
    P.l2_wo = mat("oem.l2.attn.wo", kClassEmbedDim, kClassEmbedDim);
    P.l2_bo = vec0("oem.l2.attn.bo", kClassEmbedDim);
    P.l2_pool_w = mat("oem.l2.pool.w", kClassEmbedDim, kEnhancedDim);
    P.l2_pool_b = vec0("oem.l2.pool.b", kEnhancedDim);
    P.l2_off_w = &s.create("oem.l2.off.w", {18, 1, 3, 3}, Init::Zero);
    P.l2_off_b = vec0("oem.l2.off.b", 18);
    P.l2_dc_w = &s.create("oem.l2.dc.w", {9}, Init::XavierUniform, 9, 1);
    P.l2_dc_b = vec0("oem.l2.dc.b", 1);
    P.l2_mlp_w = mat("oem.l2.mlp.w", kEnhancedDim, kEnhancedDim);
    P.l2_mlp_b = vec0("oem.l2.mlp.b", kEnhancedDim);

    P.cls_w = mat("oem.cls.w", kEnhancedDim, num_classes);
    P.cls_b = vec0("oem.cls.b", num_classes);
    return P;
  }
};

// Top-50% patch selection by attention weight, ties broken by lower token
// index. Returns ceil(n/2) indices in ascending order.
template <class T>
std::vector<int> select_top_half(const T* weights, size_t n) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (weights[a] != weights[b]) return weights[a] > weights[b];
    return a < b;
  });
  const size_t keep = (n + 1) / 2;
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <class T>
struct CrossAttentionOut {
  Var enhanced_tokens;  // [O*64, 300] weight-scaled values
  Var weights;          // [O, 64] attention weights, rows sum to 1
};

// Layer-1 cross attention: patch tokens are layer-normalized, projected to
// 300-d keys/values, scored against the class query with scale 1/sqrt(300),
// and the softmax weights re-scale the value rows.
template <class T>
CrossAttentionOut<T> class_query_attention(Tape<T>& t, const OemParams<T>& P,
                                           Var queries, Var patch_tokens,
                                           size_t objects) {
  Var normed = layer_norm_rows(t, patch_tokens, t.use(*P.l1_ln_g), t.use(*P.l1_ln_b));
  Var kv = linear(t, normed, t.use(*P.l1_proj_w), t.use(*P.l1_proj_b));
  Var scores = group_query_scores(t, queries, kv, kPatchCount,
                                  1.0 / std::sqrt(double(kClassEmbedDim)));
  Var weights = softmax_rows(t, scores);
  Var enhanced = scale_rows_by_weights(t, kv, weights, kPatchCount);
  return {enhanced, weights};
}

// One deformable-conv branch: offsets are predicted by a standard 3x3 conv
// over the same map (zero-initialized), then the 3x3 deformable kernel
// samples at the shifted taps.
template <class T>
Var deformable_branch(Tape<T>& t, Var maps, size_t objects, Parameter<T>& off_w,
                      Parameter<T>& off_b, Parameter<T>& dc_w, Parameter<T>& dc_b) {
  Var offsets = conv3x3(t, maps, t.use(off_w), t.use(off_b), objects, 1, 18,
                        kFeatureSide, kFeatureSide);
  return deform_conv3x3(t, maps, t.use(dc_w), t.use(dc_b), offsets, objects,
                        kFeatureSide, kFeatureSide);
}

template <class T>
Var mlp_block(Tape<T>& t, Var x, Parameter<T>& w, Parameter<T>& b) {
  Var h = gelu(t, linear(t, x, t.use(w), t.use(b)));
  return add(t, x, h);
}

// FGMHSA: select the top-50% patches by layer-1 attention weight, split each
// into four quarters upsampled back to patch size, self-attend over the
// resulting 160 tokens, mean-pool, and project to 4096-d.
template <class T>
Var fgmhsa(Tape<T>& t, const OemParams<T>& P, Var maps,
           const Tensor<T>& layer1_weights, size_t objects) {
  std::vector<std::vector<int>> selected(objects);
  for (size_t o = 0; o < objects; ++o)
    selected[o] = select_top_half(layer1_weights.data() + o * kPatchCount, kPatchCount);
  Var fine = fine_tokens(t, maps, selected, kFeatureSide, kFeatureSide, kPatchSide);
  const size_t tokens = t.val(fine).rows() / objects;  // 160 for 64 patches
  Var normed = layer_norm_rows(t, fine, t.use(*P.l2_ln_g), t.use(*P.l2_ln_b));
  Var tok = linear(t, normed, t.use(*P.l2_proj_w), t.use(*P.l2_proj_b));
  Var q = linear(t, tok, t.use(*P.l2_wq), t.use(*P.l2_bq));
  Var k = linear(t, tok, t.use(*P.l2_wk), t.use(*P.l2_bk));
  Var v = linear(t, tok, t.use(*P.l2_wv), t.use(*P.l2_bv));
  Var att = mhsa_core(t, q, k, v, objects, tokens, P.heads);
  Var proj = linear(t, att, t.use(*P.l2_wo), t.use(*P.l2_bo));
  Var mixed = add(t, tok, proj);
  Var pooled = mean_rows_group(t, mixed, objects, tokens);
  return linear(t, pooled, t.use(*P.l2_pool_w), t.use(*P.l2_pool_b));
}

template <class T>
struct OemOutput {
  Var enhanced;      // [O, 4096]
  Var class_logits;  // [O, p]
  Var attn_weights;  // [O, 64]
};

// Full module. maps: [O, 4096] flattened feature maps; queries: [O, 300]
// class word embeddings (ground truth while training, the detector's
// predicted class at test time).
template <class T>
OemOutput<T> oem_forward(Tape<T>& t, const OemParams<T>& P, Var maps, Var queries,
                         size_t objects) {
  require(t.val(maps).size() == objects * kFlatFeature, "oem: maps must be [O,4096]");
  require(t.val(queries).size() == objects * kClassEmbedDim,
          "oem: queries must be [O,300]");
  // layer 1
  Var tokens = patchify(t, maps, objects, kFeatureSide, kFeatureSide, kPatchSide);
  auto cqa = class_query_attention(t, P, queries, tokens, objects);
  Var back = linear(t, cqa.enhanced_tokens, t.use(*P.l1_back_w), t.use(*P.l1_back_b));
  Var attn_map = unpatchify(t, back, objects, kFeatureSide, kFeatureSide, kPatchSide);
  Var attn_out = linear(t, attn_map, t.use(*P.l1_asm_w), t.use(*P.l1_asm_b));
  Var with_res = add(t, attn_out, maps);  // residual to the flattened input
  Var conv1 = deformable_branch(t, maps, objects, *P.l1_off_w, *P.l1_off_b,
                                *P.l1_dc_w, *P.l1_dc_b);
  Var x1 = add(t, with_res, conv1);
  Var x1m = mlp_block(t, x1, *P.l1_mlp_w, *P.l1_mlp_b);

  // layer 2: repetition with FGMHSA in place of cross attention
  Var fgm = fgmhsa(t, P, x1m, t.val(cqa.weights), objects);
  Var conv2 = deformable_branch(t, x1m, objects, *P.l2_off_w, *P.l2_off_b,
                                *P.l2_dc_w, *P.l2_dc_b);
  Var x2 = add(t, add(t, fgm, conv2), x1m);
  Var enhanced = mlp_block(t, x2, *P.l2_mlp_w, *P.l2_mlp_b);

  Var logits = linear(t, enhanced, t.use(*P.cls_w), t.use(*P.cls_b));
  return {enhanced, logits, cqa.weights};
}

// Eq.-2-style classification loss for one object: -log softmax(logits)[y]
// with y given as a one-hot vector (exactly one 1, zeros elsewhere).
template <class T>
Var oem_loss(Tape<T>& t, Var class_logits, const std::vector<T>& one_hot) {
  const auto& Z = t.val(class_logits);
  require<ValidationError>(Z.size() == one_hot.size(), "oem_loss: logits length ",
                           Z.size(), " vs one-hot length ", one_hot.size());
  int label = -1;
  for (size_t i = 0; i < one_hot.size(); ++i) {
    if (one_hot[i] == T(0)) continue;
    require<ValidationError>(one_hot[i] == T(1) && label < 0,
                             "oem_loss: y is not a one-hot vector");
    label = int(i);
  }
  require<ValidationError>(label >= 0, "oem_loss: y is not a one-hot vector");
  return cross_entropy_mean(t, class_logits, {label});
}

}  // namespace sgg
