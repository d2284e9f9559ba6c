#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <vector>

#include "sgg/ops.hpp"

namespace sgg {

namespace attn_detail {

// exp for the float attention path: 2^i * poly(frac), relative error
// ~2e-7. The attention softmax normalizes the outputs, so this accuracy is
// far below the 1e-6 row-sum contract. The double instantiation (used by
// every finite-difference check) keeps std::exp.
inline float fast_exp(float x) {
  x = std::max(-87.0f, std::min(88.0f, x));
  const float t = x * 1.4426950408889634f;
  const float fi = std::floor(t);
  const float f = t - fi;
  float p = 1.3333558146428443e-3f;
  p = p * f + 9.6181291076284772e-3f;
  p = p * f + 5.5504108664821580e-2f;
  p = p * f + 2.4022650695910072e-1f;
  p = p * f + 6.9314718055994531e-1f;
  p = p * f + 1.0f;
  const uint32_t bits = uint32_t(int32_t(fi) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

template <class T>
T attn_exp(T x) {
  if constexpr (std::is_same_v<T, float>)
    return fast_exp(x);
  else
    return std::exp(x);
}

}  // namespace attn_detail

// Multi-head scaled dot-product self-attention core over per-group token
// blocks. q/k/v: [groups*tokens, d], heads | d. Softmax rows attend within
// one group only. Forward keeps the attention probabilities for backward.
// Work is parallelized over (group, head) slices, which touch disjoint
// output columns, so threading stays deterministic.
template <class T>
Var mhsa_core(Tape<T>& t, Var q, Var k, Var v, size_t groups, size_t tokens,
              size_t heads) {
  const auto& Q = t.val(q);
  const auto& K = t.val(k);
  const auto& V = t.val(v);
  const size_t d = Q.cols();
  require(d % heads == 0, "mhsa: d=", d, " not divisible by heads=", heads);
  require(Q.rows() == groups * tokens && K.same_shape(Q) && V.same_shape(Q),
          "mhsa: q/k/v must be [groups*tokens, d]");
  const size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(double(dh));
  Tensor<T> out({groups * tokens, d});
  Tensor<T> probs({groups * heads, tokens * tokens});

  auto pack = [&](const Tensor<T>& src, size_t g, size_t h, std::vector<T>& dst) {
    for (size_t i = 0; i < tokens; ++i)
      for (size_t j = 0; j < dh; ++j)
        dst[i * dh + j] = src[(g * tokens + i) * d + h * dh + j];
  };

  parallel_for(groups * heads, [&](size_t s0, size_t s1) {
    std::vector<T> Qh(tokens * dh), Kh(tokens * dh), Vh(tokens * dh);
    std::vector<T> S(tokens * tokens), O(tokens * dh);
    for (size_t s = s0; s < s1; ++s) {
      const size_t g = s / heads, h = s % heads;
      pack(Q, g, h, Qh);
      pack(K, g, h, Kh);
      pack(V, g, h, Vh);
      std::fill(S.begin(), S.end(), T(0));
      gemm_nt(Qh.data(), Kh.data(), S.data(), tokens, tokens, dh);
      T* prow = probs.data() + s * tokens * tokens;
      for (size_t i = 0; i < tokens; ++i) {
        for (size_t j = 0; j < tokens; ++j)
          S[i * tokens + j] = T(double(S[i * tokens + j]) * scale);
        T mx = S[i * tokens];
        for (size_t j = 1; j < tokens; ++j) mx = std::max(mx, S[i * tokens + j]);
        double denom = 0.0;
        T* pr = prow + i * tokens;
        const T* sr = S.data() + i * tokens;
        for (size_t j = 0; j < tokens; ++j) {
          pr[j] = attn_detail::attn_exp(T(sr[j] - mx));
          denom += double(pr[j]);
        }
        const T inv = T(1.0 / denom);
        for (size_t j = 0; j < tokens; ++j) pr[j] *= inv;
      }
      std::fill(O.begin(), O.end(), T(0));
      gemm_nn(prow, Vh.data(), O.data(), tokens, dh, tokens);
      for (size_t i = 0; i < tokens; ++i)
        for (size_t j = 0; j < dh; ++j)
          out[(g * tokens + i) * d + h * dh + j] = O[i * dh + j];
    }
  });

  const bool ng = t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    Tensor<T> saved_probs = probs;
    bw = [self, q, k, v, saved_probs, groups, tokens, heads, d, dh,
          scale](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      const auto& Q2 = tp.val(q);
      const auto& K2 = tp.val(k);
      const auto& V2 = tp.val(v);
      const bool nq = tp.needs_grad(q), nk = tp.needs_grad(k), nv = tp.needs_grad(v);
      T* gq = nq ? tp.grad(q).data() : nullptr;
      T* gk = nk ? tp.grad(k).data() : nullptr;
      T* gv = nv ? tp.grad(v).data() : nullptr;
      auto pack = [&](const Tensor<T>& src, size_t g, size_t h, std::vector<T>& dst) {
        for (size_t i = 0; i < tokens; ++i)
          for (size_t j = 0; j < dh; ++j)
            dst[i * dh + j] = src[(g * tokens + i) * d + h * dh + j];
      };
      parallel_for(groups * heads, [&](size_t s0, size_t s1) {
        std::vector<T> Qh(tokens * dh), Kh(tokens * dh), Vh(tokens * dh);
        std::vector<T> dO(tokens * dh), dP(tokens * tokens), dS(tokens * tokens);
        std::vector<T> dQh(tokens * dh), dKh(tokens * dh), dVh(tokens * dh);
        for (size_t s = s0; s < s1; ++s) {
          const size_t g = s / heads, h = s % heads;
          pack(Q2, g, h, Qh);
          pack(K2, g, h, Kh);
          pack(V2, g, h, Vh);
          for (size_t i = 0; i < tokens; ++i)
            for (size_t j = 0; j < dh; ++j)
              dO[i * dh + j] = go[(g * tokens + i) * d + h * dh + j];
          const T* prow = saved_probs.data() + s * tokens * tokens;
          std::fill(dP.begin(), dP.end(), T(0));
          gemm_nt(dO.data(), Vh.data(), dP.data(), tokens, tokens, dh);
          if (nv) {
            std::fill(dVh.begin(), dVh.end(), T(0));
            gemm_tn(prow, dO.data(), dVh.data(), tokens, dh, tokens);
            for (size_t i = 0; i < tokens; ++i)
              for (size_t j = 0; j < dh; ++j)
                gv[(g * tokens + i) * d + h * dh + j] += dVh[i * dh + j];
          }
          for (size_t i = 0; i < tokens; ++i) {
            double dot = 0.0;
            for (size_t j = 0; j < tokens; ++j)
              dot += double(dP[i * tokens + j]) * double(prow[i * tokens + j]);
            for (size_t j = 0; j < tokens; ++j)
              dS[i * tokens + j] = T(double(prow[i * tokens + j]) *
                                     (double(dP[i * tokens + j]) - dot) * scale);
          }
          if (nq) {
            std::fill(dQh.begin(), dQh.end(), T(0));
            gemm_nn(dS.data(), Kh.data(), dQh.data(), tokens, dh, tokens);
            for (size_t i = 0; i < tokens; ++i)
              for (size_t j = 0; j < dh; ++j)
                gq[(g * tokens + i) * d + h * dh + j] += dQh[i * dh + j];
          }
          if (nk) {
            std::fill(dKh.begin(), dKh.end(), T(0));
            gemm_tn(dS.data(), Qh.data(), dKh.data(), tokens, dh, tokens);
            for (size_t i = 0; i < tokens; ++i)
              for (size_t j = 0; j < dh; ++j)
                gk[(g * tokens + i) * d + h * dh + j] += dKh[i * dh + j];
          }
        }
      });
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

}  // namespace sgg
