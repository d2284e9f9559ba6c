#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "sgg/gemm.hpp"
#include "sgg/tape.hpp"

namespace sgg {

// Differentiable ops over Tape<T>. Conventions:
//  - matrices are row-major, linear weights are stored [in, out] so the
//    forward pass is the streaming-friendly gemm_nn;
//  - reductions (softmax normalizers, norms, means, losses) accumulate in
//    64-bit regardless of T;
//  - a closure is only recorded when some input needs a gradient.

namespace op_detail {
template <class T>
Var self_var(const Tape<T>& t) {
  return Var{uint32_t(t.size())};
}
}  // namespace op_detail

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  require(A.size() == B.size(), "add: operand sizes ", A.size(), " vs ", B.size());
  Tensor<T> out(A.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, a, b](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      if (tp.needs_grad(a)) tp.add_grad(a, go.data(), go.size());
      if (tp.needs_grad(b)) tp.add_grad(b, go.data(), go.size());
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var sub(Tape<T>& t, Var a, Var b) {
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  require(A.size() == B.size(), "sub: operand sizes ", A.size(), " vs ", B.size());
  Tensor<T> out(A.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, a, b](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      if (tp.needs_grad(a)) tp.add_grad(a, go.data(), go.size());
      if (tp.needs_grad(b)) {
        auto& gb = tp.grad(b);
        for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var mul(Tape<T>& t, Var a, Var b) {
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  require(A.size() == B.size(), "mul: operand sizes ", A.size(), " vs ", B.size());
  Tensor<T> out(A.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, a, b](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      const auto& A2 = tp.val(a);
      const auto& B2 = tp.val(b);
      if (tp.needs_grad(a)) {
        auto& ga = tp.grad(a);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * B2[i];
      }
      if (tp.needs_grad(b)) {
        auto& gb = tp.grad(b);
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * A2[i];
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// out = mul_const * x + add_const
template <class T>
Var affine(Tape<T>& t, Var x, T mul_const, T add_const = T(0)) {
  const auto& X = t.val(x);
  Tensor<T> out(X.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = mul_const * X[i] + add_const;
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, mul_const](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      auto& gx = tp.grad(x);
      for (size_t i = 0; i < go.size(); ++i) gx[i] += mul_const * go[i];
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var scale(Tape<T>& t, Var x, T c) {
  return affine(t, x, c, T(0));
}

// x: [m,n] plus a length-n bias added to every row.
template <class T>
Var add_bias(Tape<T>& t, Var x, Var bias) {
  const auto& X = t.val(x);
  const auto& B = t.val(bias);
  const size_t n = B.size();
  require(X.size() % n == 0, "add_bias: ", X.size(), " not divisible by bias length ", n);
  const size_t m = X.size() / n;
  Tensor<T> out(X.shape());
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[i * n + j] = X[i * n + j] + B[j];
  const bool ng = t.needs_grad(x) || t.needs_grad(bias);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, bias, m, n](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      if (tp.needs_grad(x)) tp.add_grad(x, go.data(), go.size());
      if (tp.needs_grad(bias)) {
        auto& gb = tp.grad(bias);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  require(A.ndim() == 2 && B.ndim() == 2 && A.dim(1) == B.dim(0),
          "matmul: shapes [", A.rows(), ",", A.cols(), "] x [", B.rows(), ",",
          B.cols(), "]");
  const size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor<T> out({m, n});
  gemm_nn(A.data(), B.data(), out.data(), m, n, k);
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, a, b, m, n, k](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      if (tp.needs_grad(a))
        gemm_nt(go.data(), tp.val(b).data(), tp.grad(a).data(), m, k, n);
      if (tp.needs_grad(b))
        gemm_tn(tp.val(a).data(), go.data(), tp.grad(b).data(), k, n, m);
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// y = x W (+ bias). x: [m,in] (or a length-in vector), W: [in,out].
template <class T>
Var linear(Tape<T>& t, Var x, Var weight, Var bias) {
  const auto& X = t.val(x);
  const auto& W = t.val(weight);
  require(W.ndim() == 2, "linear: weight must be 2-d");
  const size_t in = W.dim(0), out_dim = W.dim(1);
  require(X.size() % in == 0 && X.cols() == in, "linear: input width ", X.cols(),
          " vs weight [", in, ",", out_dim, "]");
  const size_t m = X.size() / in;
  Tensor<T> out(X.ndim() >= 2 ? std::vector<size_t>{m, out_dim}
                              : std::vector<size_t>{out_dim});
  gemm_nn(X.data(), W.data(), out.data(), m, out_dim, in);
  const auto& B = t.val(bias);
  require(B.size() == out_dim, "linear: bias length ", B.size(), " vs ", out_dim);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += B[j];
  const bool ng = t.needs_grad(x) || t.needs_grad(weight) || t.needs_grad(bias);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, weight, bias, m, in, out_dim](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      if (tp.needs_grad(x))
        gemm_nt(go.data(), tp.val(weight).data(), tp.grad(x).data(), m, in, out_dim);
      if (tp.needs_grad(weight))
        gemm_tn(tp.val(x).data(), go.data(), tp.grad(weight).data(), in, out_dim, m);
      if (tp.needs_grad(bias)) {
        auto& gb = tp.grad(bias);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < out_dim; ++j) gb[j] += go[i * out_dim + j];
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var linear_no_bias(Tape<T>& t, Var x, Var weight) {
  const auto& X = t.val(x);
  const auto& W = t.val(weight);
  require(W.ndim() == 2, "linear: weight must be 2-d");
  const size_t in = W.dim(0), out_dim = W.dim(1);
  require(X.cols() == in, "linear: input width ", X.cols(), " vs weight [", in,
          ",", out_dim, "]");
  const size_t m = X.size() / in;
  Tensor<T> out(X.ndim() >= 2 ? std::vector<size_t>{m, out_dim}
                              : std::vector<size_t>{out_dim});
  gemm_nn(X.data(), W.data(), out.data(), m, out_dim, in);
  const bool ng = t.needs_grad(x) || t.needs_grad(weight);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, weight, m, in, out_dim](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      if (tp.needs_grad(x))
        gemm_nt(go.data(), tp.val(weight).data(), tp.grad(x).data(), m, in, out_dim);
      if (tp.needs_grad(weight))
        gemm_tn(tp.val(x).data(), go.data(), tp.grad(weight).data(), in, out_dim, m);
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var gelu(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  Tensor<T> out(X.shape());
  for (size_t i = 0; i < out.size(); ++i) {
    const double v = double(X[i]);
    out[i] = T(0.5 * v * (1.0 + std::erf(v * 0.7071067811865475)));
  }
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      const auto& X2 = tp.val(x);
      auto& gx = tp.grad(x);
      for (size_t i = 0; i < go.size(); ++i) {
        const double v = double(X2[i]);
        const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475));
        const double pdf = 0.3989422804014327 * std::exp(-0.5 * v * v);
        gx[i] += go[i] * T(cdf + v * pdf);
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var tanh_op(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  Tensor<T> out(X.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(X[i]);
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    Tensor<T> saved = out;
    bw = [self, x, saved](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      auto& gx = tp.grad(x);
      for (size_t i = 0; i < go.size(); ++i)
        gx[i] += go[i] * (T(1) - saved[i] * saved[i]);
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var sigmoid_op(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  Tensor<T> out(X.shape());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-X[i]));
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    Tensor<T> saved = out;
    bw = [self, x, saved](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      auto& gx = tp.grad(x);
      for (size_t i = 0; i < go.size(); ++i)
        gx[i] += go[i] * saved[i] * (T(1) - saved[i]);
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// Max-subtracted softmax along the last axis of a [m,n] tensor.
template <class T>
Var softmax_rows(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  const size_t n = X.cols();
  require(n >= 1 && X.size() > 0, "softmax: empty axis");
  const size_t m = X.size() / n;
  Tensor<T> out(X.shape());
  for (size_t i = 0; i < m; ++i) {
    const T* row = X.data() + i * n;
    T mx = row[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (size_t j = 0; j < n; ++j) denom += std::exp(double(row[j] - mx));
    for (size_t j = 0; j < n; ++j)
      out[i * n + j] = T(std::exp(double(row[j] - mx)) / denom);
  }
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    Tensor<T> probs = out;
    bw = [self, x, probs, m, n](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      auto& gx = tp.grad(x);
      for (size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (size_t j = 0; j < n; ++j)
          dot += double(go[i * n + j]) * double(probs[i * n + j]);
        for (size_t j = 0; j < n; ++j)
          gx[i * n + j] += T(double(probs[i * n + j]) * (double(go[i * n + j]) - dot));
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// Layer norm along the last axis (population variance, epsilon inside the
// square root). The axis must have length >= 2.
template <class T>
Var layer_norm_rows(Tape<T>& t, Var x, Var gamma, Var beta, double eps = 1e-5) {
  const auto& X = t.val(x);
  const size_t n = X.cols();
  require(n >= 2, "layer_norm: last-axis length ", n, " < 2 (variance undefined)");
  const size_t m = X.size() / n;
  const auto& G = t.val(gamma);
  const auto& Bt = t.val(beta);
  require(G.size() == n && Bt.size() == n, "layer_norm: gamma/beta length vs axis ", n);
  Tensor<T> out(X.shape());
  Tensor<T> xhat({m, n});
  Tensor<T> inv_std({m});
  for (size_t i = 0; i < m; ++i) {
    const T* row = X.data() + i * n;
    double mean = 0.0;
    for (size_t j = 0; j < n; ++j) mean += double(row[j]);
    mean /= double(n);
    double var = 0.0;
    for (size_t j = 0; j < n; ++j) {
      const double d = double(row[j]) - mean;
      var += d * d;
    }
    var /= double(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = T(inv);
    for (size_t j = 0; j < n; ++j) {
      const double h = (double(row[j]) - mean) * inv;
      xhat[i * n + j] = T(h);
      out[i * n + j] = T(h * double(G[j]) + double(Bt[j]));
    }
  }
  const bool ng = t.needs_grad(x) || t.needs_grad(gamma) || t.needs_grad(beta);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, gamma, beta, xhat, inv_std, m, n](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      const auto& G2 = tp.val(gamma);
      if (tp.needs_grad(gamma)) {
        auto& gg = tp.grad(gamma);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j) gg[j] += go[i * n + j] * xhat[i * n + j];
      }
      if (tp.needs_grad(beta)) {
        auto& gb = tp.grad(beta);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
      }
      if (tp.needs_grad(x)) {
        auto& gx = tp.grad(x);
        for (size_t i = 0; i < m; ++i) {
          double mean_dy = 0.0, mean_dyh = 0.0;
          for (size_t j = 0; j < n; ++j) {
            const double dy = double(go[i * n + j]) * double(G2[j]);
            mean_dy += dy;
            mean_dyh += dy * double(xhat[i * n + j]);
          }
          mean_dy /= double(n);
          mean_dyh /= double(n);
          for (size_t j = 0; j < n; ++j) {
            const double dy = double(go[i * n + j]) * double(G2[j]);
            gx[i * n + j] += T(double(inv_std[i]) *
                               (dy - mean_dy - double(xhat[i * n + j]) * mean_dyh));
          }
        }
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var concat_cols(Tape<T>& t, Var a, Var b) {
  const auto& A = t.val(a);
  const auto& B = t.val(b);
  const size_t m = A.rows();
  require(B.rows() == m, "concat_cols: row counts ", m, " vs ", B.rows());
  const size_t ka = A.cols(), kb = B.cols();
  Tensor<T> out({m, ka + kb});
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < ka; ++j) out[i * (ka + kb) + j] = A[i * ka + j];
    for (size_t j = 0; j < kb; ++j) out[i * (ka + kb) + ka + j] = B[i * kb + j];
  }
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, a, b, m, ka, kb](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      if (tp.needs_grad(a)) {
        auto& ga = tp.grad(a);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < ka; ++j) ga[i * ka + j] += go[i * (ka + kb) + j];
      }
      if (tp.needs_grad(b)) {
        auto& gb = tp.grad(b);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < kb; ++j) gb[i * kb + j] += go[i * (ka + kb) + ka + j];
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var slice_cols(Tape<T>& t, Var x, size_t c0, size_t c1) {
  const auto& X = t.val(x);
  const size_t n = X.cols(), m = X.rows();
  require(c0 < c1 && c1 <= n, "slice_cols: [", c0, ",", c1, ") of width ", n);
  const size_t w = c1 - c0;
  Tensor<T> out({m, w});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < w; ++j) out[i * w + j] = X[i * n + c0 + j];
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, m, n, c0, w](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      auto& gx = tp.grad(x);
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < w; ++j) gx[i * n + c0 + j] += go[i * w + j];
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var gather_rows(Tape<T>& t, Var x, std::vector<size_t> idx) {
  const auto& X = t.val(x);
  const size_t n = X.cols(), m = X.rows();
  for (size_t r : idx) require(r < m, "gather_rows: index ", r, " out of ", m);
  Tensor<T> out({idx.size(), n});
  for (size_t i = 0; i < idx.size(); ++i)
    for (size_t j = 0; j < n; ++j) out[i * n + j] = X[idx[i] * n + j];
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, idx, n](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      auto& gx = tp.grad(x);
      for (size_t i = 0; i < idx.size(); ++i)
        for (size_t j = 0; j < n; ++j) gx[idx[i] * n + j] += go[i * n + j];
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// Concatenates matrices with equal column counts along rows.
template <class T>
Var concat_rows(Tape<T>& t, const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: empty input");
  const size_t n = t.val(parts[0]).cols();
  size_t m = 0;
  bool ng = false;
  for (Var p : parts) {
    require(t.val(p).cols() == n, "concat_rows: column mismatch");
    m += t.val(p).rows();
    ng = ng || t.needs_grad(p);
  }
  Tensor<T> out({m, n});
  size_t row = 0;
  for (Var p : parts) {
    const auto& P = t.val(p);
    for (size_t i = 0; i < P.size(); ++i) out[row * n + i] = P[i];
    row += P.rows();
  }
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    std::vector<Var> saved = parts;
    bw = [self, saved, n](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      size_t row = 0;
      for (Var p : saved) {
        const size_t rows = tp.val(p).rows();
        if (tp.needs_grad(p)) {
          auto& gp = tp.grad(p);
          for (size_t i = 0; i < rows * n; ++i) gp[i] += go[row * n + i];
        }
        row += rows;
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// Stacks equal-length vectors into a matrix, one per row.
template <class T>
Var stack_rows(Tape<T>& t, const std::vector<Var>& rows) {
  require(!rows.empty(), "stack_rows: empty input");
  const size_t n = t.val(rows[0]).size();
  Tensor<T> out({rows.size(), n});
  bool ng = false;
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& R = t.val(rows[i]);
    require(R.size() == n, "stack_rows: row ", i, " length ", R.size(), " vs ", n);
    for (size_t j = 0; j < n; ++j) out[i * n + j] = R[j];
    ng = ng || t.needs_grad(rows[i]);
  }
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    std::vector<Var> saved = rows;
    bw = [self, saved, n](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      for (size_t i = 0; i < saved.size(); ++i) {
        if (!tp.needs_grad(saved[i])) continue;
        auto& gr = tp.grad(saved[i]);
        for (size_t j = 0; j < n; ++j) gr[j] += go[i * n + j];
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// Replaces the given rows of x with a fixed constant row (an intervention
// substitution). Gradients flow only through the untouched rows.
template <class T>
Var replace_rows(Tape<T>& t, Var x, std::vector<size_t> rows, const Tensor<T>& row_value) {
  const auto& X = t.val(x);
  const size_t n = X.cols(), m = X.rows();
  require(row_value.size() == n, "replace_rows: replacement length ",
          row_value.size(), " vs width ", n);
  for (size_t r : rows) require(r < m, "replace_rows: row ", r, " out of ", m);
  Tensor<T> out = X.clone();
  for (size_t r : rows)
    for (size_t j = 0; j < n; ++j) out[r * n + j] = row_value[j];
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, rows, m, n](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      auto& gx = tp.grad(x);
      std::vector<char> masked(m, 0);
      for (size_t r : rows) masked[r] = 1;
      for (size_t i = 0; i < m; ++i) {
        if (masked[i]) continue;
        for (size_t j = 0; j < n; ++j) gx[i * n + j] += go[i * n + j];
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var mean_all(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  double acc = 0.0;
  for (size_t i = 0; i < X.size(); ++i) acc += double(X[i]);
  Tensor<T> out = Tensor<T>::scalar(T(acc / double(X.size())));
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    const size_t n = X.size();
    bw = [self, x, n](Tape<T>& tp) {
      const T g = tp.grad(self)[0] / T(n);
      auto& gx = tp.grad(x);
      for (size_t i = 0; i < n; ++i) gx[i] += g;
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

template <class T>
Var sum_all(Tape<T>& t, Var x) {
  const auto& X = t.val(x);
  double acc = 0.0;
  for (size_t i = 0; i < X.size(); ++i) acc += double(X[i]);
  Tensor<T> out = Tensor<T>::scalar(T(acc));
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    const size_t n = X.size();
    bw = [self, x, n](Tape<T>& tp) {
      const T g = tp.grad(self)[0];
      auto& gx = tp.grad(x);
      for (size_t i = 0; i < n; ++i) gx[i] += g;
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// x: [groups*rows_per_group, n] -> per-group mean over rows: [groups, n].
template <class T>
Var mean_rows_group(Tape<T>& t, Var x, size_t groups, size_t rows_per_group) {
  const auto& X = t.val(x);
  const size_t n = X.cols();
  require(X.rows() == groups * rows_per_group, "mean_rows_group: ", X.rows(),
          " rows vs ", groups, "x", rows_per_group);
  Tensor<T> out({groups, n});
  for (size_t g = 0; g < groups; ++g) {
    for (size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (size_t r = 0; r < rows_per_group; ++r)
        acc += double(X[(g * rows_per_group + r) * n + j]);
      out[g * n + j] = T(acc / double(rows_per_group));
    }
  }
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, groups, rows_per_group, n](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      auto& gx = tp.grad(x);
      const T inv = T(1) / T(rows_per_group);
      for (size_t g = 0; g < groups; ++g)
        for (size_t r = 0; r < rows_per_group; ++r)
          for (size_t j = 0; j < n; ++j)
            gx[(g * rows_per_group + r) * n + j] += go[g * n + j] * inv;
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// Per-group query scores: q [groups,d], keys [groups*tokens,d]
// -> [groups,tokens] with S[g,t] = scale * <q_g, k_{g,t}>.
template <class T>
Var group_query_scores(Tape<T>& t, Var q, Var keys, size_t tokens, double scale) {
  const auto& Q = t.val(q);
  const auto& K = t.val(keys);
  const size_t d = Q.cols();
  const size_t groups = Q.rows();
  require(K.rows() == groups * tokens && K.cols() == d,
          "group_query_scores: keys [", K.rows(), ",", K.cols(), "] vs ", groups,
          "x", tokens, "x", d);
  Tensor<T> out({groups, tokens});
  for (size_t g = 0; g < groups; ++g) {
    const T* qr = Q.data() + g * d;
    for (size_t tok = 0; tok < tokens; ++tok) {
      const T* kr = K.data() + (g * tokens + tok) * d;
      double acc = 0.0;
      for (size_t j = 0; j < d; ++j) acc += double(qr[j]) * double(kr[j]);
      out[g * tokens + tok] = T(acc * scale);
    }
  }
  const bool ng = t.needs_grad(q) || t.needs_grad(keys);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, q, keys, tokens, scale](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      const auto& Q2 = tp.val(q);
      const auto& K2 = tp.val(keys);
      const size_t d = Q2.cols(), groups = Q2.rows();
      if (tp.needs_grad(q)) {
        auto& gq = tp.grad(q);
        for (size_t g = 0; g < groups; ++g)
          for (size_t tok = 0; tok < tokens; ++tok) {
            const T w = T(scale) * go[g * tokens + tok];
            const T* kr = K2.data() + (g * tokens + tok) * d;
            for (size_t j = 0; j < d; ++j) gq[g * d + j] += w * kr[j];
          }
      }
      if (tp.needs_grad(keys)) {
        auto& gk = tp.grad(keys);
        for (size_t g = 0; g < groups; ++g) {
          const T* qr = Q2.data() + g * d;
          for (size_t tok = 0; tok < tokens; ++tok) {
            const T w = T(scale) * go[g * tokens + tok];
            for (size_t j = 0; j < d; ++j) gk[(g * tokens + tok) * d + j] += w * qr[j];
          }
        }
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// values [groups*tokens,d] scaled per row by weights [groups,tokens].
template <class T>
Var scale_rows_by_weights(Tape<T>& t, Var values, Var weights, size_t tokens) {
  const auto& V = t.val(values);
  const auto& W = t.val(weights);
  const size_t d = V.cols();
  const size_t groups = W.rows();
  require(W.cols() == tokens && V.rows() == groups * tokens,
          "scale_rows_by_weights: shapes disagree");
  Tensor<T> out(V.shape());
  for (size_t r = 0; r < groups * tokens; ++r) {
    const T w = W[r];
    for (size_t j = 0; j < d; ++j) out[r * d + j] = w * V[r * d + j];
  }
  const bool ng = t.needs_grad(values) || t.needs_grad(weights);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, values, weights, tokens](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      const auto& V2 = tp.val(values);
      const auto& W2 = tp.val(weights);
      const size_t d = V2.cols();
      const size_t rows = V2.rows();
      if (tp.needs_grad(values)) {
        auto& gv = tp.grad(values);
        for (size_t r = 0; r < rows; ++r) {
          const T w = W2[r];
          for (size_t j = 0; j < d; ++j) gv[r * d + j] += w * go[r * d + j];
        }
      }
      if (tp.needs_grad(weights)) {
        auto& gw = tp.grad(weights);
        for (size_t r = 0; r < rows; ++r) {
          double acc = 0.0;
          for (size_t j = 0; j < d; ++j)
            acc += double(go[r * d + j]) * double(V2[r * d + j]);
          gw[r] += T(acc);
        }
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// Mean cross-entropy over rows: -log softmax(logits)[label].
template <class T>
Var cross_entropy_mean(Tape<T>& t, Var logits, std::vector<int> labels) {
  const auto& Z = t.val(logits);
  const size_t n = Z.cols();
  const size_t m = Z.rows();
  require(labels.size() == m, "cross_entropy: ", labels.size(), " labels for ", m,
          " rows");
  for (int y : labels) require(y >= 0 && size_t(y) < n, "cross_entropy: label ", y,
                               " out of [0,", n, ")");
  Tensor<T> probs({m, n});
  double loss = 0.0;
  for (size_t i = 0; i < m; ++i) {
    const T* row = Z.data() + i * n;
    T mx = row[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (size_t j = 0; j < n; ++j) denom += std::exp(double(row[j] - mx));
    const double lse = std::log(denom) + double(mx);
    loss += lse - double(row[labels[i]]);
    for (size_t j = 0; j < n; ++j)
      probs[i * n + j] = T(std::exp(double(row[j] - mx)) / denom);
  }
  Tensor<T> out = Tensor<T>::scalar(T(loss / double(m)));
  const bool ng = t.needs_grad(logits);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, logits, probs, labels, m, n](Tape<T>& tp) {
      const T g = tp.grad(self)[0] / T(m);
      auto& gz = tp.grad(logits);
      for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
          T p = probs[i * n + j];
          if (j == size_t(labels[i])) p -= T(1);
          gz[i * n + j] += g * p;
        }
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

}  // namespace sgg
