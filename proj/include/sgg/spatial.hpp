#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "sgg/ops.hpp"

namespace sgg {

// Spatial ops: bilinear sampling, 3x3 convolution, deformable convolution,
// pooling, patch tokenization. Image tensors are row-major [.., H, W].

namespace spatial_detail {

// Two-level lerp evaluation of a bilinear sample with zero padding outside
// [0,H-1] x [0,W-1]. The lerp form makes integer coordinates and constant
// grids exact. Derivatives are exact linear coefficients.
template <class T>
struct BilerpResult {
  T value = T(0);
  T d_dy = T(0), d_dx = T(0);  // w.r.t. coordinates
  long y0 = 0, x0 = 0;
  T c00 = T(0), c01 = T(0), c10 = T(0), c11 = T(0);  // grid coefficients
};

template <class T>
BilerpResult<T> bilerp(const T* grid, size_t H, size_t W, T y, T x) {
  BilerpResult<T> r;
  const T yf = std::floor(y);
  const T xf = std::floor(x);
  r.y0 = long(yf);
  r.x0 = long(xf);
  const T fy = y - yf;
  const T fx = x - xf;
  auto at = [&](long yy, long xx) -> T {
    if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) return T(0);
    return grid[size_t(yy) * W + size_t(xx)];
  };
  const T v00 = at(r.y0, r.x0);
  const T v01 = at(r.y0, r.x0 + 1);
  const T v10 = at(r.y0 + 1, r.x0);
  const T v11 = at(r.y0 + 1, r.x0 + 1);
  const T top = v00 + fx * (v01 - v00);
  const T bot = v10 + fx * (v11 - v10);
  r.value = top + fy * (bot - top);
  r.d_dx = (T(1) - fy) * (v01 - v00) + fy * (v11 - v10);
  r.d_dy = bot - top;
  r.c00 = (T(1) - fy) * (T(1) - fx);
  r.c01 = (T(1) - fy) * fx;
  r.c10 = fy * (T(1) - fx);
  r.c11 = fy * fx;
  return r;
}

template <class T>
void scatter_bilerp(T* ggrid, size_t H, size_t W, const BilerpResult<T>& r, T g) {
  auto put = [&](long yy, long xx, T c) {
    if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) return;
    ggrid[size_t(yy) * W + size_t(xx)] += c * g;
  };
  put(r.y0, r.x0, r.c00);
  put(r.y0, r.x0 + 1, r.c01);
  put(r.y0 + 1, r.x0, r.c10);
  put(r.y0 + 1, r.x0 + 1, r.c11);
}

}  // namespace spatial_detail

// Single bilinear sample of a [H,W] grid at coords = (x, y), both
// differentiable. Out-of-range coordinates sample as zero.
template <class T>
Var bilinear_sample(Tape<T>& t, Var grid, Var coords) {
  const auto& G = t.val(grid);
  const auto& C = t.val(coords);
  require(G.ndim() == 2, "bilinear_sample: grid must be [H,W]");
  require(C.size() == 2, "bilinear_sample: coords must be (x, y)");
  const size_t H = G.dim(0), W = G.dim(1);
  auto r = spatial_detail::bilerp(G.data(), H, W, C[1], C[0]);
  Tensor<T> out = Tensor<T>::scalar(T(r.value));
  const bool ng = t.needs_grad(grid) || t.needs_grad(coords);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, grid, coords, H, W](Tape<T>& tp) {
      const T g = tp.grad(self)[0];
      const auto& G2 = tp.val(grid);
      const auto& C2 = tp.val(coords);
      auto r2 = spatial_detail::bilerp(G2.data(), H, W, C2[1], C2[0]);
      if (tp.needs_grad(grid))
        spatial_detail::scatter_bilerp(tp.grad(grid).data(), H, W, r2, g);
      if (tp.needs_grad(coords)) {
        auto& gc = tp.grad(coords);
        gc[0] += g * r2.d_dx;
        gc[1] += g * r2.d_dy;
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// x: [batch, cin, H, W], weight: [cout, cin, 3, 3], bias: [cout].
// Zero padding 1, accumulation in 64-bit with a fixed tap order shared with
// deform_conv3x3 so the two are bitwise comparable at zero offsets.
template <class T>
Var conv3x3(Tape<T>& t, Var x, Var weight, Var bias, size_t batch, size_t cin,
            size_t cout, size_t H, size_t W) {
  const auto& X = t.val(x);
  const auto& Wt = t.val(weight);
  const auto& Bt = t.val(bias);
  require(X.size() == batch * cin * H * W, "conv3x3: input size");
  require(Wt.size() == cout * cin * 9, "conv3x3: weight size");
  require(Bt.size() == cout, "conv3x3: bias size");
  Tensor<T> out({batch, cout, H, W});
  const size_t plane = H * W;
  parallel_for(batch, [&](size_t b0, size_t b1) {
    for (size_t b = b0; b < b1; ++b) {
      for (size_t co = 0; co < cout; ++co) {
        T* op = out.data() + (b * cout + co) * plane;
        for (size_t y = 0; y < H; ++y) {
          for (size_t xx = 0; xx < W; ++xx) {
            T acc = Bt[co];
            for (size_t ci = 0; ci < cin; ++ci) {
              const T* ip = X.data() + (b * cin + ci) * plane;
              for (int ty = 0; ty < 3; ++ty) {
                const long sy = long(y) + ty - 1;
                for (int tx = 0; tx < 3; ++tx) {
                  const long sx = long(xx) + tx - 1;
                  T v = T(0);
                  if (sy >= 0 && sx >= 0 && sy < long(H) && sx < long(W))
                    v = ip[size_t(sy) * W + size_t(sx)];
                  acc += Wt[((co * cin + ci) * 3 + ty) * 3 + tx] * v;
                }
              }
            }
            op[y * W + xx] = acc;
          }
        }
      }
    }
  });
  const bool ng = t.needs_grad(x) || t.needs_grad(weight) || t.needs_grad(bias);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, weight, bias, batch, cin, cout, H, W, plane](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      const auto& X2 = tp.val(x);
      const auto& W2 = tp.val(weight);
      if (tp.needs_grad(x)) {
        auto& gx = tp.grad(x);
        parallel_for(batch, [&](size_t b0, size_t b1) {
          for (size_t b = b0; b < b1; ++b)
            for (size_t co = 0; co < cout; ++co) {
              const T* gop = go.data() + (b * cout + co) * plane;
              for (size_t ci = 0; ci < cin; ++ci) {
                T* gip = gx.data() + (b * cin + ci) * plane;
                for (size_t y = 0; y < H; ++y)
                  for (size_t xx = 0; xx < W; ++xx) {
                    const T g = gop[y * W + xx];
                    for (int ty = 0; ty < 3; ++ty) {
                      const long sy = long(y) + ty - 1;
                      if (sy < 0 || sy >= long(H)) continue;
                      for (int tx = 0; tx < 3; ++tx) {
                        const long sx = long(xx) + tx - 1;
                        if (sx < 0 || sx >= long(W)) continue;
                        gip[size_t(sy) * W + size_t(sx)] +=
                            g * W2[((co * cin + ci) * 3 + ty) * 3 + tx];
                      }
                    }
                  }
              }
            }
        });
      }
      if (tp.needs_grad(weight) || tp.needs_grad(bias)) {
        std::vector<double> gw(cout * cin * 9, 0.0), gb(cout, 0.0);
        for (size_t b = 0; b < batch; ++b)
          for (size_t co = 0; co < cout; ++co) {
            const T* gop = go.data() + (b * cout + co) * plane;
            for (size_t y = 0; y < H; ++y)
              for (size_t xx = 0; xx < W; ++xx) {
                const double g = double(gop[y * W + xx]);
                gb[co] += g;
                for (size_t ci = 0; ci < cin; ++ci) {
                  const T* ip = X2.data() + (b * cin + ci) * plane;
                  for (int ty = 0; ty < 3; ++ty) {
                    const long sy = long(y) + ty - 1;
                    if (sy < 0 || sy >= long(H)) continue;
                    for (int tx = 0; tx < 3; ++tx) {
                      const long sx = long(xx) + tx - 1;
                      if (sx < 0 || sx >= long(W)) continue;
                      gw[((co * cin + ci) * 3 + ty) * 3 + tx] +=
                          g * double(ip[size_t(sy) * W + size_t(sx)]);
                    }
                  }
                }
              }
          }
        if (tp.needs_grad(weight)) {
          auto& gwt = tp.grad(weight);
          for (size_t i = 0; i < gw.size(); ++i) gwt[i] += T(gw[i]);
        }
        if (tp.needs_grad(bias)) {
          auto& gbt = tp.grad(bias);
          for (size_t i = 0; i < gb.size(); ++i) gbt[i] += T(gb[i]);
        }
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// Single-channel 3x3 deformable convolution. offsets: [batch, 18, H, W],
// channel 2*tap = dy and 2*tap+1 = dx for tap = ty*3+tx. Each tap samples
// the input bilinearly at (y+ty-1+dy, x+tx-1+dx); gradients flow to input,
// weights, bias and offsets.
template <class T>
Var deform_conv3x3(Tape<T>& t, Var x, Var weight, Var bias, Var offsets,
                   size_t batch, size_t H, size_t W) {
  const auto& X = t.val(x);
  const auto& Wt = t.val(weight);
  const auto& Bt = t.val(bias);
  const auto& Off = t.val(offsets);
  require(X.size() == batch * H * W, "deform_conv3x3: input size");
  require(Wt.size() == 9 && Bt.size() == 1, "deform_conv3x3: weight/bias size");
  require(Off.size() == batch * 18 * H * W, "deform_conv3x3: offsets size");
  const size_t plane = H * W;
  Tensor<T> out({batch, H, W});
  parallel_for(batch, [&](size_t b0, size_t b1) {
    for (size_t b = b0; b < b1; ++b) {
      const T* ip = X.data() + b * plane;
      const T* off = Off.data() + b * 18 * plane;
      T* op = out.data() + b * plane;
      for (size_t y = 0; y < H; ++y)
        for (size_t xx = 0; xx < W; ++xx) {
          T acc = Bt[0];
          for (int tap = 0; tap < 9; ++tap) {
            const int ty = tap / 3, tx = tap % 3;
            const T dy = off[(2 * tap) * plane + y * W + xx];
            const T dx = off[(2 * tap + 1) * plane + y * W + xx];
            auto r = spatial_detail::bilerp(ip, H, W, T(y) + T(ty - 1) + dy,
                                            T(xx) + T(tx - 1) + dx);
            acc += Wt[tap] * r.value;
          }
          op[y * W + xx] = acc;
        }
    }
  });
  const bool ng = t.needs_grad(x) || t.needs_grad(weight) || t.needs_grad(bias) ||
                  t.needs_grad(offsets);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, weight, bias, offsets, batch, H, W, plane](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      const auto& X2 = tp.val(x);
      const auto& W2 = tp.val(weight);
      const auto& Off2 = tp.val(offsets);
      const bool need_x = tp.needs_grad(x);
      const bool need_off = tp.needs_grad(offsets);
      std::vector<double> gw_stage(batch * 9, 0.0), gb_stage(batch, 0.0);
      T* gx = need_x ? tp.grad(x).data() : nullptr;
      T* goff = need_off ? tp.grad(offsets).data() : nullptr;
      parallel_for(batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b) {
          const T* ip = X2.data() + b * plane;
          const T* off = Off2.data() + b * 18 * plane;
          const T* gop = go.data() + b * plane;
          for (size_t y = 0; y < H; ++y)
            for (size_t xx = 0; xx < W; ++xx) {
              const T g = gop[y * W + xx];
              if (g == T(0)) continue;
              gb_stage[b] += double(g);
              for (int tap = 0; tap < 9; ++tap) {
                const int ty = tap / 3, tx = tap % 3;
                const T dy = off[(2 * tap) * plane + y * W + xx];
                const T dx = off[(2 * tap + 1) * plane + y * W + xx];
                auto r = spatial_detail::bilerp(ip, H, W, T(y) + T(ty - 1) + dy,
                                                T(xx) + T(tx - 1) + dx);
                const T w = W2[tap];
                gw_stage[b * 9 + tap] += double(g) * double(r.value);
                if (gx) spatial_detail::scatter_bilerp(gx + b * plane, H, W, r, T(g * w));
                if (goff) {
                  goff[b * 18 * plane + (2 * tap) * plane + y * W + xx] += g * w * r.d_dy;
                  goff[b * 18 * plane + (2 * tap + 1) * plane + y * W + xx] += g * w * r.d_dx;
                }
              }
            }
        }
      });
      if (tp.needs_grad(weight)) {
        auto& gwt = tp.grad(weight);
        for (int tap = 0; tap < 9; ++tap) {
          double acc = 0.0;
          for (size_t b = 0; b < batch; ++b) acc += gw_stage[b * 9 + tap];
          gwt[tap] += T(acc);
        }
      }
      if (tp.needs_grad(bias)) {
        double acc = 0.0;
        for (size_t b = 0; b < batch; ++b) acc += gb_stage[b];
        tp.grad(bias)[0] += T(acc);
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// Mean pooling with a square window; H and W must be divisible by the stride.
template <class T>
Var avg_pool2d(Tape<T>& t, Var x, size_t batch, size_t channels, size_t H,
               size_t W, size_t stride) {
  const auto& X = t.val(x);
  require(X.size() == batch * channels * H * W, "avg_pool2d: input size");
  require(H % stride == 0 && W % stride == 0, "avg_pool2d: ", H, "x", W,
          " not divisible by ", stride);
  const size_t Ho = H / stride, Wo = W / stride;
  Tensor<T> out({batch, channels, Ho, Wo});
  const double inv = 1.0 / double(stride * stride);
  for (size_t bc = 0; bc < batch * channels; ++bc) {
    const T* ip = X.data() + bc * H * W;
    T* op = out.data() + bc * Ho * Wo;
    for (size_t y = 0; y < Ho; ++y)
      for (size_t xx = 0; xx < Wo; ++xx) {
        double acc = 0.0;
        for (size_t wy = 0; wy < stride; ++wy)
          for (size_t wx = 0; wx < stride; ++wx)
            acc += double(ip[(y * stride + wy) * W + (xx * stride + wx)]);
        op[y * Wo + xx] = T(acc * inv);
      }
  }
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, batch, channels, H, W, stride](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      auto& gx = tp.grad(x);
      const size_t Ho = H / stride, Wo = W / stride;
      const T inv = T(1) / T(stride * stride);
      for (size_t bc = 0; bc < batch * channels; ++bc) {
        const T* gop = go.data() + bc * Ho * Wo;
        T* gip = gx.data() + bc * H * W;
        for (size_t y = 0; y < Ho; ++y)
          for (size_t xx = 0; xx < Wo; ++xx) {
            const T g = gop[y * Wo + xx] * inv;
            for (size_t wy = 0; wy < stride; ++wy)
              for (size_t wx = 0; wx < stride; ++wx)
                gip[(y * stride + wy) * W + (xx * stride + wx)] += g;
          }
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// [batch, H*W] maps -> [batch*(H/P)*(W/P), P*P] tokens. Token (r, c) is the
// flattened P x P block at block-row r, block-col c, tokens in row-major
// block order.
template <class T>
Var patchify(Tape<T>& t, Var x, size_t batch, size_t H, size_t W, size_t P) {
  const auto& X = t.val(x);
  require(H % P == 0 && W % P == 0, "patchify: ", H, "x", W, " not divisible by ", P);
  require(X.size() == batch * H * W, "patchify: input size ", X.size(), " vs ",
          batch * H * W);
  const size_t br = H / P, bc = W / P, ntok = br * bc, td = P * P;
  Tensor<T> out({batch * ntok, td});
  for (size_t b = 0; b < batch; ++b) {
    const T* ip = X.data() + b * H * W;
    for (size_t r = 0; r < br; ++r)
      for (size_t c = 0; c < bc; ++c) {
        T* op = out.data() + (b * ntok + r * bc + c) * td;
        for (size_t py = 0; py < P; ++py)
          for (size_t px = 0; px < P; ++px)
            op[py * P + px] = ip[(r * P + py) * W + (c * P + px)];
      }
  }
  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, x, batch, H, W, P](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      auto& gx = tp.grad(x);
      const size_t br = H / P, bc = W / P, ntok = br * bc, td = P * P;
      for (size_t b = 0; b < batch; ++b) {
        T* gip = gx.data() + b * H * W;
        for (size_t r = 0; r < br; ++r)
          for (size_t c = 0; c < bc; ++c) {
            const T* gop = go.data() + (b * ntok + r * bc + c) * td;
            for (size_t py = 0; py < P; ++py)
              for (size_t px = 0; px < P; ++px)
                gip[(r * P + py) * W + (c * P + px)] += gop[py * P + px];
          }
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

// Inverse of patchify.
template <class T>
Var unpatchify(Tape<T>& t, Var tokens, size_t batch, size_t H, size_t W, size_t P) {
  const auto& Tk = t.val(tokens);
  const size_t br = H / P, bc = W / P, ntok = br * bc, td = P * P;
  require(Tk.size() == batch * ntok * td, "unpatchify: input size");
  Tensor<T> out({batch, H * W});
  for (size_t b = 0; b < batch; ++b) {
    T* op = out.data() + b * H * W;
    for (size_t r = 0; r < br; ++r)
      for (size_t c = 0; c < bc; ++c) {
        const T* ip = Tk.data() + (b * ntok + r * bc + c) * td;
        for (size_t py = 0; py < P; ++py)
          for (size_t px = 0; px < P; ++px)
            op[(r * P + py) * W + (c * P + px)] = ip[py * P + px];
      }
  }
  const bool ng = t.needs_grad(tokens);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    bw = [self, tokens, batch, H, W, P](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      auto& gt = tp.grad(tokens);
      const size_t br = H / P, bc = W / P, ntok = br * bc, td = P * P;
      for (size_t b = 0; b < batch; ++b) {
        const T* gop = go.data() + b * H * W;
        for (size_t r = 0; r < br; ++r)
          for (size_t c = 0; c < bc; ++c) {
            T* gip = gt.data() + (b * ntok + r * bc + c) * td;
            for (size_t py = 0; py < P; ++py)
              for (size_t px = 0; px < P; ++px)
                gip[py * P + px] += gop[(r * P + py) * W + (c * P + px)];
          }
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

namespace spatial_detail {
// Upsample table: dst P x P pixel -> source coords in the (P/2) x (P/2)
// quarter, half-pixel centers, clamped to the quarter border so constant
// quarters upsample exactly.
struct UpsampleEntry {
  int y0, x0;
  double fy, fx;
};
inline std::vector<UpsampleEntry> upsample_table(size_t P) {
  const size_t Q = P / 2;
  std::vector<UpsampleEntry> tab(P * P);
  for (size_t y = 0; y < P; ++y)
    for (size_t x = 0; x < P; ++x) {
      double sy = (double(y) + 0.5) * 0.5 - 0.5;
      double sx = (double(x) + 0.5) * 0.5 - 0.5;
      sy = std::min(std::max(sy, 0.0), double(Q - 1));
      sx = std::min(std::max(sx, 0.0), double(Q - 1));
      UpsampleEntry e;
      e.y0 = int(std::floor(sy));
      e.x0 = int(std::floor(sx));
      if (e.y0 >= int(Q - 1)) e.y0 = int(Q) - 2 >= 0 ? int(Q) - 2 : 0;
      if (e.x0 >= int(Q - 1)) e.x0 = int(Q) - 2 >= 0 ? int(Q) - 2 : 0;
      e.fy = sy - e.y0;
      e.fx = sx - e.x0;
      tab[y * P + x] = e;
    }
  return tab;
}
}  // namespace spatial_detail

// Fine-token expansion for the second OEM layer. For each map, the selected
// patch tokens are split into four (P/2)x(P/2) quarters (TL, TR, BL, BR),
// each bilinearly upsampled back to P x P; unselected tokens pass through.
// Output rows per map: 4*|selected| fine tokens (selected ascending) followed
// by the unselected tokens ascending. Row width is P*P.
template <class T>
Var fine_tokens(Tape<T>& t, Var x, const std::vector<std::vector<int>>& selected,
                size_t H, size_t W, size_t P) {
  const auto& X = t.val(x);
  const size_t batch = selected.size();
  require(X.size() == batch * H * W, "fine_tokens: input size");
  require(P % 2 == 0 && P >= 4, "fine_tokens: patch side must be even and >= 4");
  const size_t bc = W / P, ntok = (H / P) * bc, td = P * P, Q = P / 2;
  const size_t nsel = selected.empty() ? 0 : selected[0].size();
  for (const auto& s : selected)
    require(s.size() == nsel, "fine_tokens: ragged selection");
  const size_t rows_per = 4 * nsel + (ntok - nsel);
  const auto tab = spatial_detail::upsample_table(P);
  Tensor<T> out({batch * rows_per, td});

  // quarter q: (qy,qx) = (q/2, q%2) block of the patch
  auto emit = [&](const T* ip, size_t b, T* op) {
    std::vector<char> is_sel(ntok, 0);
    for (int s : selected[b]) is_sel[size_t(s)] = 1;
    size_t row = 0;
    for (int tok : selected[b]) {
      const size_t r = size_t(tok) / bc, c = size_t(tok) % bc;
      for (int q = 0; q < 4; ++q, ++row) {
        const size_t qy = size_t(q / 2) * Q, qx = size_t(q % 2) * Q;
        T* orow = op + row * td;
        for (size_t y = 0; y < P; ++y)
          for (size_t xx = 0; xx < P; ++xx) {
            const auto& e = tab[y * P + xx];
            auto src = [&](int dy, int dx) {
              return double(ip[(r * P + qy + size_t(e.y0 + dy)) * W +
                               (c * P + qx + size_t(e.x0 + dx))]);
            };
            const double top = src(0, 0) + e.fx * (src(0, 1) - src(0, 0));
            const double bot = src(1, 0) + e.fx * (src(1, 1) - src(1, 0));
            orow[y * P + xx] = T(top + e.fy * (bot - top));
          }
      }
    }
    for (size_t tok = 0; tok < ntok; ++tok) {
      if (is_sel[tok]) continue;
      const size_t r = tok / bc, c = tok % bc;
      T* orow = op + row * td;
      ++row;
      for (size_t py = 0; py < P; ++py)
        for (size_t px = 0; px < P; ++px)
          orow[py * P + px] = ip[(r * P + py) * W + (c * P + px)];
    }
  };
  for (size_t b = 0; b < batch; ++b)
    emit(X.data() + b * H * W, b, out.data() + b * rows_per * td);

  const bool ng = t.needs_grad(x);
  std::function<void(Tape<T>&)> bw;
  if (ng) {
    Var self = op_detail::self_var(t);
    auto sel = selected;
    bw = [self, x, sel, H, W, P, bc, ntok, td, Q, rows_per, tab](Tape<T>& tp) {
      const auto& go = tp.grad(self);
      auto& gx = tp.grad(x);
      for (size_t b = 0; b < sel.size(); ++b) {
        T* gip = gx.data() + b * H * W;
        const T* gop = go.data() + b * rows_per * td;
        std::vector<char> is_sel(ntok, 0);
        for (int s : sel[b]) is_sel[size_t(s)] = 1;
        size_t row = 0;
        for (int tok : sel[b]) {
          const size_t r = size_t(tok) / bc, c = size_t(tok) % bc;
          for (int q = 0; q < 4; ++q, ++row) {
            const size_t qy = size_t(q / 2) * Q, qx = size_t(q % 2) * Q;
            const T* grow = gop + row * td;
            for (size_t y = 0; y < P; ++y)
              for (size_t xx = 0; xx < P; ++xx) {
                const auto& e = tab[y * P + xx];
                const double g = double(grow[y * P + xx]);
                auto put = [&](int dy, int dx, double ccoef) {
                  gip[(r * P + qy + size_t(e.y0 + dy)) * W +
                      (c * P + qx + size_t(e.x0 + dx))] += T(ccoef * g);
                };
                put(0, 0, (1 - e.fy) * (1 - e.fx));
                put(0, 1, (1 - e.fy) * e.fx);
                put(1, 0, e.fy * (1 - e.fx));
                put(1, 1, e.fy * e.fx);
              }
          }
        }
        for (size_t tok = 0; tok < ntok; ++tok) {
          if (is_sel[tok]) continue;
          const size_t r = tok / bc, c = tok % bc;
          const T* grow = gop + row * td;
          ++row;
          for (size_t py = 0; py < P; ++py)
            for (size_t px = 0; px < P; ++px)
              gip[(r * P + py) * W + (c * P + px)] += grow[py * P + px];
        }
      }
    };
  }
  return t.make(std::move(out), ng, std::move(bw));
}

}  // namespace sgg
