#pragma once

#include <cmath>
#include <cstdint>

#include "sgg/parameter.hpp"
#include "sgg/threadpool.hpp"

namespace sgg {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One AdamW update over every trainable parameter. Weight decay is
// decoupled: p <- p - lr*wd*p - lr * mhat / (sqrt(vhat) + eps).
// step_index is 1-based and drives bias correction.
template <class T>
void adamw_step(ParamStore<T>& store, const AdamWConfig& cfg, int64_t step_index) {
  require<ValidationError>(step_index >= 1, "adamw: step index must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(step_index));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(step_index));
  for (size_t pi = 0; pi < store.size(); ++pi) {
    Parameter<T>& p = store.at(pi);
    if (!p.trainable) continue;
    if (!p.grad.all_finite())
      throw NumericError(cat("non-finite gradient in parameter '", p.name,
                             "' at step ", step_index));
    if (!p.m.defined()) {
      p.m = Tensor<T>(p.value.shape());
      p.v = Tensor<T>(p.value.shape());
    }
    T* val = p.value.data();
    T* g = p.grad.data();
    T* m = p.m.data();
    T* v = p.v.data();
    const size_t n = p.value.size();
    parallel_for(n, [&](size_t i0, size_t i1) {
      for (size_t i = i0; i < i1; ++i) {
        const double gi = double(g[i]);
        const double mi = cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * gi;
        const double vi = cfg.beta2 * double(v[i]) + (1.0 - cfg.beta2) * gi * gi;
        m[i] = T(mi);
        v[i] = T(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        double x = double(val[i]);
        x -= cfg.lr * cfg.weight_decay * x;
        x -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        val[i] = T(x);
      }
    });
  }
}

}  // namespace sgg
