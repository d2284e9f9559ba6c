#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "sgg/random.hpp"
#include "sgg/tape.hpp"

namespace sgg {

struct GradCheckResult {
  double max_rel_err = 0.0;
  size_t coords_checked = 0;
};

// Central finite differences against the tape's analytic gradients, on a
// 64-bit shadow instantiation of the model. For each sampled coordinate:
//   rel = |analytic - numeric| / max(1, |numeric|)
// and the maximum over all samples is returned.
inline GradCheckResult grad_check(
    const std::function<Var(Tape<double>&)>& build,
    std::span<Parameter<double>* const> params, int samples_per_param = 8,
    uint64_t seed = 0, double step = 1e-3) {
  auto eval = [&]() {
    Tape<double> tape;
    Var loss = build(tape);
    require<NumericError>(tape.val(loss).size() == 1,
                          "grad_check: function must be scalar-valued");
    const double v = tape.val(loss)[0];
    require<NumericError>(std::isfinite(v), "grad_check: non-finite function value");
    return v;
  };

  // Analytic gradients.
  std::vector<std::vector<double>> analytic;
  {
    for (auto* p : params)
      std::fill(p->grad.data(), p->grad.data() + p->grad.size(), 0.0);
    Tape<double> tape;
    Var loss = build(tape);
    require<NumericError>(std::isfinite(tape.val(loss)[0]),
                          "grad_check: non-finite function value");
    tape.backward(loss);
    for (auto* p : params) {
      analytic.emplace_back(p->grad.data(), p->grad.data() + p->grad.size());
      std::fill(p->grad.data(), p->grad.data() + p->grad.size(), 0.0);
    }
  }

  GradCheckResult res;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  auto probe = [&](size_t pi, size_t idx) {
    Parameter<double>& p = *params[pi];
    const double saved = p.value[idx];
    p.value[idx] = saved + step;
    const double fp = eval();
    p.value[idx] = saved - step;
    const double fm = eval();
    p.value[idx] = saved;
    const double numeric = (fp - fm) / (2.0 * step);
    const double rel =
        std::fabs(analytic[pi][idx] - numeric) / std::max(1.0, std::fabs(numeric));
    res.max_rel_err = std::max(res.max_rel_err, rel);
    res.coords_checked++;
  };
  if (samples_per_param > 0) {
    for (size_t pi = 0; pi < params.size(); ++pi) {
      const size_t n = params[pi]->value.size();
      const size_t count = std::min<size_t>(size_t(samples_per_param), n);
      for (size_t s = 0; s < count; ++s)
        probe(pi, n == count ? s : size_t(rng.below(n)));
    }
  } else {
    // samples_per_param == -budget: a total budget of random (param, coord)
    // probes, for large composites where per-parameter sampling is too slow
    const size_t budget = size_t(-samples_per_param);
    for (size_t s = 0; s < budget; ++s) {
      const size_t pi = size_t(rng.below(params.size()));
      probe(pi, size_t(rng.below(params[pi]->value.size())));
    }
  }
  return res;
}

}  // namespace sgg
