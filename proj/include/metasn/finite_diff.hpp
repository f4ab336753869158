#pragma once

// Central-difference gradient oracle over a collection of parameter tensors.
// Independent of the tape: callers re-evaluate their scalar function at
// perturbed parameter values.

#include <stdexcept>
#include <vector>

#include "metasn/tensor.hpp"

namespace metasn {

// f is any callable double(const std::vector<Tensor>&). Returns one tensor
// per parameter holding (f(p + step e) - f(p - step e)) / (2 step) per
// coordinate.
template <typename F>
std::vector<Tensor> finite_diff_gradient(F&& f, std::vector<Tensor> params, double step) {
  if (!(step > 0)) throw std::invalid_argument("finite_diff_gradient: step must be positive");
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (auto& p : params) grads.emplace_back(p.shape);
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].numel(); ++i) {
      const double saved = params[t].data[i];
      params[t].data[i] = saved + step;
      const double hi = f(params);
      params[t].data[i] = saved - step;
      const double lo = f(params);
      params[t].data[i] = saved;
      grads[t].data[i] = (hi - lo) / (2.0 * step);
    }
  }
  return grads;
}

// Guarded relative error used by the gradient checks: |a-b| scaled by the
// magnitude of the pair, floored so that near-zero gradient pairs with
// rounding-level noise do not blow up the ratio.
inline double guarded_rel_error(double a, double b) {
  const double denom = std::max(std::abs(a) + std::abs(b), 1e-6);
  return std::abs(a - b) / denom;
}

inline double max_rel_error(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, guarded_rel_error(a.data[i], b.data[i]));
  }
  return worst;
}

}  // namespace metasn
