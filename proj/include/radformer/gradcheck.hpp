#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "radformer/tape.hpp"
#include "radformer/tensor.hpp"

namespace radformer {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_elem = 0;
  double analytic = 0.0;
  double numeric = 0.0;

  bool ok(double tol) const { return max_rel_err < tol; }
};

// Central finite-difference check of reverse-mode gradients. fn must be a
// pure scalar function of the given leaves; it is re-evaluated 2 times per
// input element, so keep the tensors small. Runs in double precision.
inline GradCheckResult grad_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.set_requires_grad(true);

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    auto scope = tape.activate();
    Tensor<double> loss = fn(inputs);
    tape.backward(loss);
    for (auto& t : inputs) {
      t.ensure_grad();
      analytic.push_back(t.grad());
    }
  }

  GradCheckResult res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& vals = inputs[i].values();
    for (std::size_t e = 0; e < vals.size(); ++e) {
      const double orig = vals[e];
      vals[e] = orig + h;
      const double f_plus = fn(inputs).item();
      vals[e] = orig - h;
      const double f_minus = fn(inputs).item();
      vals[e] = orig;
      const double fd = (f_plus - f_minus) / (2.0 * h);
      const double a = analytic[i][e];
      const double denom = std::max({1e-6, std::abs(a), std::abs(fd)});
      const double rel = std::abs(a - fd) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_input = i;
        res.worst_elem = e;
        res.analytic = a;
        res.numeric = fd;
      }
    }
  }
  return res;
}

}  // namespace radformer
