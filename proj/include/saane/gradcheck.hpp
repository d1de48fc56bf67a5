#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "saane/tensor.hpp"

namespace saane {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares analytic gradients against central finite differences.
//
// `loss(bool with_grads)` must rebuild the forward pass from the current
// parameter values and return the scalar loss; when `with_grads` is set it
// must also accumulate gradients into each Parameter::grad. The error is
// max over all parameter elements of |analytic - numeric| / max(1, |numeric|).
// Runs in double; finite differences are unreliable at single precision.
template <typename LossFn>
GradCheckReport grad_check(const std::vector<Parameter<double>*>& params, LossFn&& loss,
                           double eps) {
  if (eps < 1e-6 || eps > 1e-3) {
    throw Error("grad_check eps must lie in [1e-6, 1e-3], got " + std::to_string(eps));
  }
  const double first = loss(false);
  const double second = loss(false);
  if (first != second) {
    throw CheckError("grad_check: forward pass is not deterministic (two runs differ)");
  }

  for (Parameter<double>* p : params) p->zero_grad();
  loss(true);

  GradCheckReport report;
  for (Parameter<double>* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double plus = loss(false);
      p->value[i] = saved - eps;
      const double minus = loss(false);
      p->value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double analytic = p->grad[i];
      const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_parameter = p->name;
        report.worst_index = i;
        report.analytic = analytic;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace saane
