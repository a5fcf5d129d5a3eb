#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "shadowpool/optim.hpp"

namespace shadowpool {

struct GradCheckReport {
  double max_relative_error = 0.0;
  size_t worst_slot = 0;
  size_t worst_index = 0;
  size_t checked = 0;

  bool passes(double tolerance) const { return max_relative_error < tolerance; }
};

// Central finite differences against analytic gradients, parameter by
// parameter. loss_fn re-evaluates the loss at the current parameter values.
// Relative error is measured against max(1, |analytic|, |numeric|).
inline GradCheckReport grad_check(std::span<const ParamRef> params,
                                  const std::function<double()>& loss_fn,
                                  const std::vector<std::vector<double>>& analytic,
                                  double step = 1e-5) {
  if (params.size() != analytic.size()) {
    throw ShapeError("grad_check: analytic gradient slot count mismatch");
  }
  GradCheckReport report;
  for (size_t slot = 0; slot < params.size(); ++slot) {
    std::vector<double>& values = *params[slot].value;
    if (values.size() != analytic[slot].size()) {
      throw ShapeError("grad_check: analytic gradient size mismatch");
    }
    for (size_t k = 0; k < values.size(); ++k) {
      const double saved = values[k];
      values[k] = saved + step;
      const double up = loss_fn();
      values[k] = saved - step;
      const double down = loss_fn();
      values[k] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite loss during finite differences");
      }
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[slot][k];
      const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      const double rel = std::fabs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_slot = slot;
        report.worst_index = k;
      }
    }
  }
  return report;
}

}  // namespace shadowpool
