#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "pscdet/error.hpp"

namespace pscdet {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central finite differences per coordinate against a supplied analytic
// gradient. Relative error is |a-n| / max(1, |a|, |n|).
template <class LossFn>
GradCheckReport grad_check(LossFn&& loss, const std::vector<double>& params,
                           const std::vector<double>& analytic_grad,
                           double eps) {
  if (params.size() != analytic_grad.size()) {
    throw NumericsError("grad_check: gradient size mismatch");
  }
  std::vector<double> x = params;
  GradCheckReport rep;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + eps;
    const double fp = loss(x);
    x[i] = xi - eps;
    const double fm = loss(x);
    x[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericsError("grad_check: non-finite loss");
    }
    const double n = (fp - fm) / (2.0 * eps);
    const double a = analytic_grad[i];
    const double denom = std::max({1.0, std::fabs(a), std::fabs(n)});
    const double rel = std::fabs(a - n) / denom;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.index = i;
      rep.analytic = a;
      rep.numeric = n;
    }
  }
  return rep;
}

}  // namespace pscdet
