#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace vitbind {

struct GradCheckResult {
  double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// Central differences over every entry of `params`. The actual float step
// (x+h) - (x-h) is used as the denominator so float rounding of the perturbed
// parameter does not bias the estimate.
inline GradCheckResult finite_difference_check(std::span<float> params, std::span<const double> analytic,
                                               const std::function<double()>& loss, double step = 1e-3) {
  std::vector<double> numeric(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float original = params[i];
    const float plus = static_cast<float>(original + step);
    const float minus = static_cast<float>(original - step);
    params[i] = plus;
    const double f_plus = loss();
    params[i] = minus;
    const double f_minus = loss();
    params[i] = original;
    numeric[i] = (f_plus - f_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  GradCheckResult out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double e = analytic[i] - numeric[i];
    diff += e * e;
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
    out.max_abs_error = std::max(out.max_abs_error, std::abs(e));
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  out.relative_error = std::sqrt(diff) / denom;
  out.checked = params.size();
  return out;
}

}  // namespace vitbind
