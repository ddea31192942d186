#pragma once

#include <functional>
#include <span>

#include "p2mam/matrix.hpp"

namespace p2mam {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

// Compares analytic gradients against central differences
// (f(x+h) - f(x-h)) / 2h, perturbing each coordinate of params in place.
// The error metric is |a - n| / max(1, |a|, |n|). f must read through the
// params pointers. Throws NumericalError if f is ever non-finite.
GradCheckResult grad_check(const std::function<double()>& f, std::span<Matrix* const> params,
                           std::span<const Matrix* const> analytic, double h = 1e-4);

}  // namespace p2mam
