#include "p2mam/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/core.h>

#include "p2mam/errors.hpp"

namespace p2mam {

GradCheckResult grad_check(const std::function<double()>& f, std::span<Matrix* const> params,
                           std::span<const Matrix* const> analytic, double h) {
  if (params.size() != analytic.size()) throw FormatError("grad_check: tensor count mismatch");
  const auto eval = [&] {
    const double value = f();
    if (!std::isfinite(value)) throw NumericalError("grad_check: objective is not finite");
    return value;
  };
  eval();

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& theta = *params[p];
    if (!theta.same_shape(*analytic[p])) {
      throw FormatError(fmt::format("grad_check: gradient shape mismatch on tensor {}", p));
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double saved = theta[i];
      theta[i] = saved + h;
      const double up = eval();
      theta[i] = saved - h;
      const double down = eval();
      theta[i] = saved;

      const double numeric = (up - down) / (2.0 * h);
      const double a = (*analytic[p])[i];
      const double err =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_tensor = p;
        result.worst_index = i;
      }
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace p2mam
