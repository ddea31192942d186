#include "p2mam/adam.hpp"

#include <cmath>

#include <fmt/core.h>

#include "p2mam/errors.hpp"

namespace p2mam {

AdamState::AdamState(std::span<const Matrix* const> params, AdamOptions opts) : options(opts) {
  first_moment.reserve(params.size());
  second_moment.reserve(params.size());
  for (const Matrix* p : params) {
    first_moment.push_back(Matrix::zeros_like(*p));
    second_moment.push_back(Matrix::zeros_like(*p));
  }
}

void adam_step(AdamState& state, std::span<Matrix* const> params, std::span<const Matrix* const> grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw FormatError(fmt::format("adam: {} params, {} grads, {} moments", params.size(), grads.size(),
                                  state.first_moment.size()));
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p]->same_shape(*grads[p]) || !params[p]->same_shape(state.first_moment[p])) {
      throw FormatError(fmt::format("adam: shape mismatch on tensor {}", p));
    }
    if (!grads[p]->all_finite()) {
      throw NumericalError(fmt::format("adam: non-finite gradient in tensor {} at step {}", p,
                                       state.step + 1));
    }
  }

  const AdamOptions& o = state.options;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(o.beta1, t);
  const double correction2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& theta = *params[p];
    const Matrix& g = *grads[p];
    Matrix& m = state.first_moment[p];
    Matrix& v = state.second_moment[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      theta[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
    }
  }
}

}  // namespace p2mam
