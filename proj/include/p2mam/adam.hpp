#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "p2mam/matrix.hpp"

namespace p2mam {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment accumulators, one pair per parameter tensor.
struct AdamState {
  AdamOptions options;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t step = 0;

  AdamState() = default;
  AdamState(std::span<const Matrix* const> params, AdamOptions opts);
};

// One bias-corrected Adam update: theta -= lr * m_hat / (sqrt(v_hat) + eps).
// A non-finite gradient aborts the step before anything is modified.
void adam_step(AdamState& state, std::span<Matrix* const> params, std::span<const Matrix* const> grads);

}  // namespace p2mam
