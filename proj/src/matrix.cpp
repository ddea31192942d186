#include "p2mam/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/core.h>

#include "p2mam/errors.hpp"

namespace p2mam {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw FormatError(fmt::format("matrix data has {} entries, expected {}x{}",
                                  data_.size(), rows, cols));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw FormatError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix& Matrix::operator+=(const Matrix& other) {
  if (!same_shape(other)) {
    throw FormatError(fmt::format("add: {}x{} vs {}x{}", rows_, cols_, other.rows_, other.cols_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& x : data_) x *= s;
  return *this;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw FormatError(fmt::format("matmul: {}x{} * {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b, std::size_t b_row_begin) {
  if (a.cols() != b.cols() || b_row_begin > b.rows()) {
    throw FormatError(fmt::format("matmul_nt: {}x{} * ({}x{})^T from row {}", a.rows(), a.cols(),
                                  b.rows(), b.cols(), b_row_begin));
  }
  Matrix out(a.rows(), b.rows() - b_row_begin);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto a_row = a.row(i);
    for (std::size_t j = b_row_begin; j < b.rows(); ++j) {
      const auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j - b_row_begin) = acc;
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  out += b;
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw FormatError("subtract: shape mismatch");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Matrix masked_row_softmax(const Matrix& logits, const std::vector<bool>& masked, double scale) {
  if (logits.rows() != 1) throw FormatError("masked_row_softmax expects a 1 x n row");
  if (!masked.empty() && masked.size() != logits.cols()) {
    throw FormatError(fmt::format("mask length {} vs {} logits", masked.size(), logits.cols()));
  }
  if (!(scale > 0.0)) throw ConfigError("softmax scale must be positive");
  const auto is_masked = [&](std::size_t i) { return !masked.empty() && masked[i]; };

  double max_logit = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < logits.cols(); ++i) {
    if (is_masked(i)) continue;
    max_logit = std::max(max_logit, logits[i] / scale);
    any = true;
  }
  if (!any) throw NumericalError("softmax over an all-masked row");

  Matrix out(1, logits.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.cols(); ++i) {
    if (is_masked(i)) continue;
    out[i] = std::exp(logits[i] / scale - max_logit);
    total += out[i];
  }
  out *= 1.0 / total;
  return out;
}

double cross_entropy(const Matrix& scores, std::size_t target) {
  if (target >= scores.size()) {
    throw ConfigError(fmt::format("target {} outside {} candidates", target, scores.size()));
  }
  return -std::log(std::max(scores[target], 1e-12));
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace p2mam
