#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace p2mam {

// Dense row-major matrix of doubles. Vectors are 1 x n matrices.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);
  static Matrix zeros_like(const Matrix& other) { return Matrix(other.rows_, other.cols_); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  void fill(double value);
  bool all_finite() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Shape mismatches throw FormatError; there is no implicit broadcasting.
Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T restricted to rows [b_row_begin, b.rows()) of b.
Matrix matmul_nt(const Matrix& a, const Matrix& b, std::size_t b_row_begin = 0);
Matrix transpose(const Matrix& a);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);

// Softmax of logits / scale over the entries whose mask flag is false.
// Masked entries are exactly zero. Max-subtracted for stability. An empty
// mask means nothing is masked. Throws if every entry is masked.
Matrix masked_row_softmax(const Matrix& logits, const std::vector<bool>& masked, double scale);

// -log(max(scores[target], 1e-12)); target is a 0-based column.
double cross_entropy(const Matrix& scores, std::size_t target);

double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace p2mam
