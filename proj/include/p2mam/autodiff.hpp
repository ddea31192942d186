#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "p2mam/matrix.hpp"

namespace p2mam::ad {

class Tape;

// Handle to a node on a Tape. Only valid for the tape that created it.
struct Var {
  std::size_t id = 0;
};

// Records a computation for one example. Nodes are appended in topological
// order, so backward() is a single reverse sweep. A tape built with
// grad_enabled = false stores values only and cannot run backward().
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Leaf that owns its value. Its gradient is readable via grad() after backward().
  Var leaf(Matrix value, bool requires_grad = true);
  // Leaf viewing an external matrix, which must outlive the tape. When grad_sink
  // is non-null, backward() accumulates this leaf's gradient into it directly.
  Var parameter(const Matrix& value, Matrix* grad_sink);

  Var push(Matrix value, std::span<const Var> parents, BackwardFn backward);
  Var push(Matrix value, std::initializer_list<Var> parents, BackwardFn backward) {
    return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
  }

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer for a node, allocated as zeros on first access.
  Matrix& grad(Var v) { return grad_at(v.id); }
  Matrix& grad_at(std::size_t id);
  bool has_grad(Var v) const;

  // Seeds d(output)/d(output) = 1 for a 1x1 output and sweeps in reverse.
  void backward(Var output);

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    Matrix* grad_sink = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

Var add(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var matmul(Tape& t, Var a, Var b);
// a * b^T over rows [b_row_begin, rows(b)) of b.
Var matmul_nt(Tape& t, Var a, Var b, std::size_t b_row_begin = 0);
// Rows of table selected by index; repeated indices accumulate on backward.
Var gather_rows(Tape& t, Var table, std::span<const std::size_t> indices);
Var row(Tape& t, Var a, std::size_t r);
Var concat_cols(Tape& t, std::span<const Var> parts);
// Softmax of a 1 x n row after dividing by scale; masked entries are 0.
Var masked_softmax(Tape& t, Var logits, const std::vector<bool>& masked, double scale);
// sum(a .* weights) as a 1x1 node.
Var weighted_sum(Tape& t, Var a, const Matrix& weights);

// Fused softmax + negative log-likelihood over a 1 x m logit row. The node
// value is the 1x1 loss; probabilities receives the normalized scores.
// Backward applies d logits = probabilities - onehot(target).
Var softmax_cross_entropy(Tape& t, Var logits, std::size_t target, Matrix* probabilities = nullptr);

}  // namespace p2mam::ad
