#include "p2mam/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/core.h>

#include "p2mam/errors.hpp"

namespace p2mam::ad {

Var Tape::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {nodes_.size() - 1};
}

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = grad_enabled_ && requires_grad;
  nodes_.push_back(std::move(node));
  return {nodes_.size() - 1};
}

Var Tape::parameter(const Matrix& value, Matrix* grad_sink) {
  Node node;
  node.external = &value;
  if (grad_enabled_ && grad_sink != nullptr) {
    if (!grad_sink->same_shape(value)) throw FormatError("gradient sink shape mismatch");
    node.grad_sink = grad_sink;
    node.requires_grad = true;
  }
  nodes_.push_back(std::move(node));
  return {nodes_.size() - 1};
}

Var Tape::push(Matrix value, std::span<const Var> parents, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  if (grad_enabled_) {
    node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                     [&](Var p) { return nodes_[p.id].requires_grad; });
    if (node.requires_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return {nodes_.size() - 1};
}

const Matrix& Tape::value(Var v) const {
  const Node& node = nodes_[v.id];
  return node.external != nullptr ? *node.external : node.value;
}

Matrix& Tape::grad_at(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad_sink != nullptr) return *node.grad_sink;
  if (node.grad.empty()) {
    const Matrix& v = node.external != nullptr ? *node.external : node.value;
    node.grad = Matrix::zeros_like(v);
  }
  return node.grad;
}

bool Tape::has_grad(Var v) const {
  const Node& node = nodes_[v.id];
  return node.grad_sink != nullptr || !node.grad.empty();
}

void Tape::backward(Var output) {
  if (!grad_enabled_) throw ConfigError("backward() on a tape built without gradients");
  if (value(output).size() != 1) throw FormatError("backward() needs a 1x1 output");
  if (!nodes_[output.id].requires_grad) return;
  grad(output)[0] += 1.0;
  for (std::size_t id = output.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, id);
  }
}

namespace {

void require(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) {
    throw FormatError(
        fmt::format("{}: shapes {}x{} and {}x{}", op, a.rows(), a.cols(), b.rows(), b.cols()));
  }
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require(av.same_shape(bv), "add", av, bv);
  return t.push(av + bv, {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(b)) tp.grad(b) += g;
  });
}

Var scale(Tape& t, Var a, double s) {
  Matrix out = t.value(a);
  out *= s;
  return t.push(std::move(out), {a}, [a, s](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    Matrix& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var matmul(Tape& t, Var a, Var b) {
  Matrix out = p2mam::matmul(t.value(a), t.value(b));
  return t.push(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    const Matrix& av = tp.value(a);
    const Matrix& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      // dA = dC * B^T
      Matrix& ga = tp.grad(a);
      for (std::size_t i = 0; i < av.rows(); ++i) {
        const auto g_row = g.row(i);
        for (std::size_t k = 0; k < av.cols(); ++k) {
          const auto b_row = bv.row(k);
          double acc = 0.0;
          for (std::size_t j = 0; j < bv.cols(); ++j) acc += g_row[j] * b_row[j];
          ga(i, k) += acc;
        }
      }
    }
    if (tp.requires_grad(b)) {
      // dB = A^T * dC
      Matrix& gb = tp.grad(b);
      for (std::size_t i = 0; i < av.rows(); ++i) {
        const auto g_row = g.row(i);
        for (std::size_t k = 0; k < av.cols(); ++k) {
          const double aik = av(i, k);
          if (aik == 0.0) continue;
          auto gb_row = gb.row(k);
          for (std::size_t j = 0; j < bv.cols(); ++j) gb_row[j] += aik * g_row[j];
        }
      }
    }
  });
}

Var matmul_nt(Tape& t, Var a, Var b, std::size_t b_row_begin) {
  Matrix out = p2mam::matmul_nt(t.value(a), t.value(b), b_row_begin);
  return t.push(std::move(out), {a, b}, [a, b, b_row_begin](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    const Matrix& av = tp.value(a);
    const Matrix& bv = tp.value(b);
    const std::size_t used = bv.rows() - b_row_begin;
    if (tp.requires_grad(a)) {
      // dA = dC * B
      Matrix& ga = tp.grad(a);
      for (std::size_t i = 0; i < av.rows(); ++i) {
        auto ga_row = ga.row(i);
        for (std::size_t j = 0; j < used; ++j) {
          const double gij = g(i, j);
          if (gij == 0.0) continue;
          const auto b_row = bv.row(j + b_row_begin);
          for (std::size_t k = 0; k < av.cols(); ++k) ga_row[k] += gij * b_row[k];
        }
      }
    }
    if (tp.requires_grad(b)) {
      // dB = dC^T * A
      Matrix& gb = tp.grad(b);
      for (std::size_t i = 0; i < av.rows(); ++i) {
        const auto a_row = av.row(i);
        for (std::size_t j = 0; j < used; ++j) {
          const double gij = g(i, j);
          if (gij == 0.0) continue;
          auto gb_row = gb.row(j + b_row_begin);
          for (std::size_t k = 0; k < av.cols(); ++k) gb_row[k] += gij * a_row[k];
        }
      }
    }
  });
}

Var gather_rows(Tape& t, Var table, std::span<const std::size_t> indices) {
  const Matrix& tv = t.value(table);
  Matrix out(indices.size(), tv.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= tv.rows()) {
      throw FormatError(fmt::format("gather index {} outside {} rows", indices[r], tv.rows()));
    }
    std::copy_n(tv.row(indices[r]).begin(), tv.cols(), out.row(r).begin());
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return t.push(std::move(out), {table}, [table, idx = std::move(idx)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    Matrix& gt = tp.grad(table);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto dst = gt.row(idx[r]);
      const auto src = g.row(r);
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
    }
  });
}

Var row(Tape& t, Var a, std::size_t r) {
  const std::size_t index[] = {r};
  return gather_rows(t, a, index);
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw FormatError("concat_cols of nothing");
  const std::size_t rows = t.value(parts[0]).rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    require(t.value(p).rows() == rows, "concat_cols", t.value(parts[0]), t.value(p));
    cols += t.value(p).cols();
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Matrix& pv = t.value(p);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, offset + j) = pv(i, j);
    offset += pv.cols();
  }
  std::vector<Var> kept(parts.begin(), parts.end());
  return t.push(std::move(out), parts, [kept = std::move(kept)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_at(self);
    std::size_t off = 0;
    for (Var p : kept) {
      const std::size_t width = tp.value(p).cols();
      if (tp.requires_grad(p)) {
        Matrix& gp = tp.grad(p);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < width; ++j) gp(i, j) += g(i, off + j);
      }
      off += width;
    }
  });
}

Var masked_softmax(Tape& t, Var logits, const std::vector<bool>& masked, double scale) {
  Matrix out = masked_row_softmax(t.value(logits), masked, scale);
  return t.push(std::move(out), {logits}, [logits, scale](Tape& tp, std::size_t self) {
    // dx_i = y_i (g_i - sum_j g_j y_j) / scale; masked y_i = 0 gives dx_i = 0.
    const Matrix& g = tp.grad_at(self);
    const Matrix& y = tp.value(Var{self});
    double dot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += g[i] * y[i];
    Matrix& gx = tp.grad(logits);
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += y[i] * (g[i] - dot) / scale;
  });
}

Var weighted_sum(Tape& t, Var a, const Matrix& weights) {
  const Matrix& av = t.value(a);
  require(av.same_shape(weights), "weighted_sum", av, weights);
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) total += av[i] * weights[i];
  return t.push(Matrix(1, 1, total), {a}, [a, weights](Tape& tp, std::size_t self) {
    const double g = tp.grad_at(self)[0];
    Matrix& ga = tp.grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * weights[i];
  });
}

Var softmax_cross_entropy(Tape& t, Var logits, std::size_t target, Matrix* probabilities) {
  const Matrix& lv = t.value(logits);
  if (lv.rows() != 1) throw FormatError("softmax_cross_entropy expects a 1 x m row");
  Matrix probs = masked_row_softmax(lv, {}, 1.0);
  const double loss = cross_entropy(probs, target);
  if (probabilities != nullptr) *probabilities = probs;
  return t.push(Matrix(1, 1, loss), {logits},
                [logits, target, probs = std::move(probs)](Tape& tp, std::size_t self) {
                  const double g = tp.grad_at(self)[0];
                  Matrix& gl = tp.grad(logits);
                  for (std::size_t j = 0; j < probs.size(); ++j) {
                    gl[j] += g * (probs[j] - (j == target ? 1.0 : 0.0));
                  }
                });
}

}  // namespace p2mam::ad
