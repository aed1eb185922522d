#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kgemos/linalg.hpp"
#include "kgemos/random.hpp"

namespace kgemos {

/// A trainable tensor and its gradient accumulator.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Matrix(value.rows(), value.cols());
    grad.fill(0.0);
  }
};

/// Running statistics of one batch-norm layer (per feature, 1 x d).
struct BatchNormStats {
  Matrix running_mean;
  Matrix running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t dim) : running_mean(1, dim, 0.0), running_var(1, dim, 1.0) {}
};

enum class Op {
  Constant,
  Param,
  GatherRows,
  RelationMatVec,
  MatMul,
  Add,
  Sub,
  Hadamard,
  Affine,
  LeakyRelu,
  MaskMultiply,
  BatchNormTrain,
  BatchNormEval,
  RowLogSoftmax,
  RowLogSumExp,
  AddColumn,
  SelectColumn,
  ConcatCols,
  LogSumExpStack,
  WeightedSum,
  Combine,
  MeanRowEntropy,
  Sum,
};

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Eager reverse-mode tape. Nodes are appended in evaluation order, so a
/// node's parents always have smaller ids.
class Tape {
 public:
  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  const Matrix& adjoint(Var v) const { return nodes_.at(v.id).adjoint; }
  Op op(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Matrix m) {
    Node n(Op::Constant);
    n.value = std::move(m);
    return push(std::move(n));
  }

  Var param(Parameter& p) {
    Node n(Op::Param);
    n.value = p.value;
    n.param = &p;
    return push(std::move(n));
  }

  /// Rows of p.value selected by ids (embedding lookup).
  Var gather_rows(Parameter& p, std::span<const std::size_t> ids) {
    Node n(Op::GatherRows);
    n.param = &p;
    n.ids.assign(ids.begin(), ids.end());
    n.value = Matrix(ids.size(), p.value.cols());
    for (std::size_t b = 0; b < ids.size(); ++b) {
      if (ids[b] >= p.value.rows())
        throw std::out_of_range("gather_rows: id " + std::to_string(ids[b]) + " out of range for " + p.name);
      auto src = p.value.row(ids[b]);
      std::copy(src.begin(), src.end(), n.value.row(b).begin());
    }
    return push(std::move(n));
  }

  /// Row b of the result is xᵀ_b · W[ids[b]], where row k of stack.value
  /// holds the d x d matrix W_k in row-major order.
  Var relation_matvec(Var x, Parameter& stack, std::span<const std::size_t> ids) {
    const Matrix& xv = value(x);
    const std::size_t d = xv.cols();
    if (stack.value.cols() != d * d) throw DimensionError("relation_matvec: stack width is not d*d");
    if (ids.size() != xv.rows()) throw DimensionError("relation_matvec: id count differs from batch size");
    Node n(Op::RelationMatVec);
    n.parents = {x.id};
    n.param = &stack;
    n.ids.assign(ids.begin(), ids.end());
    n.value = Matrix(xv.rows(), d);
    for (std::size_t b = 0; b < xv.rows(); ++b) {
      if (ids[b] >= stack.value.rows())
        throw std::out_of_range("relation_matvec: id " + std::to_string(ids[b]) + " out of range");
      const double* w = stack.value.data() + ids[b] * d * d;
      auto xr = xv.row(b);
      auto out = n.value.row(b);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += xr[i] * w[i * d + j];
    }
    return push(std::move(n));
  }

  Var matmul(Var a, Var b, bool transpose_b = false) {
    Node n(Op::MatMul);
    n.parents = {a.id, b.id};
    n.flag = transpose_b;
    n.value = kgemos::matmul(value(a), value(b), transpose_b);
    return push(std::move(n));
  }

  Var add(Var a, Var b) { return elementwise(Op::Add, a, b, [](double x, double y) { return x + y; }); }
  Var sub(Var a, Var b) { return elementwise(Op::Sub, a, b, [](double x, double y) { return x - y; }); }
  Var hadamard(Var a, Var b) { return elementwise(Op::Hadamard, a, b, [](double x, double y) { return x * y; }); }

  /// x·Wᵀ + b with W of shape out x in and b of shape 1 x out.
  Var affine(Var x, Var w, Var b) {
    const Matrix& bv = value(b);
    Matrix y = kgemos::matmul(value(x), value(w), true);
    if (bv.rows() != 1 || bv.cols() != y.cols()) throw DimensionError("affine: bias must be 1x" + std::to_string(y.cols()));
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += bv(0, j);
    Node n(Op::Affine);
    n.parents = {x.id, w.id, b.id};
    n.value = std::move(y);
    return push(std::move(n));
  }

  Var leaky_relu(Var x, double slope) {
    Node n(Op::LeakyRelu);
    n.parents = {x.id};
    n.scalar = slope;
    n.value = value(x);
    for (double& v : n.value.values())
      if (v < 0.0) v *= slope;
    return push(std::move(n));
  }

  /// x ⊙ mask with a constant mask (used for dropout).
  Var mask_multiply(Var x, Matrix mask) {
    if (!mask.same_shape(value(x))) throw DimensionError("mask_multiply: mask shape " + shape_str(mask));
    Node n(Op::MaskMultiply);
    n.parents = {x.id};
    n.value = value(x);
    for (std::size_t k = 0; k < mask.size(); ++k) n.value[k] *= mask[k];
    n.aux = std::move(mask);
    return push(std::move(n));
  }

  /// Inverted dropout: kept units scaled by 1/(1-p). Identity when p == 0.
  Var dropout(Var x, double p, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must be in [0,1)");
    if (p == 0.0) return x;
    const Matrix& xv = value(x);
    Matrix mask(xv.rows(), xv.cols());
    const double keep_scale = 1.0 / (1.0 - p);
    for (double& m : mask.values()) m = rng.uniform() < p ? 0.0 : keep_scale;
    return mask_multiply(x, std::move(mask));
  }

  /// Batch normalization over the batch axis. In training mode uses batch
  /// statistics and updates the running estimates in place.
  Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training) {
    const Matrix& xv = value(x);
    const std::size_t rows = xv.rows(), d = xv.cols();
    if (value(gamma).rows() != 1 || value(gamma).cols() != d || !value(beta).same_shape(value(gamma)))
      throw DimensionError("batch_norm: scale/shift must be 1x" + std::to_string(d));
    if (stats.running_mean.cols() != d) throw DimensionError("batch_norm: statistics width mismatch");
    Node n(training ? Op::BatchNormTrain : Op::BatchNormEval);
    n.parents = {x.id, gamma.id, beta.id};
    n.aux = Matrix(rows, d);       // normalized input x̂
    n.aux2 = Matrix(1, d);         // 1/sqrt(var + eps)
    if (training) {
      if (rows == 0) throw DimensionError("batch_norm: empty batch");
      for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < rows; ++i) mean += xv(i, j);
        mean /= static_cast<double>(rows);
        double var = 0.0;
        for (std::size_t i = 0; i < rows; ++i) var += (xv(i, j) - mean) * (xv(i, j) - mean);
        const double unbiased = rows > 1 ? var / static_cast<double>(rows - 1) : var;
        var /= static_cast<double>(rows);
        const double inv_std = 1.0 / std::sqrt(var + stats.eps);
        n.aux2(0, j) = inv_std;
        for (std::size_t i = 0; i < rows; ++i) n.aux(i, j) = (xv(i, j) - mean) * inv_std;
        stats.running_mean(0, j) = (1.0 - stats.momentum) * stats.running_mean(0, j) + stats.momentum * mean;
        stats.running_var(0, j) = (1.0 - stats.momentum) * stats.running_var(0, j) + stats.momentum * unbiased;
      }
    } else {
      for (std::size_t j = 0; j < d; ++j) {
        const double inv_std = 1.0 / std::sqrt(stats.running_var(0, j) + stats.eps);
        n.aux2(0, j) = inv_std;
        for (std::size_t i = 0; i < rows; ++i) n.aux(i, j) = (xv(i, j) - stats.running_mean(0, j)) * inv_std;
      }
    }
    n.value = Matrix(rows, d);
    const Matrix& g = value(gamma);
    const Matrix& b = value(beta);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < d; ++j) n.value(i, j) = g(0, j) * n.aux(i, j) + b(0, j);
    return push(std::move(n));
  }

  Var row_log_softmax(Var x) {
    Node n(Op::RowLogSoftmax);
    n.parents = {x.id};
    n.value = kgemos::row_log_softmax(value(x));
    return push(std::move(n));
  }

  Var row_logsumexp(Var x) {
    Node n(Op::RowLogSumExp);
    n.parents = {x.id};
    n.value = kgemos::row_logsumexp(value(x));
    return push(std::move(n));
  }

  /// m + c broadcast across columns, with c of shape rows x 1.
  Var add_column(Var m, Var c) {
    const Matrix& mv = value(m);
    const Matrix& cv = value(c);
    if (cv.cols() != 1 || cv.rows() != mv.rows()) throw DimensionError("add_column: column is " + shape_str(cv));
    Node n(Op::AddColumn);
    n.parents = {m.id, c.id};
    n.value = mv;
    for (std::size_t i = 0; i < mv.rows(); ++i)
      for (double& v : n.value.row(i)) v += cv(i, 0);
    return push(std::move(n));
  }

  Var column(Var m, std::size_t k) {
    const Matrix& mv = value(m);
    if (k >= mv.cols()) throw DimensionError("column: index out of range");
    Node n(Op::SelectColumn);
    n.parents = {m.id};
    n.index = k;
    n.value = Matrix(mv.rows(), 1);
    for (std::size_t i = 0; i < mv.rows(); ++i) n.value(i, 0) = mv(i, k);
    return push(std::move(n));
  }

  Var concat_cols(Var a, Var b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (av.rows() != bv.rows()) throw DimensionError("concat_cols: row counts differ");
    Node n(Op::ConcatCols);
    n.parents = {a.id, b.id};
    n.value = Matrix(av.rows(), av.cols() + bv.cols());
    for (std::size_t i = 0; i < av.rows(); ++i) {
      auto out = n.value.row(i);
      std::copy(av.row(i).begin(), av.row(i).end(), out.begin());
      std::copy(bv.row(i).begin(), bv.row(i).end(), out.begin() + static_cast<std::ptrdiff_t>(av.cols()));
    }
    return push(std::move(n));
  }

  /// Elementwise log(Σ_k exp(x_k)) over same-shaped inputs.
  Var logsumexp_stack(std::span<const Var> xs) {
    if (xs.empty()) throw std::invalid_argument("logsumexp_stack: no inputs");
    const Matrix& first = value(xs[0]);
    Node n(Op::LogSumExpStack);
    for (Var x : xs) {
      if (!value(x).same_shape(first)) throw DimensionError("logsumexp_stack: shape mismatch");
      n.parents.push_back(x.id);
    }
    n.value = Matrix(first.rows(), first.cols());
    std::vector<double> buf(xs.size());
    for (std::size_t k = 0; k < first.size(); ++k) {
      for (std::size_t c = 0; c < xs.size(); ++c) buf[c] = value(xs[c])[k];
      n.value[k] = logsumexp(buf);
    }
    return push(std::move(n));
  }

  /// Σ w ⊙ x for a constant weight matrix; 1 x 1. Zero weights ignore x.
  Var weighted_sum(Var x, Matrix weights) {
    if (!weights.same_shape(value(x))) throw DimensionError("weighted_sum: weights are " + shape_str(weights));
    Node n(Op::WeightedSum);
    n.parents = {x.id};
    double acc = 0.0;
    const Matrix& xv = value(x);
    for (std::size_t k = 0; k < xv.size(); ++k)
      if (weights[k] != 0.0) acc += weights[k] * xv[k];  // 0·(−∞) stays 0
    n.value = Matrix(1, 1, acc);
    n.aux = std::move(weights);
    return push(std::move(n));
  }

  /// Σ_i c_i x_i over same-shaped inputs.
  Var combine(std::span<const Var> xs, std::span<const double> coeffs) {
    if (xs.empty() || xs.size() != coeffs.size()) throw std::invalid_argument("combine: need one coefficient per input");
    const Matrix& first = value(xs[0]);
    Node n(Op::Combine);
    n.value = Matrix(first.rows(), first.cols());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const Matrix& xv = value(xs[i]);
      if (!xv.same_shape(first)) throw DimensionError("combine: shape mismatch");
      n.parents.push_back(xs[i].id);
      for (std::size_t k = 0; k < xv.size(); ++k) n.value[k] += coeffs[i] * xv[k];
    }
    n.coeffs.assign(coeffs.begin(), coeffs.end());
    return push(std::move(n));
  }

  /// Mean over rows of −Σ_k p_k ln p_k, taking row log-probabilities.
  Var mean_row_entropy(Var log_probs) {
    const Matrix& lv = value(log_probs);
    Node n(Op::MeanRowEntropy);
    n.parents = {log_probs.id};
    double acc = 0.0;
    for (double l : lv.values())
      if (std::isfinite(l)) acc -= std::exp(l) * l;
    n.value = Matrix(1, 1, lv.rows() == 0 ? 0.0 : acc / static_cast<double>(lv.rows()));
    return push(std::move(n));
  }

  Var sum(Var x) {
    Node n(Op::Sum);
    n.parents = {x.id};
    double acc = 0.0;
    for (double v : value(x).values()) acc += v;
    n.value = Matrix(1, 1, acc);
    return push(std::move(n));
  }

  /// Reverse sweep from a 1 x 1 loss. Parameter gradients are accumulated
  /// (added) into Parameter::grad in decreasing node order.
  void backward(Var loss) {
    Node& root = nodes_.at(loss.id);
    if (root.value.rows() != 1 || root.value.cols() != 1)
      throw DimensionError("backward: loss must be 1x1, got " + shape_str(root.value));
    for (auto& n : nodes_) n.adjoint = Matrix();
    root.adjoint = Matrix(1, 1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.adjoint.empty()) continue;
      propagate(n);
    }
  }

 private:
  struct Node {
    explicit Node(Op o) : op(o) {}
    Op op;
    std::vector<std::size_t> parents;
    Matrix value;
    Matrix adjoint;
    Matrix aux;
    Matrix aux2;
    Parameter* param = nullptr;
    std::vector<std::size_t> ids;
    std::vector<double> coeffs;
    double scalar = 0.0;
    std::size_t index = 0;
    bool flag = false;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  template <typename F>
  Var elementwise(Op op, Var a, Var b, F f) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (!av.same_shape(bv)) throw DimensionError("elementwise op: " + shape_str(av) + " vs " + shape_str(bv));
    Node n(op);
    n.parents = {a.id, b.id};
    n.value = Matrix(av.rows(), av.cols());
    for (std::size_t k = 0; k < av.size(); ++k) n.value[k] = f(av[k], bv[k]);
    return push(std::move(n));
  }

  Matrix& grad_of(std::size_t id) {
    Node& p = nodes_[id];
    if (p.adjoint.empty()) p.adjoint = Matrix(p.value.rows(), p.value.cols());
    return p.adjoint;
  }

  void propagate(Node& n) {
    const Matrix& g = n.adjoint;
    switch (n.op) {
      case Op::Constant:
        break;
      case Op::Param:
        if (n.param) {
          Parameter& p = *n.param;
          if (!p.grad.same_shape(p.value)) p.grad = Matrix(p.value.rows(), p.value.cols());
          for (std::size_t k = 0; k < g.size(); ++k) p.grad[k] += g[k];
        }
        break;
      case Op::GatherRows: {
        Parameter& p = *n.param;
        if (!p.grad.same_shape(p.value)) p.grad = Matrix(p.value.rows(), p.value.cols());
        for (std::size_t b = 0; b < n.ids.size(); ++b) {
          auto dst = p.grad.row(n.ids[b]);
          auto src = g.row(b);
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::RelationMatVec: {
        Parameter& p = *n.param;
        if (!p.grad.same_shape(p.value)) p.grad = Matrix(p.value.rows(), p.value.cols());
        const Matrix& x = nodes_[n.parents[0]].value;
        Matrix& gx = grad_of(n.parents[0]);
        const std::size_t d = x.cols();
        for (std::size_t b = 0; b < n.ids.size(); ++b) {
          const double* w = p.value.data() + n.ids[b] * d * d;
          double* gw = p.grad.data() + n.ids[b] * d * d;
          auto xr = x.row(b);
          auto gr = g.row(b);
          auto gxr = gx.row(b);
          for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              gxr[i] += gr[j] * w[i * d + j];
              gw[i * d + j] += xr[i] * gr[j];
            }
        }
        break;
      }
      case Op::MatMul: {
        const Matrix& a = nodes_[n.parents[0]].value;
        const Matrix& b = nodes_[n.parents[1]].value;
        // C = A·B:  dA = G·Bᵀ, dB = Aᵀ·G.   C = A·Bᵀ:  dA = G·B, dB = Gᵀ·A.
        add_into(grad_of(n.parents[0]), kgemos::matmul(g, b, !n.flag));
        add_into(grad_of(n.parents[1]), n.flag ? matmul_tn(g, a) : matmul_tn(a, g));
        break;
      }
      case Op::Add:
        add_into(grad_of(n.parents[0]), g);
        add_into(grad_of(n.parents[1]), g);
        break;
      case Op::Sub: {
        add_into(grad_of(n.parents[0]), g);
        Matrix& gb = grad_of(n.parents[1]);
        for (std::size_t k = 0; k < g.size(); ++k) gb[k] -= g[k];
        break;
      }
      case Op::Hadamard: {
        const Matrix& a = nodes_[n.parents[0]].value;
        const Matrix& b = nodes_[n.parents[1]].value;
        Matrix& ga = grad_of(n.parents[0]);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * b[k];
        Matrix& gb = grad_of(n.parents[1]);
        for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * a[k];
        break;
      }
      case Op::Affine: {
        const Matrix& x = nodes_[n.parents[0]].value;
        const Matrix& w = nodes_[n.parents[1]].value;
        add_into(grad_of(n.parents[0]), kgemos::matmul(g, w));
        add_into(grad_of(n.parents[1]), matmul_tn(g, x));
        Matrix& gb = grad_of(n.parents[2]);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
        break;
      }
      case Op::LeakyRelu: {
        const Matrix& x = nodes_[n.parents[0]].value;
        Matrix& gx = grad_of(n.parents[0]);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += x[k] < 0.0 ? n.scalar * g[k] : g[k];
        break;
      }
      case Op::MaskMultiply: {
        Matrix& gx = grad_of(n.parents[0]);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * n.aux[k];
        break;
      }
      case Op::BatchNormTrain:
      case Op::BatchNormEval: {
        const Matrix& gamma = nodes_[n.parents[1]].value;
        const Matrix& xhat = n.aux;
        const std::size_t rows = g.rows(), d = g.cols();
        Matrix& gx = grad_of(n.parents[0]);
        Matrix& ggamma = grad_of(n.parents[1]);
        Matrix& gbeta = grad_of(n.parents[2]);
        for (std::size_t j = 0; j < d; ++j) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t i = 0; i < rows; ++i) {
            sum_g += g(i, j);
            sum_gx += g(i, j) * xhat(i, j);
          }
          ggamma(0, j) += sum_gx;
          gbeta(0, j) += sum_g;
          const double scale = gamma(0, j) * n.aux2(0, j);
          if (n.op == Op::BatchNormEval) {
            for (std::size_t i = 0; i < rows; ++i) gx(i, j) += scale * g(i, j);
          } else {
            const double inv_rows = 1.0 / static_cast<double>(rows);
            for (std::size_t i = 0; i < rows; ++i)
              gx(i, j) += scale * (g(i, j) - inv_rows * sum_g - xhat(i, j) * inv_rows * sum_gx);
          }
        }
        break;
      }
      case Op::RowLogSoftmax: {
        Matrix& gx = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          auto gr = g.row(i);
          auto y = n.value.row(i);
          double total = 0.0;
          for (double v : gr) total += v;
          auto gxr = gx.row(i);
          for (std::size_t j = 0; j < gr.size(); ++j) gxr[j] += gr[j] - std::exp(y[j]) * total;
        }
        break;
      }
      case Op::RowLogSumExp: {
        const Matrix& x = nodes_[n.parents[0]].value;
        Matrix& gx = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < x.rows(); ++i) {
          auto xr = x.row(i);
          auto gxr = gx.row(i);
          for (std::size_t j = 0; j < xr.size(); ++j) gxr[j] += g(i, 0) * std::exp(xr[j] - n.value(i, 0));
        }
        break;
      }
      case Op::AddColumn: {
        add_into(grad_of(n.parents[0]), g);
        Matrix& gc = grad_of(n.parents[1]);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (double v : g.row(i)) gc(i, 0) += v;
        break;
      }
      case Op::SelectColumn: {
        Matrix& gm = grad_of(n.parents[0]);
        for (std::size_t i = 0; i < g.rows(); ++i) gm(i, n.index) += g(i, 0);
        break;
      }
      case Op::ConcatCols: {
        Matrix& ga = grad_of(n.parents[0]);
        Matrix& gb = grad_of(n.parents[1]);
        const std::size_t ac = ga.cols();
        for (std::size_t i = 0; i < g.rows(); ++i) {
          for (std::size_t j = 0; j < ac; ++j) ga(i, j) += g(i, j);
          for (std::size_t j = 0; j < gb.cols(); ++j) gb(i, j) += g(i, ac + j);
        }
        break;
      }
      case Op::LogSumExpStack: {
        for (std::size_t id : n.parents) {
          const Matrix& x = nodes_[id].value;
          Matrix& gx = grad_of(id);
          for (std::size_t k = 0; k < g.size(); ++k)
            if (std::isfinite(x[k])) gx[k] += g[k] * std::exp(x[k] - n.value[k]);
        }
        break;
      }
      case Op::WeightedSum: {
        Matrix& gx = grad_of(n.parents[0]);
        const double s = g(0, 0);
        for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += s * n.aux[k];
        break;
      }
      case Op::Combine: {
        for (std::size_t i = 0; i < n.parents.size(); ++i) {
          Matrix& gx = grad_of(n.parents[i]);
          for (std::size_t k = 0; k < g.size(); ++k) gx[k] += n.coeffs[i] * g[k];
        }
        break;
      }
      case Op::MeanRowEntropy: {
        const Matrix& l = nodes_[n.parents[0]].value;
        Matrix& gl = grad_of(n.parents[0]);
        const double s = l.rows() == 0 ? 0.0 : g(0, 0) / static_cast<double>(l.rows());
        for (std::size_t k = 0; k < l.size(); ++k)
          if (std::isfinite(l[k])) gl[k] -= s * std::exp(l[k]) * (l[k] + 1.0);
        break;
      }
      case Op::Sum: {
        Matrix& gx = grad_of(n.parents[0]);
        const double s = g(0, 0);
        for (double& v : gx.values()) v += s;
        break;
      }
    }
  }

  static void add_into(Matrix& dst, const Matrix& src) {
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
  }

  std::vector<Node> nodes_;
};

/// Builds a loss on a fresh tape. Used by finite_difference_check.
using LossBuilder = std::function<Var(Tape&)>;

/// Compares backward gradients against central differences
/// (f(p+ε) − f(p−ε)) / 2ε for every parameter entry. Returns the worst
/// elementwise relative error max(0, |a − n| − ρ) / max(|a|, |n|, 1e-8),
/// where ρ = 8·u·(|f(p+ε)| + |f(p−ε)|) / 2ε bounds the rounding error of the
/// difference quotient (u = unit roundoff). Without ρ, entries whose true
/// gradient is zero (e.g. a bias feeding batch norm) would report the loss's
/// last-bit noise amplified by 1/ε.
inline double finite_difference_check(const LossBuilder& build, std::span<Parameter* const> params, double epsilon = 1e-6) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_difference_check: epsilon must be positive");
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = build(tape);
    tape.backward(loss);
  }
  auto eval = [&] {
    Tape tape;
    const double v = tape.value(build(tape))(0, 0);
    if (!std::isfinite(v)) throw std::domain_error("finite_difference_check: loss is not finite");
    return v;
  };
  double worst = 0.0;
  for (Parameter* p : params) {
    const Matrix analytic = p->grad;
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const double saved = p->value[k];
      p->value[k] = saved + epsilon;
      const double up = eval();
      p->value[k] = saved - epsilon;
      const double down = eval();
      p->value[k] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[k];
      const double rounding = 8.0 * std::numeric_limits<double>::epsilon() * 0.5 * (std::abs(up) + std::abs(down)) / (2.0 * epsilon);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::max(0.0, std::abs(a - numeric) - rounding) / denom);
    }
  }
  return worst;
}

}  // namespace kgemos
