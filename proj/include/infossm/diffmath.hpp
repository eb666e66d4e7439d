#pragma once

// Differentiable numerical core: a record-and-replay gradient tape over dense
// Eigen matrices, a Cholesky factorization with gradient flow, and the Adam
// update. Everything downstream (GP experts, state rollouts, inference nets,
// training losses) is composed from the operations in this header.

#include "infossm/core.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace infossm::diffmath {

using infossm::Index;
using infossm::Matrix;
using infossm::Vector;

class Tape;

// Handle to a node on a Tape. Cheap to copy; values and gradients live on the
// tape and stay valid for the tape's lifetime.
class Value {
public:
  Value() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }

  const Matrix& data() const;
  const Matrix& grad() const;  // zeros until backward touches this node
  bool requires_grad() const;

  Index rows() const { return data().rows(); }
  Index cols() const { return data().cols(); }

  double scalar() const {
    if (rows() != 1 || cols() != 1) throw ShapeMismatch("Value::scalar: node is not 1x1");
    return data()(0, 0);
  }

private:
  friend class Tape;
  Value(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// One recording of a computation. Confined to a single thread; parameters feed
// in as leaves, backward() fills gradients in reverse recording order so runs
// are bit-reproducible.
class Tape {
public:
  using Pullback = std::function<void(Tape&, int out_id)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value constant(Matrix m) { return make(std::move(m), false, nullptr); }

  Value constant_scalar(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  // Differentiable input (a parameter view).
  Value leaf(Matrix m) { return make(std::move(m), true, nullptr); }

  Value make(Matrix value, bool requires_grad, Pullback pb) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, false, std::move(pb)});
    return Value(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::size_t size() const { return nodes_.size(); }

  const Matrix& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  const Matrix& grad_of(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_live) {
      zero_.setZero(n.value.rows(), n.value.cols());
      return zero_;
    }
    return n.grad;
  }

  bool requires_grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  // Adds g into the gradient slot of node `id` (no-op for non-differentiable
  // nodes, so pullbacks never need to branch on parent flags).
  void accumulate(int id, const Matrix& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
      throw ShapeMismatch("Tape::accumulate: gradient shape differs from value shape");
    if (!n.grad_live) {
      n.grad = g;
      n.grad_live = true;
    } else {
      n.grad += g;
    }
  }

  // Reverse sweep from a scalar objective recorded on this tape.
  void backward(const Value& objective) {
    if (objective.tape_ != this) throw GraphError("backward: objective was not recorded on this tape");
    if (objective.rows() != 1 || objective.cols() != 1)
      throw GraphError("backward: objective must be a 1x1 scalar");
    if (!objective.requires_grad())
      throw GraphError("backward: objective does not depend on any differentiable leaf");
    Matrix seed(1, 1);
    seed(0, 0) = 1.0;
    accumulate(objective.id_, seed);
    for (int i = objective.id_; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad && n.grad_live && n.pullback) n.pullback(*this, i);
    }
  }

  // map theta -> d objective / d theta for an explicit parameter list.
  std::vector<Matrix> gradients(const Value& objective, const std::vector<Value>& params) {
    backward(objective);
    std::vector<Matrix> out;
    out.reserve(params.size());
    for (const Value& p : params) {
      if (p.tape_ != this) throw GraphError("gradients: parameter recorded on a different tape");
      out.push_back(grad_of(p.id_));
    }
    return out;
  }

private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool grad_live = false;
    Pullback pullback;
  };

  std::vector<Node> nodes_;
  mutable Matrix zero_;
};

inline const Matrix& Value::data() const { return tape_->value_of(id_); }
inline const Matrix& Value::grad() const { return tape_->grad_of(id_); }
inline bool Value::requires_grad() const { return tape_->requires_grad_of(id_); }

namespace detail {

inline Tape& same_tape(const Value& a, const Value& b) {
  if (&a.tape() != &b.tape()) throw GraphError("operands recorded on different tapes");
  return a.tape();
}

inline void require_same_shape(const Value& a, const Value& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch(std::string(what) + ": shapes differ");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra operations
// ---------------------------------------------------------------------------

inline Value add(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  return t.make(a.data() + b.data(), rg, [ia, ib](Tape& t, int out) {
    t.accumulate(ia, t.grad_of(out));
    t.accumulate(ib, t.grad_of(out));
  });
}

inline Value sub(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  return t.make(a.data() - b.data(), rg, [ia, ib](Tape& t, int out) {
    t.accumulate(ia, t.grad_of(out));
    t.accumulate(ib, -t.grad_of(out));
  });
}

inline Value neg(const Value& a) {
  int ia = a.id();
  return a.tape().make(-a.data(), a.requires_grad(),
                       [ia](Tape& t, int out) { t.accumulate(ia, -t.grad_of(out)); });
}

inline Value scale(const Value& a, double s) {
  int ia = a.id();
  return a.tape().make(a.data() * s, a.requires_grad(),
                       [ia, s](Tape& t, int out) { t.accumulate(ia, s * t.grad_of(out)); });
}

inline Value add_const(const Value& a, double c) {
  int ia = a.id();
  return a.tape().make(a.data().array() + c, a.requires_grad(),
                       [ia](Tape& t, int out) { t.accumulate(ia, t.grad_of(out)); });
}

inline Value matmul(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul: inner dimensions differ");
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  return t.make(a.data() * b.data(), rg, [ia, ib](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    t.accumulate(ia, g * t.value_of(ib).transpose());
    t.accumulate(ib, t.value_of(ia).transpose() * g);
  });
}

inline Value cmul(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "cmul");
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  return t.make(a.data().cwiseProduct(b.data()), rg, [ia, ib](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    t.accumulate(ia, g.cwiseProduct(t.value_of(ib)));
    t.accumulate(ib, g.cwiseProduct(t.value_of(ia)));
  });
}

inline Value cdiv(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "cdiv");
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  return t.make(a.data().cwiseQuotient(b.data()), rg, [ia, ib](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    const Matrix& bv = t.value_of(ib);
    t.accumulate(ia, g.cwiseQuotient(bv));
    t.accumulate(ib, -g.cwiseProduct(t.value_of(out)).cwiseQuotient(bv));
  });
}

inline Value transpose(const Value& a) {
  int ia = a.id();
  return a.tape().make(a.data().transpose(), a.requires_grad(),
                       [ia](Tape& t, int out) { t.accumulate(ia, t.grad_of(out).transpose()); });
}

inline Value exp(const Value& a) {
  int ia = a.id();
  return a.tape().make(a.data().array().exp(), a.requires_grad(), [ia](Tape& t, int out) {
    t.accumulate(ia, t.grad_of(out).cwiseProduct(t.value_of(out)));
  });
}

inline Value log(const Value& a) {
  int ia = a.id();
  return a.tape().make(a.data().array().log(), a.requires_grad(), [ia](Tape& t, int out) {
    t.accumulate(ia, t.grad_of(out).cwiseQuotient(t.value_of(ia)));
  });
}

inline Value tanh(const Value& a) {
  int ia = a.id();
  return a.tape().make(a.data().array().tanh(), a.requires_grad(), [ia](Tape& t, int out) {
    const Matrix& y = t.value_of(out);
    t.accumulate(ia, t.grad_of(out).cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

inline Value sigmoid(const Value& a) {
  int ia = a.id();
  Matrix y = (1.0 / (1.0 + (-a.data().array()).exp())).matrix();
  return a.tape().make(std::move(y), a.requires_grad(), [ia](Tape& t, int out) {
    const Matrix& y = t.value_of(out);
    t.accumulate(ia, t.grad_of(out).cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
  });
}

inline Value softplus(const Value& a) {
  int ia = a.id();
  // log(1 + e^x), evaluated as max(x,0) + log1p(e^{-|x|}) for stability.
  Matrix y = a.data().unaryExpr(
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  return a.tape().make(std::move(y), a.requires_grad(), [ia](Tape& t, int out) {
    Matrix s = t.value_of(ia).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    t.accumulate(ia, t.grad_of(out).cwiseProduct(s));
  });
}

inline Value square(const Value& a) {
  int ia = a.id();
  return a.tape().make(a.data().array().square(), a.requires_grad(), [ia](Tape& t, int out) {
    t.accumulate(ia, 2.0 * t.grad_of(out).cwiseProduct(t.value_of(ia)));
  });
}

// sqrt(max(x,0)) with a guarded pullback: the derivative is taken as 0 below
// `guard`, so reparameterized samples stay exact at zero variance without
// producing infinite gradients.
inline Value sqrt_guarded(const Value& a, double guard = 1e-12) {
  int ia = a.id();
  Matrix y = a.data().unaryExpr([](double x) { return std::sqrt(std::max(x, 0.0)); });
  return a.tape().make(std::move(y), a.requires_grad(), [ia, guard](Tape& t, int out) {
    const Matrix& x = t.value_of(ia);
    const Matrix& y = t.value_of(out);
    const Matrix& g = t.grad_of(out);
    Matrix gx(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i)
      for (Index j = 0; j < x.cols(); ++j)
        gx(i, j) = x(i, j) > guard ? 0.5 * g(i, j) / y(i, j) : 0.0;
    t.accumulate(ia, gx);
  });
}

inline Value clamp_min(const Value& a, double lo) {
  int ia = a.id();
  Matrix y = a.data().cwiseMax(lo);
  return a.tape().make(std::move(y), a.requires_grad(), [ia, lo](Tape& t, int out) {
    const Matrix& x = t.value_of(ia);
    Matrix g = t.grad_of(out);
    for (Index i = 0; i < x.rows(); ++i)
      for (Index j = 0; j < x.cols(); ++j)
        if (x(i, j) < lo) g(i, j) = 0.0;
    t.accumulate(ia, g);
  });
}

// Forward identity whose gradient does not propagate (the straight-through
// estimator is built from this).
inline Value stop_gradient(const Value& a) { return a.tape().constant(a.data()); }

// ---------------------------------------------------------------------------
// Reductions and shape manipulation
// ---------------------------------------------------------------------------

inline Value sum(const Value& a) {
  int ia = a.id();
  Matrix y(1, 1);
  y(0, 0) = a.data().sum();
  return a.tape().make(std::move(y), a.requires_grad(), [ia](Tape& t, int out) {
    double g = t.grad_of(out)(0, 0);
    const Matrix& x = t.value_of(ia);
    t.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), g));
  });
}

inline Value rowwise_sum(const Value& a) {  // R x C -> R x 1
  int ia = a.id();
  return a.tape().make(a.data().rowwise().sum(), a.requires_grad(), [ia](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    t.accumulate(ia, g * Matrix::Ones(1, t.value_of(ia).cols()));
  });
}

inline Value colwise_sum(const Value& a) {  // R x C -> 1 x C
  int ia = a.id();
  return a.tape().make(a.data().colwise().sum(), a.requires_grad(), [ia](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    t.accumulate(ia, Matrix::Ones(t.value_of(ia).rows(), 1) * g);
  });
}

// Each row of `a` repeated `k` times, keeping row blocks contiguous:
// out.row(i*k + j) = a.row(i).
inline Value repeat_rows(const Value& a, Index k) {
  int ia = a.id();
  const Matrix& x = a.data();
  Matrix y(x.rows() * k, x.cols());
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < k; ++j) y.row(i * k + j) = x.row(i);
  return a.tape().make(std::move(y), a.requires_grad(), [ia, k](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    const Matrix& x = t.value_of(ia);
    Matrix gx = Matrix::Zero(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i)
      for (Index j = 0; j < k; ++j) gx.row(i) += g.row(i * k + j);
    t.accumulate(ia, gx);
  });
}

inline Value rows(const Value& a, Index start, Index n) {
  if (start < 0 || n < 0 || start + n > a.rows()) throw IndexOutOfRange("rows: block out of range");
  int ia = a.id();
  return a.tape().make(a.data().middleRows(start, n), a.requires_grad(),
                       [ia, start, n](Tape& t, int out) {
                         const Matrix& x = t.value_of(ia);
                         Matrix gx = Matrix::Zero(x.rows(), x.cols());
                         gx.middleRows(start, n) = t.grad_of(out);
                         t.accumulate(ia, gx);
                       });
}

inline Value cols(const Value& a, Index start, Index n) {
  if (start < 0 || n < 0 || start + n > a.cols()) throw IndexOutOfRange("cols: block out of range");
  int ia = a.id();
  return a.tape().make(a.data().middleCols(start, n), a.requires_grad(),
                       [ia, start, n](Tape& t, int out) {
                         const Matrix& x = t.value_of(ia);
                         Matrix gx = Matrix::Zero(x.rows(), x.cols());
                         gx.middleCols(start, n) = t.grad_of(out);
                         t.accumulate(ia, gx);
                       });
}

inline Value hstack(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.rows() != b.rows()) throw ShapeMismatch("hstack: row counts differ");
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  Matrix y(a.rows(), a.cols() + b.cols());
  y << a.data(), b.data();
  Index ca = a.cols(), cb = b.cols();
  return t.make(std::move(y), rg, [ia, ib, ca, cb](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    t.accumulate(ia, g.leftCols(ca));
    t.accumulate(ib, g.rightCols(cb));
  });
}

inline Value vstack(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.cols() != b.cols()) throw ShapeMismatch("vstack: column counts differ");
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  Matrix y(a.rows() + b.rows(), a.cols());
  y << a.data(), b.data();
  Index ra = a.rows(), rb = b.rows();
  return t.make(std::move(y), rg, [ia, ib, ra, rb](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    t.accumulate(ia, g.topRows(ra));
    t.accumulate(ib, g.bottomRows(rb));
  });
}

// Row-major element regrouping, e.g. a (N*K)x1 column into an NxK matrix.
inline Value reshape_rowmajor(const Value& a, Index r2, Index c2) {
  if (a.rows() * a.cols() != r2 * c2) throw ShapeMismatch("reshape_rowmajor: element count differs");
  int ia = a.id();
  const Matrix& x = a.data();
  Index c1 = x.cols();
  Matrix y(r2, c2);
  for (Index k = 0; k < r2 * c2; ++k) y(k / c2, k % c2) = x(k / c1, k % c1);
  return a.tape().make(std::move(y), a.requires_grad(), [ia, c1, c2](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    const Matrix& x = t.value_of(ia);
    Matrix gx(x.rows(), x.cols());
    for (Index k = 0; k < gx.rows() * gx.cols(); ++k) gx(k / c1, k % c1) = g(k / c2, k % c2);
    t.accumulate(ia, gx);
  });
}

// out.row(i) = a.row(idx[i]); the pullback scatter-adds.
inline Value gather_rows(const Value& a, const std::vector<Index>& idx) {
  for (Index i : idx)
    if (i < 0 || i >= a.rows()) throw IndexOutOfRange("gather_rows: index out of range");
  int ia = a.id();
  Matrix y(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) y.row(static_cast<Index>(r)) = a.data().row(idx[r]);
  return a.tape().make(std::move(y), a.requires_grad(), [ia, idx](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    const Matrix& x = t.value_of(ia);
    Matrix gx = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) gx.row(idx[r]) += g.row(static_cast<Index>(r));
    t.accumulate(ia, gx);
  });
}

// ---------------------------------------------------------------------------
// Broadcast helpers (row/column vectors against matrices, scalars)
// ---------------------------------------------------------------------------

inline Value add_rowvec(const Value& m, const Value& r) {
  Tape& t = detail::same_tape(m, r);
  if (r.rows() != 1 || r.cols() != m.cols()) throw ShapeMismatch("add_rowvec: need 1 x cols(m)");
  bool rg = m.requires_grad() || r.requires_grad();
  int im = m.id(), ir = r.id();
  Matrix y = m.data().rowwise() + Eigen::RowVectorXd(r.data().row(0));
  return t.make(std::move(y), rg, [im, ir](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    t.accumulate(im, g);
    t.accumulate(ir, g.colwise().sum());
  });
}

inline Value mul_rowvec(const Value& m, const Value& r) {
  Tape& t = detail::same_tape(m, r);
  if (r.rows() != 1 || r.cols() != m.cols()) throw ShapeMismatch("mul_rowvec: need 1 x cols(m)");
  bool rg = m.requires_grad() || r.requires_grad();
  int im = m.id(), ir = r.id();
  Matrix y = m.data().array().rowwise() * r.data().row(0).array();
  return t.make(std::move(y), rg, [im, ir](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    const Matrix& mv = t.value_of(im);
    const Matrix& rv = t.value_of(ir);
    t.accumulate(im, (g.array().rowwise() * rv.row(0).array()).matrix());
    t.accumulate(ir, (g.cwiseProduct(mv)).colwise().sum());
  });
}

inline Value add_colvec(const Value& m, const Value& c) {
  Tape& t = detail::same_tape(m, c);
  if (c.cols() != 1 || c.rows() != m.rows()) throw ShapeMismatch("add_colvec: need rows(m) x 1");
  bool rg = m.requires_grad() || c.requires_grad();
  int im = m.id(), ic = c.id();
  Matrix y = m.data().colwise() + Vector(c.data().col(0));
  return t.make(std::move(y), rg, [im, ic](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    t.accumulate(im, g);
    t.accumulate(ic, g.rowwise().sum());
  });
}

inline Value mul_colvec(const Value& m, const Value& c) {
  Tape& t = detail::same_tape(m, c);
  if (c.cols() != 1 || c.rows() != m.rows()) throw ShapeMismatch("mul_colvec: need rows(m) x 1");
  bool rg = m.requires_grad() || c.requires_grad();
  int im = m.id(), ic = c.id();
  Matrix y = m.data().array().colwise() * c.data().col(0).array();
  return t.make(std::move(y), rg, [im, ic](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    const Matrix& mv = t.value_of(im);
    const Matrix& cv = t.value_of(ic);
    t.accumulate(im, (g.array().colwise() * cv.col(0).array()).matrix());
    t.accumulate(ic, (g.cwiseProduct(mv)).rowwise().sum());
  });
}

// Broadcast a 1x1 value over a matrix.
inline Value add_scalar(const Value& m, const Value& s) {
  Tape& t = detail::same_tape(m, s);
  if (s.rows() != 1 || s.cols() != 1) throw ShapeMismatch("add_scalar: s must be 1x1");
  bool rg = m.requires_grad() || s.requires_grad();
  int im = m.id(), is = s.id();
  Matrix y = m.data().array() + s.data()(0, 0);
  return t.make(std::move(y), rg, [im, is](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    t.accumulate(im, g);
    Matrix gs(1, 1);
    gs(0, 0) = g.sum();
    t.accumulate(is, gs);
  });
}

inline Value mul_scalar(const Value& m, const Value& s) {
  Tape& t = detail::same_tape(m, s);
  if (s.rows() != 1 || s.cols() != 1) throw ShapeMismatch("mul_scalar: s must be 1x1");
  bool rg = m.requires_grad() || s.requires_grad();
  int im = m.id(), is = s.id();
  Matrix y = m.data() * s.data()(0, 0);
  return t.make(std::move(y), rg, [im, is](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    t.accumulate(im, g * t.value_of(is)(0, 0));
    Matrix gs(1, 1);
    gs(0, 0) = g.cwiseProduct(t.value_of(im)).sum();
    t.accumulate(is, gs);
  });
}

// ---------------------------------------------------------------------------
// Softmax-family reductions (max-subtracted in forward for stability)
// ---------------------------------------------------------------------------

inline Value softmax_rows(const Value& a) {
  int ia = a.id();
  const Matrix& x = a.data();
  Matrix y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    Eigen::ArrayXd e = (x.row(i).array() - x.row(i).maxCoeff()).exp();
    y.row(i) = (e / e.sum()).matrix();
  }
  return a.tape().make(std::move(y), a.requires_grad(), [ia](Tape& t, int out) {
    const Matrix& y = t.value_of(out);
    const Matrix& g = t.grad_of(out);
    Matrix gx(y.rows(), y.cols());
    for (Index i = 0; i < y.rows(); ++i) {
      double dot = g.row(i).dot(y.row(i));
      gx.row(i) = (g.row(i).array() - dot) * y.row(i).array();
    }
    t.accumulate(ia, gx);
  });
}

inline Value log_softmax_rows(const Value& a) {
  int ia = a.id();
  const Matrix& x = a.data();
  Matrix y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff();
    double lse = m + std::log((x.row(i).array() - m).exp().sum());
    y.row(i) = x.row(i).array() - lse;
  }
  return a.tape().make(std::move(y), a.requires_grad(), [ia](Tape& t, int out) {
    const Matrix& y = t.value_of(out);
    const Matrix& g = t.grad_of(out);
    Matrix gx(y.rows(), y.cols());
    for (Index i = 0; i < y.rows(); ++i) {
      double gsum = g.row(i).sum();
      gx.row(i) = g.row(i).array() - gsum * y.row(i).array().exp();
    }
    t.accumulate(ia, gx);
  });
}

inline Value logsumexp_rows(const Value& a) {  // R x C -> R x 1
  int ia = a.id();
  const Matrix& x = a.data();
  Matrix y(x.rows(), 1);
  for (Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff();
    y(i, 0) = m + std::log((x.row(i).array() - m).exp().sum());
  }
  return a.tape().make(std::move(y), a.requires_grad(), [ia](Tape& t, int out) {
    const Matrix& x = t.value_of(ia);
    const Matrix& y = t.value_of(out);
    const Matrix& g = t.grad_of(out);
    Matrix gx(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i)
      gx.row(i) = g(i, 0) * (x.row(i).array() - y(i, 0)).exp();
    t.accumulate(ia, gx);
  });
}

// ---------------------------------------------------------------------------
// Triangular structure
// ---------------------------------------------------------------------------

inline Value diag_part(const Value& a) {  // M x M -> M x 1
  if (a.rows() != a.cols()) throw ShapeMismatch("diag_part: matrix must be square");
  int ia = a.id();
  return a.tape().make(a.data().diagonal(), a.requires_grad(), [ia](Tape& t, int out) {
    const Matrix& g = t.grad_of(out);
    Matrix gx = Matrix::Zero(g.rows(), g.rows());
    gx.diagonal() = g.col(0);
    t.accumulate(ia, gx);
  });
}

inline Value diag_mat(const Value& v) {  // M x 1 -> M x M
  if (v.cols() != 1) throw ShapeMismatch("diag_mat: need a column vector");
  int iv = v.id();
  Matrix y = Matrix::Zero(v.rows(), v.rows());
  y.diagonal() = v.data().col(0);
  return v.tape().make(std::move(y), v.requires_grad(), [iv](Tape& t, int out) {
    t.accumulate(iv, t.grad_of(out).diagonal());
  });
}

inline Value tril_strict(const Value& a) {
  if (a.rows() != a.cols()) throw ShapeMismatch("tril_strict: matrix must be square");
  int ia = a.id();
  Matrix y = a.data().triangularView<Eigen::StrictlyLower>();
  return a.tape().make(std::move(y), a.requires_grad(), [ia](Tape& t, int out) {
    Matrix g = t.grad_of(out).triangularView<Eigen::StrictlyLower>();
    t.accumulate(ia, g);
  });
}

// ---------------------------------------------------------------------------
// Cholesky and triangular solves
// ---------------------------------------------------------------------------

struct CholeskyOptions {
  // Relative jitter levels tried in turn (scaled by mean diagonal). The plain
  // factorization is attempted first.
  double jitter1 = 1e-6;
  double jitter2 = 1e-4;
  double symmetry_rtol = 1e-10;
};

namespace detail {

inline bool try_llt(const Matrix& a, Matrix& l) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) return false;
  l = llt.matrixL();
  return true;
}

// Reverse-mode map from dL to dA for A = L L^T (A used as symmetric).
inline Matrix cholesky_pullback(const Matrix& l, const Matrix& gl) {
  Matrix p = l.transpose() * gl;
  Matrix phi = p.triangularView<Eigen::Lower>();
  phi.diagonal() *= 0.5;
  Matrix s = l.transpose().triangularView<Eigen::Upper>().solve(phi);
  s = l.transpose().triangularView<Eigen::Upper>().solve(s.transpose()).transpose();
  return 0.5 * (s + s.transpose());
}

}  // namespace detail

// Lower-triangular L with L L^T = A. A must be symmetric; the plain
// factorization is tried first, then jitter at 1e-6 and 1e-4 of the mean
// diagonal before NotPositiveDefinite is raised. Gradients flow through the
// factorization (A treated as symmetric).
inline Value cholesky(const Value& a, const CholeskyOptions& opt = {}) {
  if (a.rows() != a.cols()) throw ShapeMismatch("cholesky: matrix must be square");
  const Matrix& av = a.data();
  double scale = av.cwiseAbs().maxCoeff();
  if ((av - av.transpose()).cwiseAbs().maxCoeff() > opt.symmetry_rtol * std::max(scale, 1.0))
    throw NotPositiveDefinite("cholesky: input is not symmetric");

  Matrix l;
  double mean_diag = av.diagonal().mean();
  Matrix work = av;
  if (!detail::try_llt(work, l)) {
    work = av;
    work.diagonal().array() += opt.jitter1 * mean_diag;
    if (!detail::try_llt(work, l)) {
      work = av;
      work.diagonal().array() += opt.jitter2 * mean_diag;
      if (!detail::try_llt(work, l))
        throw NotPositiveDefinite("cholesky: matrix is not positive definite after jitter");
    }
  }
  int ia = a.id();
  return a.tape().make(std::move(l), a.requires_grad(), [ia](Tape& t, int out) {
    t.accumulate(ia, detail::cholesky_pullback(t.value_of(out), t.grad_of(out)));
  });
}

// X = L^{-1} B (or L^{-T} B when transpose_l); L lower triangular.
inline Value tri_solve(const Value& l, const Value& b, bool transpose_l) {
  Tape& t = detail::same_tape(l, b);
  if (l.rows() != l.cols()) throw ShapeMismatch("tri_solve: L must be square");
  if (l.cols() != b.rows()) throw ShapeMismatch("tri_solve: dimensions differ");
  Matrix x;
  if (transpose_l)
    x = l.data().transpose().triangularView<Eigen::Upper>().solve(b.data());
  else
    x = l.data().triangularView<Eigen::Lower>().solve(b.data());
  bool rg = l.requires_grad() || b.requires_grad();
  int il = l.id(), ib = b.id();
  return t.make(std::move(x), rg, [il, ib, transpose_l](Tape& t, int out) {
    const Matrix& lv = t.value_of(il);
    const Matrix& xv = t.value_of(out);
    const Matrix& g = t.grad_of(out);
    // gB solves against the opposite transpose; gL is -gB X^T masked to the
    // lower triangle (transposed first when we solved with L^T).
    Matrix gb;
    if (transpose_l)
      gb = lv.triangularView<Eigen::Lower>().solve(g);
    else
      gb = lv.transpose().triangularView<Eigen::Upper>().solve(g);
    Matrix gl_full = -gb * xv.transpose();
    if (transpose_l) gl_full.transposeInPlace();
    Matrix gl = gl_full.triangularView<Eigen::Lower>();
    t.accumulate(il, gl);
    t.accumulate(ib, gb);
  });
}

// K^{-1} B given the lower Cholesky factor of K.
inline Value cholesky_solve(const Value& l, const Value& b) {
  return tri_solve(l, tri_solve(l, b, false), true);
}

// ---------------------------------------------------------------------------
// Parameter registry and Adam
// ---------------------------------------------------------------------------

// Named collection of trainable arrays. Models hold integer handles into one
// store; each objective evaluation mirrors the store onto a fresh tape.
class ParamSet {
public:
  int add(std::string name, Matrix init) {
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return static_cast<int>(values_.size()) - 1;
  }

  int size() const { return static_cast<int>(values_.size()); }
  const std::string& name(int id) const { return names_[static_cast<std::size_t>(id)]; }
  Matrix& value(int id) { return values_[static_cast<std::size_t>(id)]; }
  const Matrix& value(int id) const { return values_[static_cast<std::size_t>(id)]; }
  std::vector<Matrix>& values() { return values_; }
  const std::vector<Matrix>& values() const { return values_; }

  // One leaf per parameter, in id order.
  std::vector<Value> leaves_on(Tape& tape) const {
    std::vector<Value> out;
    out.reserve(values_.size());
    for (const Matrix& v : values_) out.push_back(tape.leaf(v));
    return out;
  }

private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamState {
public:
  AdamState(AdamConfig cfg, const std::vector<Matrix>& params) : cfg_(cfg) {
    if (!(cfg.lr > 0.0) || !(cfg.epsilon > 0.0) || cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 ||
        cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
      throw ValidationError("AdamState: hyperparameters out of range");
    first_moment_.reserve(params.size());
    second_moment_.reserve(params.size());
    for (const Matrix& p : params) {
      first_moment_.push_back(Matrix::Zero(p.rows(), p.cols()));
      second_moment_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }

  long step_count() const { return step_count_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<Matrix>& first_moment() const { return first_moment_; }
  const std::vector<Matrix>& second_moment() const { return second_moment_; }

  // Standard bias-corrected update, applied in place.
  void step(std::vector<Matrix>& params, const std::vector<Matrix>& grads) {
    if (params.size() != first_moment_.size() || grads.size() != first_moment_.size())
      throw ShapeMismatch("adam_step: parameter count differs from state");
    ++step_count_;
    double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& p = params[i];
      const Matrix& g = grads[i];
      if (g.rows() != p.rows() || g.cols() != p.cols())
        throw ShapeMismatch("adam_step: gradient shape differs from parameter shape");
      Matrix& m = first_moment_[i];
      Matrix& v = second_moment_[i];
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      Matrix mhat = m / c1;
      Matrix vhat = v / c2;
      p.array() -= cfg_.lr * mhat.array() / (vhat.array().sqrt() + cfg_.epsilon);
    }
  }

private:
  AdamConfig cfg_;
  long step_count_ = 0;
  std::vector<Matrix> first_moment_;
  std::vector<Matrix> second_moment_;
};

inline void adam_step(AdamState& state, std::vector<Matrix>& params,
                      const std::vector<Matrix>& grads) {
  state.step(params, grads);
}

}  // namespace infossm::diffmath
