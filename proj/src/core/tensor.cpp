#include "ilflow/core/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace ilflow {

Counters& counters() {
  static Counters c;
  return c;
}

namespace {
thread_local int g_no_grad_depth_fwd;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth_fwd; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth_fwd; }
bool grad_enabled() { return g_no_grad_depth_fwd == 0; }

namespace {

std::atomic<std::uint64_t> g_next_id{1};

detail::NodePtr make_node(Matrix v) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(v);
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

bool track(const Tensor& t) { return t.requires_grad(); }

// Result of an op: records parents and a backward lambda only when some
// input is tracked and grad mode is on, so inference builds no graph.
Tensor make_op(Matrix value, std::vector<Tensor> inputs,
               std::function<void(detail::Node&)> bw) {
  auto n = make_node(std::move(value));
  bool any = grad_enabled();
  if (any) {
    any = false;
    for (const auto& t : inputs) any = any || track(t);
  }
  if (any) {
    n->requires_grad = true;
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->backward = std::move(bw);
  }
  return Tensor(std::move(n));
}

// How an operand relates to the broadcast result shape.
enum class Cast { Same, Row, Col, Scalar };

Cast cast_kind(Index rows, Index cols, Index r, Index c) {
  if (rows == r && cols == c) return Cast::Same;
  if (rows == 1 && cols == 1) return Cast::Scalar;
  if (rows == 1 && cols == c) return Cast::Row;
  if (cols == 1 && rows == r) return Cast::Col;
  throw Error("broadcast: incompatible shapes (" + std::to_string(rows) + "x" +
              std::to_string(cols) + " vs " + std::to_string(r) + "x" + std::to_string(c) +
              ")");
}

std::pair<Index, Index> broadcast_shape(const Tensor& a, const Tensor& b) {
  Index r = std::max(a.rows(), b.rows());
  Index c = std::max(a.cols(), b.cols());
  cast_kind(a.rows(), a.cols(), r, c);
  cast_kind(b.rows(), b.cols(), r, c);
  return {r, c};
}

// value of the operand expanded elementwise against result coordinates
// without materializing the expansion.
inline double at(const Matrix& m, Cast k, Index i, Index j) {
  switch (k) {
    case Cast::Same: return m(i, j);
    case Cast::Row: return m(0, j);
    case Cast::Col: return m(i, 0);
    case Cast::Scalar: return m(0, 0);
  }
  return 0.0;
}

// Adds g (result-shaped), reduced over broadcast dimensions, into the
// parent's gradient. First write assigns instead of zero-then-add.
void accumulate(detail::Node& parent, Cast k, const Matrix& g) {
  if (!parent.requires_grad) return;
  auto assign_or_add = [&parent](auto&& expr) {
    if (parent.grad_ready) {
      parent.grad += expr;
    } else {
      parent.grad = expr;
      parent.grad_ready = true;
    }
  };
  switch (k) {
    case Cast::Same: assign_or_add(g); break;
    case Cast::Row: assign_or_add(g.colwise().sum()); break;
    case Cast::Col: assign_or_add(g.rowwise().sum()); break;
    case Cast::Scalar: assign_or_add(Matrix::Constant(1, 1, g.sum())); break;
  }
}

void accumulate_same(detail::Node& parent, const Matrix& g) {
  accumulate(parent, Cast::Same, g);
}

using UnaryValue = std::function<Matrix(const Matrix&)>;
// dfdx(x, y, g): x = input, y = op output, g = incoming gradient.
using UnaryGrad = std::function<Matrix(const Matrix&, const Matrix&, const Matrix&)>;

Tensor unary_op(const Tensor& a, const UnaryValue& f, const UnaryGrad& dfdx) {
  auto an = a.node();
  return make_op(f(an->value), {a}, [an, dfdx](detail::Node& self) {
    accumulate_same(*an, dfdx(an->value, self.value, self.grad));
  });
}

}  // namespace

Tensor Tensor::constant(Matrix v) { return Tensor(make_node(std::move(v))); }

Tensor Tensor::constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

Tensor Tensor::constant_row(const RowVector& v) { return constant(Matrix(v)); }

Tensor Tensor::parameter(Matrix v, std::string name) {
  auto n = make_node(std::move(v));
  n->requires_grad = true;
  n->is_leaf = true;
  n->name = std::move(name);
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Index rows, Index cols) { return constant(Matrix::Zero(rows, cols)); }

Matrix& Tensor::leaf_value() {
  if (!node_->is_leaf && node_->backward) {
    throw Error("leaf_value: cannot mutate an interior graph node");
  }
  return node_->value;
}

const Matrix& Tensor::grad() const {
  if (!node_->grad_ready) throw Error("grad: no gradient accumulated on '" + node_->name + "'");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_->grad_ready) {
    node_->grad_ready = false;
    node_->grad.resize(0, 0);
  }
}

double Tensor::scalar() const {
  if (size() != 1) throw Error("scalar: tensor has " + std::to_string(size()) + " elements");
  return node_->value(0, 0);
}

Tensor Tensor::detach() const { return constant(node_->value); }

Matrix& Tensor::grad_buffer() {
  if (!node_->grad_ready) {
    node_->grad = Matrix::Zero(rows(), cols());
    node_->grad_ready = true;
  }
  return node_->grad;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward: undefined tensor");
  if (loss.size() != 1) throw Error("backward: loss must be scalar, got " +
                                    std::to_string(loss.rows()) + "x" +
                                    std::to_string(loss.cols()));
  if (!loss.requires_grad()) return;

  // Reachable tracked nodes. Creation ids increase from parents to children,
  // so descending id order is a topological order of the tape.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node().get()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  // Interior grads are per-pass scratch; only leaf grads accumulate across
  // repeated backward calls.
  for (detail::Node* n : order) {
    if (!n->is_leaf && n->grad_ready) {
      n->grad_ready = false;
      n->grad.resize(0, 0);
    }
  }
  detail::Node* root = loss.node().get();
  if (root->grad_ready) {
    root->grad(0, 0) += 1.0;
  } else {
    root->grad = Matrix::Constant(1, 1, 1.0);
    root->grad_ready = true;
  }
  for (detail::Node* n : order) {
    if (n->backward && n->grad_ready) n->backward(*n);
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  auto [r, c] = broadcast_shape(a, b);
  Cast ka = cast_kind(a.rows(), a.cols(), r, c);
  Cast kb = cast_kind(b.rows(), b.cols(), r, c);
  Matrix v;
  if (ka == Cast::Same && kb == Cast::Same) {
    v = a.value() + b.value();
  } else if (ka == Cast::Same && kb == Cast::Row) {
    v = a.value();
    v.rowwise() += RowVector(b.value().row(0));
  } else if (ka == Cast::Same && kb == Cast::Col) {
    v = a.value();
    v.colwise() += Vector(b.value().col(0));
  } else if (ka == Cast::Same && kb == Cast::Scalar) {
    v = a.value().array() + b.value()(0, 0);
  } else if (kb == Cast::Same) {
    return add(b, a);
  } else {
    v.resize(r, c);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) v(i, j) = at(a.value(), ka, i, j) + at(b.value(), kb, i, j);
  }
  auto an = a.node(), bn = b.node();
  return make_op(std::move(v), {a, b}, [an, bn, ka, kb](detail::Node& self) {
    accumulate(*an, ka, self.grad);
    accumulate(*bn, kb, self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto [r, c] = broadcast_shape(a, b);
  Cast ka = cast_kind(a.rows(), a.cols(), r, c);
  Cast kb = cast_kind(b.rows(), b.cols(), r, c);
  Matrix v(r, c);
  if (ka == Cast::Same && kb == Cast::Same) {
    v = a.value() - b.value();
  } else {
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) v(i, j) = at(a.value(), ka, i, j) - at(b.value(), kb, i, j);
  }
  auto an = a.node(), bn = b.node();
  return make_op(std::move(v), {a, b}, [an, bn, ka, kb](detail::Node& self) {
    accumulate(*an, ka, self.grad);
    accumulate(*bn, kb, -self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto [r, c] = broadcast_shape(a, b);
  Cast ka = cast_kind(a.rows(), a.cols(), r, c);
  Cast kb = cast_kind(b.rows(), b.cols(), r, c);
  Matrix v(r, c);
  if (ka == Cast::Same && kb == Cast::Same) {
    v = a.value().cwiseProduct(b.value());
  } else if (ka == Cast::Same && kb == Cast::Scalar) {
    v = a.value() * b.value()(0, 0);
  } else if (kb == Cast::Same && ka == Cast::Scalar) {
    v = b.value() * a.value()(0, 0);
  } else {
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) v(i, j) = at(a.value(), ka, i, j) * at(b.value(), kb, i, j);
  }
  auto an = a.node(), bn = b.node();
  return make_op(std::move(v), {a, b}, [an, bn, ka, kb, r, c](detail::Node& self) {
    if (an->requires_grad) {
      if (kb == Cast::Same) {
        accumulate(*an, ka, self.grad.cwiseProduct(bn->value));
      } else if (kb == Cast::Scalar) {
        accumulate(*an, ka, self.grad * bn->value(0, 0));
      } else {
        Matrix g(r, c);
        for (Index i = 0; i < r; ++i)
          for (Index j = 0; j < c; ++j) g(i, j) = self.grad(i, j) * at(bn->value, kb, i, j);
        accumulate(*an, ka, g);
      }
    }
    if (bn->requires_grad) {
      if (ka == Cast::Same) {
        accumulate(*bn, kb, self.grad.cwiseProduct(an->value));
      } else if (ka == Cast::Scalar) {
        accumulate(*bn, kb, self.grad * an->value(0, 0));
      } else {
        Matrix g(r, c);
        for (Index i = 0; i < r; ++i)
          for (Index j = 0; j < c; ++j) g(i, j) = self.grad(i, j) * at(an->value, ka, i, j);
        accumulate(*bn, kb, g);
      }
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  auto [r, c] = broadcast_shape(a, b);
  Cast ka = cast_kind(a.rows(), a.cols(), r, c);
  Cast kb = cast_kind(b.rows(), b.cols(), r, c);
  Matrix v(r, c);
  if (ka == Cast::Same && kb == Cast::Same) {
    v = a.value().cwiseQuotient(b.value());
  } else {
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) v(i, j) = at(a.value(), ka, i, j) / at(b.value(), kb, i, j);
  }
  auto an = a.node(), bn = b.node();
  return make_op(std::move(v), {a, b}, [an, bn, ka, kb, r, c](detail::Node& self) {
    if (an->requires_grad) {
      Matrix g(r, c);
      for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) g(i, j) = self.grad(i, j) / at(bn->value, kb, i, j);
      accumulate(*an, ka, g);
    }
    if (bn->requires_grad) {
      Matrix g(r, c);
      for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) {
          double bv = at(bn->value, kb, i, j);
          g(i, j) = -self.grad(i, j) * at(an->value, ka, i, j) / (bv * bv);
        }
      accumulate(*bn, kb, g);
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw Error("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                std::to_string(b.rows()) + ")");
  }
  auto an = a.node(), bn = b.node();
  Matrix v = an->value * bn->value;
  return make_op(std::move(v), {a, b}, [an, bn](detail::Node& self) {
    if (an->requires_grad) {
      if (an->grad_ready) {
        an->grad.noalias() += self.grad * bn->value.transpose();
      } else {
        an->grad.noalias() = self.grad * bn->value.transpose();
        an->grad_ready = true;
      }
    }
    if (bn->requires_grad) {
      if (bn->grad_ready) {
        bn->grad.noalias() += an->value.transpose() * self.grad;
      } else {
        bn->grad.noalias() = an->value.transpose() * self.grad;
        bn->grad_ready = true;
      }
    }
  });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw Error("affine: shape mismatch");
  }
  auto xn = x.node(), wn = w.node(), bn = b.node();
  Matrix v = xn->value * wn->value;
  v.rowwise() += RowVector(bn->value.row(0));
  return make_op(std::move(v), {x, w, b}, [xn, wn, bn](detail::Node& self) {
    if (xn->requires_grad) {
      if (xn->grad_ready) {
        xn->grad.noalias() += self.grad * wn->value.transpose();
      } else {
        xn->grad.noalias() = self.grad * wn->value.transpose();
        xn->grad_ready = true;
      }
    }
    if (wn->requires_grad) {
      if (wn->grad_ready) {
        wn->grad.noalias() += xn->value.transpose() * self.grad;
      } else {
        wn->grad.noalias() = xn->value.transpose() * self.grad;
        wn->grad_ready = true;
      }
    }
    accumulate(*bn, Cast::Row, self.grad);
  });
}

Tensor neg(const Tensor& a) {
  auto an = a.node();
  return make_op(-an->value, {a},
                 [an](detail::Node& self) { accumulate_same(*an, -self.grad); });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](const Matrix& x) { return x.array().tanh().matrix(); },
      [](const Matrix&, const Matrix& y, const Matrix& g) {
        return (g.array() * (1.0 - y.array().square())).matrix();
      });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](const Matrix& x) { return x.cwiseMax(0.0); },
      [](const Matrix& x, const Matrix&, const Matrix& g) {
        return (g.array() * (x.array() > 0.0).cast<double>()).matrix();
      });
}

Tensor sine(const Tensor& a, double omega) {
  return unary_op(
      a, [omega](const Matrix& x) { return (omega * x.array()).sin().matrix(); },
      [omega](const Matrix& x, const Matrix&, const Matrix& g) {
        return (g.array() * omega * (omega * x.array()).cos()).matrix();
      });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](const Matrix& x) { return x.array().log().matrix(); },
      [](const Matrix& x, const Matrix&, const Matrix& g) {
        return (g.array() / x.array()).matrix();
      });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](const Matrix& x) { return x.array().exp().matrix(); },
      [](const Matrix&, const Matrix& y, const Matrix& g) {
        return (g.array() * y.array()).matrix();
      });
}

Tensor softplus(const Tensor& a) {
  // log(1 + e^x) evaluated stably as max(x, 0) + log1p(e^-|x|).
  return unary_op(
      a,
      [](const Matrix& x) {
        return (x.array().max(0.0) + (-x.array().abs()).exp().log1p()).matrix();
      },
      [](const Matrix& x, const Matrix&, const Matrix& g) {
        return (g.array() / (1.0 + (-x.array()).exp())).matrix();
      });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, [](const Matrix& x) { return x.array().sqrt().matrix(); },
      [](const Matrix&, const Matrix& y, const Matrix& g) {
        return (g.array() * 0.5 / y.array()).matrix();
      });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](const Matrix& x) { return x.array().square().matrix(); },
      [](const Matrix& x, const Matrix&, const Matrix& g) {
        return (g.array() * 2.0 * x.array()).matrix();
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary_op(
      a, [lo, hi](const Matrix& x) { return x.cwiseMax(lo).cwiseMin(hi); },
      [lo, hi](const Matrix& x, const Matrix&, const Matrix& g) {
        return (g.array() * ((x.array() >= lo) && (x.array() <= hi)).cast<double>()).matrix();
      });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error("minimum: shapes must match");
  }
  Matrix pick_a = (a.value().array() <= b.value().array()).cast<double>().matrix();
  auto an = a.node(), bn = b.node();
  return make_op(a.value().cwiseMin(b.value()), {a, b}, [an, bn, pick_a](detail::Node& self) {
    accumulate_same(*an, self.grad.cwiseProduct(pick_a));
    accumulate_same(*bn, self.grad.cwiseProduct((1.0 - pick_a.array()).matrix()));
  });
}

Tensor sum(const Tensor& a) {
  auto an = a.node();
  return make_op(Matrix::Constant(1, 1, an->value.sum()), {a}, [an](detail::Node& self) {
    accumulate_same(*an,
                    Matrix::Constant(an->value.rows(), an->value.cols(), self.grad(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  auto an = a.node();
  double inv = 1.0 / static_cast<double>(an->value.size());
  return make_op(Matrix::Constant(1, 1, an->value.mean()), {a}, [an, inv](detail::Node& self) {
    accumulate_same(
        *an, Matrix::Constant(an->value.rows(), an->value.cols(), self.grad(0, 0) * inv));
  });
}

Tensor rowsum(const Tensor& a) {
  auto an = a.node();
  Matrix v = an->value.rowwise().sum();
  return make_op(std::move(v), {a}, [an](detail::Node& self) {
    accumulate_same(*an, self.grad.replicate(1, an->value.cols()));
  });
}

Tensor slice_cols(const Tensor& a, Index first, Index count) {
  if (first < 0 || count < 0 || first + count > a.cols()) {
    throw Error("slice_cols: range [" + std::to_string(first) + ", " +
                std::to_string(first + count) + ") out of " + std::to_string(a.cols()));
  }
  auto an = a.node();
  Matrix v = an->value.middleCols(first, count);
  return make_op(std::move(v), {a}, [an, first, count](detail::Node& self) {
    if (!an->requires_grad) return;
    if (!an->grad_ready) {
      an->grad = Matrix::Zero(an->value.rows(), an->value.cols());
      an->grad_ready = true;
    }
    an->grad.middleCols(first, count) += self.grad;
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error("concat_cols: no inputs");
  Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw Error("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<detail::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op(std::move(v), parts, [nodes](detail::Node& self) {
    Index at = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) {
        if (n->grad_ready) {
          n->grad += self.grad.middleCols(at, n->value.cols());
        } else {
          n->grad = self.grad.middleCols(at, n->value.cols());
          n->grad_ready = true;
        }
      }
      at += n->value.cols();
    }
  });
}

}  // namespace ilflow
