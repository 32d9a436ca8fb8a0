#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace ilflow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Process-wide diagnostic counters for soft error paths (clamps, floors).
struct Counters {
  long h_clamped = 0;
  long action_clamped = 0;
  long spline_derivative_clamped = 0;
  long reward_floored = 0;
  void reset() { *this = Counters{}; }
};
Counters& counters();

namespace detail {
struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Matrix value;
  Matrix grad;  // allocated on first write during backward
  bool requires_grad = false;
  bool grad_ready = false;
  bool is_leaf = false;
  std::uint64_t id = 0;
  std::string name;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;
};
}  // namespace detail

// Dense 64-bit tensor participating in a record-on-forward reverse-mode
// graph. Value-semantic handle: copies share the underlying node. Logical
// rank is 1 (row vector) or 2 (rows x cols, row-major semantics); batched
// data uses rows = batch.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Matrix v);
  static Tensor constant(double v);
  static Tensor constant_row(const RowVector& v);
  // Trainable leaf. The name identifies the parameter in optimizer errors
  // and checkpoints.
  static Tensor parameter(Matrix v, std::string name);
  static Tensor zeros(Index rows, Index cols);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  // Mutating a leaf's value is allowed (optimizer updates); mutating an
  // interior node would desynchronize the tape.
  Matrix& leaf_value();
  const Matrix& grad() const;
  // Zero-initialized gradient buffer (for writing gradients by hand).
  Matrix& grad_buffer();
  bool has_grad() const { return node_->grad_ready; }
  void zero_grad();

  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  double scalar() const;

  // Detached copy: same values, no graph history, no gradient.
  Tensor detach() const;

  detail::NodePtr node() const { return node_; }
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

 private:
  detail::NodePtr node_;
};

// Populates grad on every reachable leaf; repeated calls accumulate.
// Throws Error if loss is not scalar.
void backward(const Tensor& loss);

// While alive (per thread), ops compute values but record no tape.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// ---- primitives -----------------------------------------------------------
// Binary ops broadcast (r x c) against (1 x c), (r x 1), (1 x 1) operands.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
// x * w + b with a 1 x out bias row broadcast over rows.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor neg(const Tensor& a);

Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
// sin(omega * x); omega is a fixed constant, not a learnable input.
Tensor sine(const Tensor& a, double omega = 1.0);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
// Hard clamp; gradient is zero outside [lo, hi].
Tensor clamp(const Tensor& a, double lo, double hi);
// Elementwise min; ties route the gradient to a.
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& a);   // 1x1
Tensor mean(const Tensor& a);  // 1x1
Tensor rowsum(const Tensor& a);  // rows x 1
Tensor slice_cols(const Tensor& a, Index first, Index count);
Tensor concat_cols(const std::vector<Tensor>& parts);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::constant(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::constant(a), b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::constant(b)); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::constant(a), b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::constant(b)); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::constant(a), b); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::constant(b)); }
inline Tensor operator/(double a, const Tensor& b) { return div(Tensor::constant(a), b); }

}  // namespace ilflow
