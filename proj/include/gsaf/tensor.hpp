#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gsaf/errors.hpp"

namespace gsaf {

// ====================== Tensor ======================
//
// Dense row-major matrix of doubles with an optional gradient accumulator.
// Column vectors are (n x 1) tensors. Shape is fixed at creation; gradients
// are only ever accumulated, never overwritten.

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(int rows, int cols, bool requires_grad = false);
  static Tensor from_values(int rows, int cols, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  int size() const { return node_->rows * node_->cols; }
  bool is_vector() const { return node_->cols == 1; }
  bool is_scalar() const { return node_->rows == 1 && node_->cols == 1; }

  double operator()(int i, int j = 0) const {
    return node_->values[static_cast<std::size_t>(i) * node_->cols + j];
  }
  double& mut(int i, int j = 0) {
    return node_->values[static_cast<std::size_t>(i) * node_->cols + j];
  }

  const std::vector<double>& values() const { return node_->values; }
  std::vector<double>& values_mut() { return node_->values; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::vector<double>& grad() const { return node_->grad; }
  double grad_at(int i, int j = 0) const {
    return node_->grad[static_cast<std::size_t>(i) * node_->cols + j];
  }
  void zero_grad();

  // Identity of the underlying storage (two Tensors may share one node).
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  struct Node {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;
    std::vector<double> grad;  // allocated iff requires_grad
    bool requires_grad = false;
  };

  std::shared_ptr<Node> node_;

  friend class Tape;
  friend struct OpAccess;
};

// ====================== Tape ======================
//
// Reverse-mode tape. Ops record backward closures onto the thread's active
// tape; backward() replays them in reverse. One backward per tape unless
// reset. Separate tapes on separate threads are independent.

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // root must be a scalar; seeds d(root)/d(root) = 1 and propagates.
  void backward(const Tensor& root);
  void reset();
  std::size_t size() const { return steps_.size(); }

  static Tape* active();

 private:
  std::vector<std::function<void()>> steps_;
  bool used_ = false;

  friend class TapeScope;
  friend struct OpAccess;
};

// Activates a tape on the current thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// ====================== Primitives ======================

Tensor matmul(const Tensor& a, const Tensor& b);

// Equivalent to matmul(w (.) mask, x); gradients outside the mask are zero.
// mask holds 0/1 values and must match w's shape.
Tensor masked_matmul(const Tensor& w, const Tensor& x, const Tensor& mask);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor add_n(const std::vector<Tensor>& terms);
Tensor scalar_mul(const Tensor& t, double c);
// Differentiable scalar (1x1) times tensor.
Tensor scale(const Tensor& s, const Tensor& t);
Tensor hadamard(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& t);
Tensor sigmoid(const Tensor& t);
Tensor tanh_op(const Tensor& t);
Tensor softplus(const Tensor& t);
Tensor abs_op(const Tensor& t);

Tensor mean(const Tensor& t);
Tensor sum(const Tensor& t);
Tensor inner_product(const Tensor& a, const Tensor& b);

// Vertical concatenation of equal-width blocks; slice_rows is its inverse.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& t, int row_begin, int row_count);

// Max-subtracted softmax over a column vector; output sums to 1.
Tensor softmax(const Tensor& v);

// v / max(||v||, 1e-12); the subgradient at the zero vector is zero.
Tensor l2_normalize(const Tensor& v);

// sum_j coeffs[j] * values[j] for column vectors values[j].
Tensor weighted_sum(const Tensor& coeffs, const std::vector<Tensor>& values);

// ====================== Helpers ======================

bool all_finite(const Tensor& t);

inline constexpr double kNormalizeEpsilon = 1e-12;

}  // namespace gsaf
