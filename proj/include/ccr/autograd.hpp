#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// Every op returns a Var wrapping a graph node. A node records a backward
// closure only when gradient tracking is enabled on the calling thread and at
// least one input requires a gradient, so value-only forward passes (inference,
// finite differences) allocate no tape.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ccr::ag {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  // Zero matrix of the value's shape when no gradient has reached this node.
  Matrix grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double scalar() const;

  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Thread-local switch; while a guard is alive no backward closures are built.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var constant(Matrix value);
Var scalar_constant(double v);
Var detach(const Var& v);

// Seeds d(root)/d(root) = 1 and accumulates into every reachable leaf that
// requires a gradient. Root must be 1x1.
void backward(const Var& root);

// Arithmetic
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator-(const Var& a);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
// b is 1 x cols, broadcast down the rows of a.
Var add_row(const Var& a, const Var& b);
// w is rows x 1; row i of a is multiplied by w(i).
Var scale_rows(const Var& a, const Var& w);
// s is 1x1; result is rows x cols filled with s.
Var broadcast(const Var& s, Index rows, Index cols);
// s is 1x1; result is a * s.
Var scale_by(const Var& a, const Var& s);

// Elementwise nonlinearities
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var gelu(const Var& a);
Var relu(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// Row-wise
Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);
// Mean over rows of -log softmax(a)_{r, target_r}.
Var cross_entropy_rows(const Var& logits, std::span<const int> targets);
// Mean over rows of KL(softmax(p) || softmax(q)).
Var kl_rows(const Var& p_logits, const Var& q_logits);

// Shape
Var gather_rows(const Var& a, std::span<const int> rows);
Var slice_cols(const Var& a, Index start, Index count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var element(const Var& a, Index r, Index c);
Var mean_rows(const Var& a);

// Reductions to 1x1
Var sum(const Var& a);
Var mean(const Var& a);
Var squared_norm(const Var& a);
Var sum_scalars(std::span<const Var> parts);

// Peak-normalized Gaussian over T evenly spaced positions in [0, 1].
// center and width are 1x1; result is T x 1.
Var gaussian_profile(const Var& center, const Var& width, Index frames);

// Inverted dropout; identity when rate == 0.
Var dropout(const Var& a, double rate, std::mt19937_64& rng);

}  // namespace ccr::ag
