// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors. Every model computation in the library is expressed with
// the operations below so that one forward definition serves evaluation,
// training, and gradient checking.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace taskadapter {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Handle to a tensor value and (optionally) its place in a gradient graph.
/// Copies share the same underlying node.
class Var {
 public:
  Var() = default;

  static Var constant(Shape shape, std::vector<double> values);
  static Var zeros(Shape shape);
  /// Leaf tensor; gradients accumulate into it when requires_grad is set.
  static Var leaf(Shape shape, std::vector<double> values, bool requires_grad);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t size() const;

  std::span<const double> values() const;
  /// In-place access for optimizer updates and test perturbations.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  /// Gradient buffer, or an empty span when nothing was accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  /// Back-propagates from a scalar (seed 1) or with an explicit seed.
  void backward() const;
  void backward(std::span<const double> seed) const;

  /// Fresh constant holding a copy of the current values.
  Var detach() const;

  bool same_node(const Var& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph construction on the current thread while alive.
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

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
/// Adds y to every trailing block of x; y.shape() must equal the trailing dims of x.
Var add_broadcast(const Var& x, const Var& y);
/// tanh approximation of GELU.
Var gelu(const Var& x);
/// Natural log of max(x, floor).
Var log_clamped(const Var& x, double floor);

// ---- linear algebra ----------------------------------------------------------

/// x [..., k] times w [k, n] -> [..., n].
Var matmul(const Var& x, const Var& w);
/// matmul plus bias [n]; bias may be undefined.
Var linear(const Var& x, const Var& w, const Var& bias);

/// Normalizes the last axis then applies gain/bias [D].
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps);

/// Scaled dot-product attention with heads split along the feature axis.
/// q [B, Sq, D], k and v [B, Sk, D]. Causal masking requires Sq == Sk.
Var scaled_dot_product_attention(const Var& q, const Var& k, const Var& v, std::size_t heads,
                                 bool causal);

// ---- shape manipulation ------------------------------------------------------

Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, const std::vector<std::size_t>& order);
/// Selects `indices` along `axis` (indices may repeat).
Var take(const Var& x, std::size_t axis, const std::vector<std::size_t>& indices);
/// Drops `axis` by picking a single position.
Var select(const Var& x, std::size_t axis, std::size_t index);
Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Stacks equally-shaped tensors along a new leading axis.
Var stack(const std::vector<Var>& parts);
Var concat(const std::vector<Var>& parts, std::size_t axis);
/// Inserts a new axis of length `count` at `axis`, repeating values.
Var broadcast_axis(const Var& x, std::size_t axis, std::size_t count);

// ---- reductions --------------------------------------------------------------

/// out[i] = sum_j weights[i][j] * x[j] along `axis`; weights is row-major [out, in].
Var combine_along(const Var& x, std::size_t axis, std::size_t out_count,
                  const std::vector<double>& weights);
Var mean_along(const Var& x, std::size_t axis);
Var max_along(const Var& x, std::size_t axis);
Var sum_all(const Var& x);
Var mean_all(const Var& x);
/// Cosine similarity over the last axis; a zero-norm operand gives 0.
Var cosine_last(const Var& a, const Var& b);
/// Scales every last-axis row to unit L2 norm; zero rows stay zero.
Var l2_normalize_last(const Var& x);
Var softmax_last(const Var& x);
/// Divides every last-axis row by its sum.
Var normalize_sum_last(const Var& x);
/// x [R, C] -> [R] with out[r] = x[r, columns[r]].
Var pick_columns(const Var& x, const std::vector<std::size_t>& columns);

}  // namespace taskadapter
