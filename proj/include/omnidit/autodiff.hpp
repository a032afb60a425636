#pragma once

// Tape-free reverse-mode autodiff over Tensor<T>.
//
// Every op returns a Var whose node remembers its parents and a closure that
// pushes the node's gradient into them. Nodes carry a global creation
// sequence number; backward() visits the reachable nodes in decreasing
// sequence order, which is exactly the reverse of forward execution.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omnidit/tensor.hpp"

namespace omnidit::ad {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
struct Node {
  Tensor<T> value;
  std::vector<T> grad;  // empty until something flows in
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.numel(), T{0});
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = true);
  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& value() const { return node_->value; }
  /// Direct access for optimizers and finite-difference probes; leaves only.
  Tensor<T>& mutable_value();
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const noexcept { return static_cast<bool>(node_); }

  /// Gradient tensor; zeros when nothing reached this node.
  Tensor<T> grad() const;
  std::span<const T> grad_span() const { return node_->grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  void zero_grad();

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// While alive on the current thread, ops record no parents or closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active() noexcept;

 private:
  bool previous_;
};

/// Builds an op result. `fn` is dropped when no parent needs a gradient.
/// Throws NumericError if `value` is not finite.
template <typename T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn);

/// Populates grads of every requires_grad leaf reachable from `loss`.
/// A graph can be differentiated once; recompute the forward to go again.
template <typename T>
void backward(const Var<T>& loss);

// Linear algebra.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x[..., in] * w[in, out] + bias[out]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* bias);

// Elementwise with leading-dimension broadcasting: the smaller operand's
// shape, leading 1s removed, must be a suffix of the larger one's.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> add_scalar(const Var<T>& a, T c);
template <typename T>
Var<T> square(const Var<T>& a);
template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);
template <typename T>
Var<T> gelu(const Var<T>& a);
template <typename T>
Var<T> silu(const Var<T>& a);
/// Normalizes over the last axis; gamma/beta are [n] or null.
template <typename T>
Var<T> layernorm_affine(const Var<T>& x, const Var<T>* gamma, const Var<T>* beta, T eps = T(1e-6));
/// Cosine of the angle between the flattened inputs; throws NumericError on a zero-norm input.
template <typename T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b);

/// Row softmax over the last axis. `mask` (1 = allowed) is either full-shape
/// or one row pattern [n] shared by all rows. Masked outputs are exactly 0.
template <typename T>
Var<T> softmax(const Var<T>& x, const std::vector<std::uint8_t>* mask = nullptr);

// Structural.
template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);
/// out[i] = a[index[i]]; `shape` gives the result extents.
template <typename T>
Var<T> gather(const Var<T>& a, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape);
/// Concatenate along `axis`; all other extents equal.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
/// [B, D] -> [B, L, D] by repeating each row L times.
template <typename T>
Var<T> repeat_rows(const Var<T>& a, std::size_t times);
/// Columns [begin, begin+count) of the last axis.
template <typename T>
Var<T> slice_last(const Var<T>& a, std::size_t begin, std::size_t count);
template <typename T>
Var<T> detach(const Var<T>& a);

/// Sum of squares of all leaf gradients in `params`, square-rooted.
template <typename T>
double grad_norm(std::span<const Var<T>> params);

}  // namespace omnidit::ad
