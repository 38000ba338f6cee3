#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "collab/error.hpp"

namespace collab {

using Shape = std::vector<std::size_t>;

/// Product of extents; 1 for the empty shape (scalars).
std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// One recorded value in the computation graph. Leaves have no parents;
/// interior nodes carry the rule that pushes their gradient to the parents.
template <typename T>
struct Node {
  using BackwardFn = std::function<void(Node&)>;

  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share the underlying node, so a
/// parameter tensor held by a network and by an optimizer is the same value.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<T> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);
  /// Leaf that accumulates gradients during backward().
  static Tensor parameter(Shape shape, std::vector<T> values);

  /// Interior node produced by an op. When gradient recording is disabled
  /// or no input requires a gradient, the result is a plain constant.
  static Tensor from_op(Shape shape, std::vector<T> values, const char* op,
                        std::vector<Tensor> inputs,
                        typename detail::Node<T>::BackwardFn backward);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  /// In-place write access; meant for parameter updates and tests.
  std::span<T> mutable_values() { return node_->value; }
  T item() const;
  T at(std::size_t flat_index) const { return node_->value.at(flat_index); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad();
  void zero_grad();

  const char* op_name() const { return node_->op; }
  const NodePtr& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  NodePtr node_;
};

/// Topologically ordered view of every gradient-carrying node reachable
/// from a root. Parents always precede their children.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<detail::Node<T>*>& nodes() const { return nodes_; }
  bool contains(const Tensor<T>& t) const;

  /// Seeds d(root)/d(root) = 1 and replays every backward rule once in
  /// reverse order. Leaf gradients accumulate across calls; interior
  /// gradients are reset per call.
  void backward();

 private:
  Tensor<T> root_;
  std::vector<detail::Node<T>*> nodes_;
};

/// Reverse-mode pass from a scalar loss.
template <typename T>
void backward(const Tensor<T>& loss);

/// Disables graph recording on the current thread while alive.
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

/// While alive, piecewise-linear ops (ReLU, max pooling) fold their branch
/// decisions into a running hash on the current thread. Two evaluations with
/// equal signatures took the same linear piece.
class KinkProbe {
 public:
  KinkProbe();
  ~KinkProbe();
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;

  std::uint64_t signature() const { return hash_; }

  static bool active();
  /// No-op without an active probe.
  static void record(std::uint64_t word);

 private:
  KinkProbe* previous_;
  std::uint64_t hash_ = 0x243f6a8885a308d3ULL;
};

/// Deliberately wrong backward rules for the gradient-check negative control.
enum class Fault { none, relu_backward, scale_backward };

void set_fault(Fault fault);
Fault active_fault();

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace collab
