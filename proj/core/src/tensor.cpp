#include "collab/tensor.hpp"

#include <atomic>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace collab {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::dimension: return "dimension error";
    case ErrorKind::parameter: return "parameter error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::usage: return "usage error";
    case ErrorKind::input: return "input error";
    case ErrorKind::degenerate: return "degenerate input";
    case ErrorKind::config: return "config error";
    case ErrorKind::format: return "format error";
    case ErrorKind::io: return "I/O error";
    case ErrorKind::invalid_check: return "invalid check";
  }
  return "error";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;
thread_local KinkProbe* g_probe = nullptr;
std::atomic<Fault> g_fault{Fault::none};

template <typename T>
std::shared_ptr<detail::Node<T>> make_leaf(Shape shape, std::vector<T> values,
                                           bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    fail(ErrorKind::dimension, "tensor of shape " + shape_str(shape) + " needs " +
                                   std::to_string(shape_numel(shape)) +
                                   " elements, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

KinkProbe::KinkProbe() : previous_(g_probe) { g_probe = this; }
KinkProbe::~KinkProbe() { g_probe = previous_; }

bool KinkProbe::active() { return g_probe != nullptr; }

void KinkProbe::record(std::uint64_t word) {
  if (!g_probe) return;
  std::uint64_t z = g_probe->hash_ ^ (word + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  g_probe->hash_ = z ^ (z >> 31);
}

void set_fault(Fault fault) { g_fault.store(fault); }
Fault active_fault() { return g_fault.load(); }

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  return Tensor(make_leaf<T>(std::move(shape), std::move(values), false));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const std::size_t n = shape_numel(shape);
  return constant(std::move(shape), std::vector<T>(n, T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const std::size_t n = shape_numel(shape);
  return constant(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return constant({}, {value});
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  return Tensor(make_leaf<T>(std::move(shape), std::move(values), true));
}

template <typename T>
Tensor<T> Tensor<T>::from_op(Shape shape, std::vector<T> values, const char* op,
                             std::vector<Tensor> inputs,
                             typename detail::Node<T>::BackwardFn backward) {
  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  auto node = make_leaf<T>(std::move(shape), std::move(values), needs_grad);
  node->op = op;
  if (needs_grad) {
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(std::move(in.node_));
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    fail(ErrorKind::dimension, "axis " + std::to_string(axis) + " out of range for shape " +
                                   shape_str(node_->shape));
  }
  return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (node_->value.size() != 1) {
    fail(ErrorKind::usage, "item() on tensor of shape " + shape_str(node_->shape));
  }
  return node_->value[0];
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_) node_->grad.assign(node_->value.size(), T(0));
}

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
  Tape tape;
  tape.root_ = root;
  if (!root.requires_grad()) return tape;

  using NodeT = detail::Node<T>;
  std::unordered_set<const NodeT*> visited;
  // Iterative post-order DFS; a node is emitted after all of its parents.
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
      continue;
    }
    tape.nodes_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

template <typename T>
bool Tape<T>::contains(const Tensor<T>& t) const {
  for (const auto* n : nodes_) {
    if (n == t.node().get()) return true;
  }
  return false;
}

template <typename T>
void Tape<T>::backward() {
  if (nodes_.empty()) return;
  for (auto* n : nodes_) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  auto* root = nodes_.back();
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto* n = *it;
    if (!n->is_leaf() && n->backward) n->backward(*n);
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    fail(ErrorKind::usage, "backward() needs a scalar loss, got shape " +
                               (loss.defined() ? shape_str(loss.shape()) : std::string("<null>")));
  }
  Tape<T>::record(loss).backward();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace collab
