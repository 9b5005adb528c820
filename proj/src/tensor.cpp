#include "saigformer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

namespace saig {

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
         std::to_string(w);
}

namespace detail {

std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

namespace {

void check_shape(const Shape& s) {
  if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
    throw ShapeError("tensor", "negative dimension in shape " + s.str());
  }
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  check_shape(shape);
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->data.assign(shape.numel(), value);
  node->requires_grad = requires_grad;
  node->seq = detail::next_seq();
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  check_shape(shape);
  if (values.size() != shape.numel()) {
    throw ShapeError("tensor", "numel", static_cast<long>(shape.numel()),
                     static_cast<long>(values.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = detail::next_seq();
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return full({1, 1, 1, 1}, value, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                                 std::function<void(Node&)> backward_fn, const char* op) {
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->data = std::move(values);
  node->op = op;
  node->seq = detail::next_seq();
  bool any = false;
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) {
      any = true;
    }
  }
  if (any) {
    node->requires_grad = true;
    for (auto& in : inputs) {
      if (in.defined()) node->parents.push_back(in.node_);
    }
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() const {
  if (!is_leaf()) {
    throw ValueError(std::string("mutable_data: tensor produced by '") + node_->op +
                     "' is immutable");
  }
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (node_->data.size() != 1) {
    throw ShapeError("item", "numel", 1, static_cast<long>(node_->data.size()));
  }
  return node_->data[0];
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) return std::vector<T>(node_->data.size(), T(0));
  return node_->grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  if (!is_leaf()) throw ValueError("set_requires_grad: only leaves can be toggled");
  node_->requires_grad = value;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(node_->shape, node_->data, false);
}

template <typename T>
void backward(const Tensor<T>& output) {
  if (output.numel() != 1) {
    throw ShapeError("backward", "output must be a scalar, got shape " + output.shape().str());
  }
  if (!output.requires_grad()) return;

  using Node = detail::Node<T>;
  std::vector<Node*> order;
  std::vector<Node*> stack{output.node()};
  std::unordered_set<const Node*> seen;
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

  output.node()->ensure_grad()[0] += T(1);
  for (Node* n : order) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

namespace {
thread_local OpCounters g_counters;
}

OpCounters& op_counters() { return g_counters; }
void reset_op_counters() { g_counters = OpCounters{}; }

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace saig
