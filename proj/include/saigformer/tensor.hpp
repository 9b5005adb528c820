#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "saigformer/error.hpp"

namespace saig {

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  size_t numel() const noexcept {
    return static_cast<size_t>(n) * static_cast<size_t>(c) * static_cast<size_t>(h) *
           static_cast<size_t>(w);
  }
  size_t plane() const noexcept { return static_cast<size_t>(h) * static_cast<size_t>(w); }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  std::uint64_t seq = 0;
  const char* op = "leaf";

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

std::uint64_t next_seq();

}  // namespace detail

/// Dense rank-4 (N, C, H, W) row-major tensor taking part in a reverse-mode graph.
///
/// A Tensor is a cheap handle; copies share the underlying node. Values of a
/// non-leaf tensor are fixed at construction. Leaves may be written through
/// `mutable_data()` between graph evaluations (optimizer updates, finite
/// differences).
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  /// Builds an interior graph node. `backward` reads the node's grad and
  /// accumulates into the parents. Parents that do not require grad are
  /// dropped; if none remain the result is a constant.
  static Tensor make_result(Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                            std::function<void(Node&)> backward, const char* op);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty() && !node_->backward; }
  const char* op() const { return node_->op; }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() const;
  T item() const;

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient values; all zeros when nothing has been accumulated yet.
  std::vector<T> grad() const;
  void zero_grad() { node_->grad.clear(); }
  void set_requires_grad(bool value);

  /// Copy of the values as a fresh leaf without history.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

/// Runs reverse-mode accumulation from a 1x1x1x1 output into every leaf that
/// requires grad. Nodes are visited in reverse construction order.
template <typename T>
void backward(const Tensor<T>& output);

/// Global operation counters used to assert cost bounds (not wall clock).
struct OpCounters {
  std::uint64_t matmul_macs = 0;
  std::uint64_t sat_reads = 0;
  std::uint64_t sat_queries = 0;
  std::uint64_t illumination_estimates = 0;
  std::uint64_t illumination_downsamples = 0;
};

OpCounters& op_counters();
void reset_op_counters();

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace saig
