#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fmbff/error.hpp"

namespace fmbff {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Mode { train, eval };

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  // Producing operation; null op means leaf.
  const char* op = nullptr;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad, accumulates into inputs[i]->grad via input_grad().
  std::function<void(Node&)> backward;

  bool is_leaf() const { return op == nullptr; }
};

// Gradient buffer of input `i` of `self`, zero-allocated on first use. Returns
// an empty span when that input does not take part in differentiation.
template <typename T>
std::span<T> input_grad(Node<T>& self, std::size_t i);

}  // namespace detail

// Dense N-dimensional array with optional reverse-mode gradient tracking.
//
// A Tensor is a cheap handle: copies alias the same storage. Values produced
// by operations are immutable; only leaves may be mutated in place (parameter
// updates, checkpoint loading).
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeType = detail::Node<T>;
  using BackwardFn = std::function<void(NodeType&)>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  // Builds the result of an operation. When grad mode is off or no input
  // requires a gradient the result is an untracked leaf.
  static Tensor from_op(Shape shape, std::vector<T> data, const char* op,
                        const std::vector<Tensor>& inputs, BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index dim(int axis) const;
  Index numel() const { return static_cast<Index>(node_->data.size()); }

  std::span<const T> data() const { return node_->data; }
  // Leaves only.
  std::span<T> mutable_data();
  T item() const;
  T operator[](Index flat) const { return node_->data[static_cast<std::size_t>(flat)]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return node_->is_leaf(); }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad();  // allocates zeros if absent
  void zero_grad();
  void clear_grad() { node_->grad.clear(); }

  // Untracked leaf holding a copy of the values.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

// Scoped switch disabling graph construction on the current thread.
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

// Populates grads of every reachable leaf that requires a gradient. Leaf grads
// accumulate across calls; interior grads are recomputed and released.
template <typename T>
void backward(const Tensor<T>& loss);

// Self-test hook for the gradient checker: when set, the backward rule of the
// named op has its incoming gradient scaled by (1 + 1e-3). Empty disables.
void set_injected_fault(std::string op_name);
const std::string& injected_fault();

}  // namespace fmbff
