#include "fmbff/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace fmbff {

namespace {
thread_local bool g_grad_enabled = true;
std::string g_injected_fault;
}  // namespace

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << ')';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void set_injected_fault(std::string op_name) { g_injected_fault = std::move(op_name); }
const std::string& injected_fault() { return g_injected_fault; }

namespace detail {

template <typename T>
std::span<T> input_grad(Node<T>& self, std::size_t i) {
  Node<T>& in = *self.inputs[i];
  if (!in.requires_grad) {
    return {};
  }
  if (in.grad.empty()) {
    in.grad.assign(in.data.size(), T{0});
  }
  return in.grad;
}

}  // namespace detail

namespace {

void check_shape(const Shape& shape) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] <= 0) {
      throw DimensionError("tensor extent on axis " + std::to_string(i) + " must be positive, got " +
                           shape_str(shape));
    }
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<NodeType>()) {
  check_shape(shape);
  node_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<NodeType>()) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<Index>(data.size())) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename T>
Tensor<T> Tensor<T>::from_op(Shape shape, std::vector<T> data, const char* op,
                             const std::vector<Tensor>& inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!g_grad_enabled) {
    return out;
  }
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  if (!any) {
    return out;
  }
  NodeType& n = *out.node_;
  n.requires_grad = true;
  n.op = op;
  n.inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    n.inputs.push_back(t.node_);
  }
  n.backward = std::move(backward);
  return out;
}

template <typename T>
Index Tensor<T>::dim(int axis) const {
  int r = rank();
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return node_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!is_leaf()) {
    throw UsageError("only leaf tensors may be mutated in place");
  }
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw DimensionError("item() needs a one-element tensor, got " + shape_str(shape()));
  }
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!is_leaf()) {
    throw UsageError("requires_grad can only be toggled on leaves");
  }
  node_->requires_grad = on;
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (node_->grad.empty()) {
    node_->grad.assign(node_->data.size(), T{0});
  }
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data);
}

template <typename T>
void backward(const Tensor<T>& loss) {
  using NodeT = detail::Node<T>;
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss");
  }
  if (loss.is_leaf() || !loss.requires_grad()) {
    throw UsageError("backward() called on a tensor without a producing-operation graph");
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child->requires_grad && !child->is_leaf() && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeT* n : order) {
    n->grad.clear();
  }
  loss.node()->grad.assign(1, T{1});

  const std::string& fault = g_injected_fault;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->grad.empty()) {
      continue;
    }
    if (!fault.empty() && fault == n->op) {
      for (T& g : n->grad) {
        g *= T(1.001);
      }
    }
    n->backward(*n);
    if (n != loss.node()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template std::span<float> detail::input_grad(detail::Node<float>&, std::size_t);
template std::span<double> detail::input_grad(detail::Node<double>&, std::size_t);

}  // namespace fmbff
