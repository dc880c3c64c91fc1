#include "rehydil/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace rehydil {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::size_t g_forward_ops = 0;

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

ShapeError::ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs)
    : std::invalid_argument(op + ": shape mismatch " + shape_to_string(lhs) + " vs " + shape_to_string(rhs)),
      op_(op) {}

ShapeError::ShapeError(const std::string& op, const std::string& detail)
    : std::invalid_argument(op + ": " + detail), op_(op) {}

DomainError::DomainError(const std::string& op, const std::string& detail)
    : std::domain_error(op + ": " + detail), op_(op) {}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor", "zero-sized dimension in " + shape_to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor", "shape " + shape_to_string(shape) + " does not match " + std::to_string(data.size()) +
                                   " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!impl_) throw GraphError("tensor is undefined");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("dim", "axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  if (!impl_) throw GraphError("tensor is undefined");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw GraphError("tensor is undefined");
  if (impl_->node) throw GraphError("mutable_data on a non-leaf tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item", "expected a single element, got " + shape_to_string(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (!impl_) throw GraphError("tensor is undefined");
  if (impl_->node && !value) throw GraphError("cannot clear requires_grad on a non-leaf tensor");
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->node; }

bool Tensor::has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) return {};
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

void Tensor::backward() const {
  if (!impl_) throw GraphError("backward on an undefined tensor");
  if (numel() != 1) throw GraphError("backward requires a scalar loss, got shape " + shape_to_string(shape()));
  if (!impl_->requires_grad) throw GraphError("backward on a tensor that does not require grad");
  if (impl_->node && impl_->node->consumed) {
    throw GraphError("backward called twice on the same graph; run a fresh forward pass first");
  }

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  // Shared ownership keeps inputs alive while nodes release them below.
  std::vector<std::shared_ptr<detail::TensorImpl>> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<std::shared_ptr<detail::TensorImpl>, std::size_t>> stack;
  stack.emplace_back(impl_, 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && next < t->node->inputs.size()) {
      std::shared_ptr<detail::TensorImpl> child = t->node->inputs[next++];
      if (child->requires_grad && !visited.count(child.get())) {
        visited.insert(child.get());
        stack.emplace_back(std::move(child), 0);
      }
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  impl_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* t = it->get();
    if (!t->node) continue;
    if (t->node->consumed) throw GraphError("graph segment already consumed by an earlier backward");
    t->grad_buffer();
    t->node->backward(*t, t->node->inputs);
    t->node->consumed = true;
    t->node->backward = nullptr;
    t->node->inputs.clear();
    t->grad.clear();
    t->grad.shrink_to_fit();
  }
}

Tensor Tensor::detach() const {
  if (!impl_) return {};
  auto out = std::make_shared<detail::TensorImpl>();
  out->shape = impl_->shape;
  out->data = impl_->data;
  return Tensor(std::move(out));
}

Tensor Tensor::clone() const {
  Tensor out = detach();
  if (out.defined()) out.impl_->requires_grad = impl_->requires_grad && !impl_->node;
  return out;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t forward_op_count() { return g_forward_ops; }

void reset_forward_op_count() { g_forward_ops = 0; }

namespace detail {

Tensor make_result(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   Node::BackwardFn backward) {
  ++g_forward_ops;
  auto out = std::make_shared<TensorImpl>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  const bool track = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                                   [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward);
    out->node = std::move(node);
    out->requires_grad = true;
  }
  return Tensor(std::move(out));
}

}  // namespace detail

}  // namespace rehydil
