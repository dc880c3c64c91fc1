#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rehydil {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes do not conform for an op.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs);
  ShapeError(const std::string& op, const std::string& detail);

  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// Raised when an op is evaluated outside its mathematical domain (log of a
/// non-positive value, division by zero, ...).
class DomainError : public std::domain_error {
 public:
  DomainError(const std::string& op, const std::string& detail);

  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// Misuse of the autodiff tape: non-scalar loss, repeated backward, ...
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct TensorImpl;

struct Node {
  using BackwardFn = std::function<void(TensorImpl& out, const std::vector<std::shared_ptr<TensorImpl>>& inputs)>;

  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;
  std::shared_ptr<Node> node;

  /// Gradient buffer, zero-initialised on first access.
  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major float64 tensor with optional reverse-mode gradient tracking.
///
/// Copies share storage (handle semantics, like most tensor libraries); use
/// `clone()` for an independent copy. Forward ops never mutate their inputs.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable access for leaves only; throws if the tensor is the output of a
  /// recorded op.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  /// Gradient with the same layout as data(); empty span when absent.
  std::span<const double> grad() const;
  void zero_grad();

  /// Runs reverse-mode accumulation from this scalar into every tracked leaf.
  void backward() const;

  /// Same values, no history, no gradient tracking.
  Tensor detach() const;
  /// Deep copy of values (and requires_grad flag) without history.
  Tensor clone() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Whether ops executed on the current thread record graph nodes.
bool grad_enabled();

/// Disables recording for its lifetime (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Number of forward ops evaluated on this thread since the last reset.
std::size_t forward_op_count();
void reset_forward_op_count();

namespace detail {

/// Builds an op result and records a graph node when any input is tracked.
Tensor make_result(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   Node::BackwardFn backward);

}  // namespace detail

}  // namespace rehydil
