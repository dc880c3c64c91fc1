#pragma once

#include <cstddef>
#include <vector>

#include "rehydil/tensor.hpp"

// Differentiable ops over rehydil::Tensor. Shapes must match exactly; the only
// implicit broadcast is tensor-scalar. Every op records a tape node when one of
// its inputs requires grad and grad mode is on.
namespace rehydil {

/// Same: zero border. Replicate: border repeats the edge value. Both keep H x W.
enum class Padding { Same, Replicate, Valid };

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
/// Vector of length N -> N x N diagonal matrix.
Tensor diag(const Tensor& v);

// Image ops. Layout is B x C x H x W.
/// Stride-1 2D convolution. `weight` is Cout x Cin x K x K, `bias` is Cout or
/// undefined. Same padding requires odd K.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Padding padding);
Tensor max_pool2x2(const Tensor& x);
Tensor upsample_nearest2x(const Tensor& x);
/// Per image and channel: (x - mean) / sqrt(var + eps) over H x W, population
/// variance, no affine terms.
Tensor instance_norm(const Tensor& x, double eps = 1e-5);

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// Tensor-scalar.
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
/// Elementwise a^p.
Tensor pow(const Tensor& a, double p);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// Clamp into [lo, hi]; gradient passes only where the input lies inside.
Tensor clamp(const Tensor& a, double lo, double hi);

// Reductions. The full reductions return shape [1]; the per-axis ones drop the axis
// (a rank-1 input reduces to [1]).
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);

// Structural.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor reshape(const Tensor& a, Shape shape);
/// Selects slabs along `axis` (indices may repeat).
Tensor index_select(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& indices);
/// Gathers flat elements into a rank-1 tensor (indices may repeat).
Tensor gather(const Tensor& a, const std::vector<std::size_t>& flat_indices);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(neg(a), s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator/(const Tensor& a, double s) {
  if (s == 0.0) throw DomainError("div", "division by scalar zero");
  return mul_scalar(a, 1.0 / s);
}
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace rehydil
