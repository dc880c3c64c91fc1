#include "rehydil/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace rehydil {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;

using detail::make_result;
using detail::TensorImpl;
using Inputs = std::vector<std::shared_ptr<TensorImpl>>;

// Eigen peels vectorized loops by pointer alignment, so the summation order of
// a product over a std::vector buffer depends on where that buffer landed.
// Products therefore run on owned (aligned) copies.
RowMatrix owned(const double* p, std::size_t rows, std::size_t cols) { return ConstMap(p, rows, cols); }

void add_into(double* dst, const RowMatrix& m) {
  const double* src = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) dst[i] += src[i];
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got " + shape_to_string(t.shape()));
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return make_result(op, a.shape(), std::move(out), {a}, [deriv](TensorImpl& o, const Inputs& inputs) {
    TensorImpl& x = *inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * deriv(x.data[i], o.data[i]);
  });
}

std::size_t product(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

// Source index along one axis; -1 reads as zero.
long source_index(long i, std::size_t n, bool replicate) {
  if (i >= 0 && i < static_cast<long>(n)) return i;
  if (!replicate) return -1;
  return i < 0 ? 0 : static_cast<long>(n) - 1;
}

// Unfolds one image (Cin x H x W) into a (Cin*K*K) x (Ho*Wo) column matrix.
void im2col(const double* img, std::size_t cin, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
            bool replicate, std::size_t ho, std::size_t wo, double* cols) {
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = source_index(static_cast<long>(oy + ky) - static_cast<long>(pad), h, replicate);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = source_index(static_cast<long>(ox + kx) - static_cast<long>(pad), w, replicate);
            row[oy * wo + ox] = iy >= 0 && ix >= 0 ? img[(c * h + iy) * w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, std::size_t cin, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
                bool replicate, std::size_t ho, std::size_t wo, double* img) {
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = source_index(static_cast<long>(oy + ky) - static_cast<long>(pad), h, replicate);
          if (iy < 0) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = source_index(static_cast<long>(ox + kx) - static_cast<long>(pad), w, replicate);
            if (ix < 0) continue;
            img[(c * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul", a.shape(), b.shape());
  const RowMatrix product = owned(a.data().data(), m, k) * owned(b.data().data(), k, n);
  std::vector<double> out(product.data(), product.data() + m * n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](TensorImpl& o, const Inputs& in) {
    const RowMatrix go = owned(o.grad.data(), m, n);
    if (in[0]->requires_grad) {
      const RowMatrix ga = go * owned(in[1]->data.data(), k, n).transpose();
      add_into(in[0]->grad_buffer().data(), ga);
    }
    if (in[1]->requires_grad) {
      const RowMatrix gb = owned(in[0]->data.data(), m, k).transpose() * go;
      add_into(in[1]->grad_buffer().data(), gb);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  return permute(a, {1, 0});
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& s = a.shape();
  const std::size_t r = s.size();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) throw ShapeError("permute", "axis list length does not match rank of " + shape_to_string(s));
  for (std::size_t ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("permute", "invalid axis permutation for " + shape_to_string(s));
    seen[ax] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[axes[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];

  // Source offset for every destination element, shared by forward and backward.
  const std::size_t n = a.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[axes[i]];
    src[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  auto in = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = in[src[i]];
  return make_result("permute", std::move(out_shape), std::move(out), {a},
                     [src = std::move(src)](TensorImpl& o, const Inputs& inputs) {
                       if (!inputs[0]->requires_grad) return;
                       auto& g = inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += o.grad[i];
                     });
}

Tensor diag(const Tensor& v) {
  require_rank("diag", v, 1);
  const std::size_t n = v.dim(0);
  std::vector<double> out(n * n, 0.0);
  auto in = v.data();
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = in[i];
  return make_result("diag", {n, n}, std::move(out), {v}, [n](TensorImpl& o, const Inputs& inputs) {
    if (!inputs[0]->requires_grad) return;
    auto& g = inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i * n + i];
  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Padding padding) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin || weight.dim(3) != k) throw ShapeError("conv2d", x.shape(), weight.shape());
  if (bias.defined() && bias.shape() != Shape{cout}) throw ShapeError("conv2d", weight.shape(), bias.shape());
  std::size_t pad = 0, ho = 0, wo = 0;
  const bool replicate = padding == Padding::Replicate;
  if (padding != Padding::Valid) {
    if (k % 2 == 0) throw ShapeError("conv2d", "same padding needs an odd kernel, got " + std::to_string(k));
    pad = k / 2;
    ho = h;
    wo = w;
  } else {
    if (k > h || k > w) throw ShapeError("conv2d", x.shape(), weight.shape());
    ho = h - k + 1;
    wo = w - k + 1;
  }
  const std::size_t patch = cin * k * k, pix = ho * wo;
  std::vector<double> out(batch * cout * pix);
  RowMatrix cols(patch, pix), ob(cout, pix);
  const RowMatrix wmat = owned(weight.data().data(), cout, patch);
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.data().data() + b * cin * h * w, cin, h, w, k, pad, replicate, ho, wo, cols.data());
    ob.noalias() = wmat * cols;
    double* dst = out.data() + b * cout * pix;
    for (std::size_t c = 0; c < cout; ++c) {
      const double shift = bias.defined() ? bias.data()[c] : 0.0;
      for (std::size_t i = 0; i < pix; ++i) dst[c * pix + i] = ob(c, i) + shift;
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(
      "conv2d", {batch, cout, ho, wo}, std::move(out), std::move(inputs),
      [=](TensorImpl& o, const Inputs& in) {
        TensorImpl& xi = *in[0];
        TensorImpl& wi = *in[1];
        RowMatrix cols_b(patch, pix), gout(cout, pix);
        RowMatrix gw = RowMatrix::Zero(cout, patch);
        const RowMatrix wt = owned(wi.data.data(), cout, patch).transpose();
        for (std::size_t b = 0; b < batch; ++b) {
          gout = owned(o.grad.data() + b * cout * pix, cout, pix);
          if (wi.requires_grad) {
            im2col(xi.data.data() + b * cin * h * w, cin, h, w, k, pad, replicate, ho, wo, cols_b.data());
            gw.noalias() += gout * cols_b.transpose();
          }
          if (xi.requires_grad) {
            cols_b.noalias() = wt * gout;
            col2im_add(cols_b.data(), cin, h, w, k, pad, replicate, ho, wo, xi.grad_buffer().data() + b * cin * h * w);
          }
          if (in.size() > 2 && in[2]->requires_grad) {
            auto& gb = in[2]->grad_buffer();
            const double* g = o.grad.data() + b * cout * pix;
            for (std::size_t c = 0; c < cout; ++c) {
              double s = 0.0;
              for (std::size_t i = 0; i < pix; ++i) s += g[c * pix + i];
              gb[c] += s;
            }
          }
        }
        if (wi.requires_grad) add_into(wi.grad_buffer().data(), gw);
      });
}

Tensor max_pool2x2(const Tensor& x) {
  require_rank("max_pool2x2", x, 4);
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("max_pool2x2", "spatial size must be even, got " + shape_to_string(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  auto in = x.data();
  std::vector<double> out(b * c * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t plane = 0; plane < b * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = base + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * oy + dy) * w + 2 * ox + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (plane * ho + oy) * wo + ox;
        out[o] = in[best];
        argmax[o] = best;
      }
    }
  }
  return make_result("max_pool2x2", {b, c, ho, wo}, std::move(out), {x},
                     [argmax = std::move(argmax)](TensorImpl& o, const Inputs& inputs) {
                       if (!inputs[0]->requires_grad) return;
                       auto& g = inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += o.grad[i];
                     });
}

Tensor instance_norm(const Tensor& x, double eps) {
  require_rank("instance_norm", x, 4);
  if (!(eps > 0.0)) throw DomainError("instance_norm", "eps must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  auto in = x.data();
  std::vector<double> out(in.size());
  std::vector<double> inv_sd(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = in.data() + p * hw;
    double m = 0.0;
    for (std::size_t i = 0; i < hw; ++i) m += src[i];
    m /= static_cast<double>(hw);
    double v = 0.0;
    for (std::size_t i = 0; i < hw; ++i) v += (src[i] - m) * (src[i] - m);
    inv_sd[p] = 1.0 / std::sqrt(v / static_cast<double>(hw) + eps);
    for (std::size_t i = 0; i < hw; ++i) out[p * hw + i] = (src[i] - m) * inv_sd[p];
  }
  return make_result("instance_norm", x.shape(), std::move(out), {x},
                     [inv_sd = std::move(inv_sd), hw](TensorImpl& o, const Inputs& inputs) {
                       if (!inputs[0]->requires_grad) return;
                       auto& g = inputs[0]->grad_buffer();
                       const double n = static_cast<double>(hw);
                       for (std::size_t p = 0; p < inv_sd.size(); ++p) {
                         const double* gy = o.grad.data() + p * hw;
                         const double* y = o.data.data() + p * hw;
                         double mg = 0.0, mgy = 0.0;
                         for (std::size_t i = 0; i < hw; ++i) {
                           mg += gy[i];
                           mgy += gy[i] * y[i];
                         }
                         mg /= n;
                         mgy /= n;
                         for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += inv_sd[p] * (gy[i] - mg - y[i] * mgy);
                       }
                     });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank("upsample_nearest2x", x, 4);
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = 2 * h, wo = 2 * w;
  auto in = x.data();
  std::vector<double> out(b * c * ho * wo);
  for (std::size_t plane = 0; plane < b * c; ++plane) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        out[(plane * ho + oy) * wo + ox] = in[(plane * h + oy / 2) * w + ox / 2];
      }
    }
  }
  return make_result("upsample_nearest2x", {b, c, ho, wo}, std::move(out), {x},
                     [=](TensorImpl& o, const Inputs& inputs) {
                       if (!inputs[0]->requires_grad) return;
                       auto& g = inputs[0]->grad_buffer();
                       for (std::size_t plane = 0; plane < b * c; ++plane) {
                         for (std::size_t oy = 0; oy < ho; ++oy) {
                           for (std::size_t ox = 0; ox < wo; ++ox) {
                             g[(plane * h + oy / 2) * w + ox / 2] += o.grad[(plane * ho + oy) * wo + ox];
                           }
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [](TensorImpl& o, const Inputs& in) {
    for (const auto& t : in) {
      if (!t->requires_grad) continue;
      auto& g = t->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [](TensorImpl& o, const Inputs& in) {
    if (in[0]->requires_grad) {
      auto& g = in[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (in[1]->requires_grad) {
      auto& g = in[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [](TensorImpl& o, const Inputs& in) {
    if (in[0]->requires_grad) {
      auto& g = in[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * in[1]->data[i];
    }
    if (in[1]->requires_grad) {
      auto& g = in[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * in[0]->data[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (y[i] == 0.0) throw DomainError("div", "division by zero at element " + std::to_string(i));
    out[i] = x[i] / y[i];
  }
  return make_result("div", a.shape(), std::move(out), {a, b}, [](TensorImpl& o, const Inputs& in) {
    const auto& den = in[1]->data;
    if (in[0]->requires_grad) {
      auto& g = in[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / den[i];
    }
    if (in[1]->requires_grad) {
      auto& g = in[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i] * o.data[i] / den[i];
    }
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary("mul_scalar", a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor pow(const Tensor& a, double p) {
  const bool integral = std::floor(p) == p;
  for (double v : a.data()) {
    if (v < 0.0 && !integral) throw DomainError("pow", "negative base with non-integer exponent");
    if (v == 0.0 && p < 0.0) throw DomainError("pow", "zero base with negative exponent");
  }
  return unary(
      "pow", a, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p == 0.0 ? 0.0 : p * std::pow(v, p - 1.0); });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw DomainError("log", "non-positive argument " + std::to_string(v));
  }
  return unary("log", a, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw DomainError("clamp", "lower bound exceeds upper bound");
  return unary("clamp", a, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  auto x = a.data();
  double s = 0.0;
  for (double v : x) s += v;
  return make_result("sum", {1}, {s}, {a}, [](TensorImpl& o, const Inputs& in) {
    if (!in[0]->requires_grad) return;
    auto& g = in[0]->grad_buffer();
    for (double& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw ShapeError("sum", "axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  const std::size_t outer = product(s, 0, axis), len = s[axis], inner = product(s, axis + 1, s.size());
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  auto x = a.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * len + l) * inner + i];
    }
  }
  return make_result("sum_axis", std::move(out_shape), std::move(out), {a},
                     [=](TensorImpl& res, const Inputs& in) {
                       if (!in[0]->requires_grad) return;
                       auto& g = in[0]->grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t l = 0; l < len; ++l) {
                           for (std::size_t i = 0; i < inner; ++i) g[(o * len + l) * inner + i] += res.grad[o * inner + i];
                         }
                       }
                     });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  return mul_scalar(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat", "axis out of range for " + shape_to_string(first));
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat", first, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) throw ShapeError("concat", first, s);
    }
    total += s[axis];
  }
  const std::size_t outer = product(first, 0, axis), inner = product(first, axis + 1, first.size());
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> lens;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t len = p.dim(axis);
    auto x = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.begin() + o * len * inner, len * inner, out.begin() + (o * total + offset) * inner);
    }
    lens.push_back(len);
    offset += len;
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts,
                     [=](TensorImpl& res, const Inputs& in) {
                       std::size_t off = 0;
                       for (std::size_t p = 0; p < in.size(); ++p) {
                         const std::size_t len = lens[p];
                         if (in[p]->requires_grad) {
                           auto& g = in[p]->grad_buffer();
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t j = 0; j < len * inner; ++j) {
                               g[o * len * inner + j] += res.grad[(o * total + off) * inner + j];
                             }
                           }
                         }
                         off += len;
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a}, [](TensorImpl& o, const Inputs& in) {
    if (!in[0]->requires_grad) return;
    auto& g = in[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor index_select(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& indices) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw ShapeError("index_select", "axis out of range for " + shape_to_string(s));
  if (indices.empty()) throw ShapeError("index_select", "empty index list");
  const std::size_t len = s[axis];
  for (std::size_t i : indices) {
    if (i >= len) throw ShapeError("index_select", "index " + std::to_string(i) + " out of range for " + shape_to_string(s));
  }
  const std::size_t outer = product(s, 0, axis), inner = product(s, axis + 1, s.size());
  Shape out_shape = s;
  out_shape[axis] = indices.size();
  const std::size_t m = indices.size();
  auto x = a.data();
  std::vector<double> out(outer * m * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < m; ++j) {
      std::copy_n(x.begin() + (o * len + indices[j]) * inner, inner, out.begin() + (o * m + j) * inner);
    }
  }
  return make_result("index_select", std::move(out_shape), std::move(out), {a},
                     [=](TensorImpl& res, const Inputs& in) {
                       if (!in[0]->requires_grad) return;
                       auto& g = in[0]->grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t j = 0; j < m; ++j) {
                           for (std::size_t i = 0; i < inner; ++i) {
                             g[(o * len + indices[j]) * inner + i] += res.grad[(o * m + j) * inner + i];
                           }
                         }
                       }
                     });
}

Tensor gather(const Tensor& a, const std::vector<std::size_t>& flat_indices) {
  if (flat_indices.empty()) throw ShapeError("gather", "empty index list");
  auto x = a.data();
  std::vector<double> out(flat_indices.size());
  for (std::size_t j = 0; j < flat_indices.size(); ++j) {
    if (flat_indices[j] >= x.size()) throw ShapeError("gather", "index out of range for " + shape_to_string(a.shape()));
    out[j] = x[flat_indices[j]];
  }
  return make_result("gather", {flat_indices.size()}, std::move(out), {a},
                     [flat_indices](TensorImpl& res, const Inputs& in) {
                       if (!in[0]->requires_grad) return;
                       auto& g = in[0]->grad_buffer();
                       for (std::size_t j = 0; j < flat_indices.size(); ++j) g[flat_indices[j]] += res.grad[j];
                     });
}

}  // namespace rehydil
