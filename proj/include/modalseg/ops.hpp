#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "modalseg/errors.hpp"
#include "modalseg/params.hpp"
#include "modalseg/tensor.hpp"

// Convolution building blocks with hand-written backward passes. Every
// convolution is lowered to im2col + one GEMM over the whole batch.

namespace modalseg::ops {

struct Window {
  int k = 3;
  int stride = 1;
  int pad = 1;

  int out(int in) const { return (in + 2 * pad - k) / stride + 1; }
};

inline constexpr Window conv3x3{3, 1, 1};
inline constexpr Window down3x3{3, 2, 1};
inline constexpr Window pointwise{1, 1, 0};
// Geometry of the stride-2 4x4 convolution whose transpose doubles resolution.
inline constexpr Window up4x4{4, 2, 1};

/// Output columns [lo, hi) whose input column ox*stride - pad + offset lies inside [0, size).
inline std::pair<int, int> valid_range(int out, int size, int stride, int pad, int offset) {
  int lo = 0;
  while (lo < out && lo * stride - pad + offset < 0) ++lo;
  int hi = out;
  while (hi > lo && (hi - 1) * stride - pad + offset >= size) --hi;
  return {lo, hi};
}

/// Unfolds output rows [r0, r1) of x (cin, n, h, w) into col, a
/// (cin*k*k, (r1-r0)*wo) patch matrix. Output row r is (sample r / ho, y r % ho).
template <class S>
void im2col_rows(const Tensor<S>& x, Window win, int r0, int r1, RowMat<S>& col) {
  const int ho = win.out(x.h), wo = win.out(x.w);
  const int kk = win.k * win.k;
  col.resize(static_cast<Eigen::Index>(x.c) * kk, static_cast<Eigen::Index>(r1 - r0) * wo);
  for (int ci = 0; ci < x.c; ++ci) {
    for (int ky = 0; ky < win.k; ++ky) {
      for (int kx = 0; kx < win.k; ++kx) {
        S* row = col.data() + (static_cast<std::size_t>(ci) * kk + ky * win.k + kx) * col.cols();
        const auto [lo, hi] = valid_range(wo, x.w, win.stride, win.pad, kx);
        for (int r = r0; r < r1; ++r) {
          const int ni = r / ho, oy = r % ho;
          S* dst = row + static_cast<std::size_t>(r - r0) * wo;
          const int iy = oy * win.stride - win.pad + ky;
          if (iy < 0 || iy >= x.h || lo >= hi) {
            std::fill(dst, dst + wo, S(0));
            continue;
          }
          const S* srow = x.data.data() + (static_cast<std::size_t>(ci) * x.n + ni) * x.plane() +
                          static_cast<std::ptrdiff_t>(iy) * x.w - win.pad + kx;
          std::fill(dst, dst + lo, S(0));
          if (win.stride == 1) {
            std::copy(srow + lo, srow + hi, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = srow[ox * win.stride];
          }
          std::fill(dst + hi, dst + wo, S(0));
        }
      }
    }
  }
}

/// Adjoint of im2col_rows: scatters col back onto x, accumulating.
template <class S>
void col2im_add_rows(const RowMat<S>& col, Window win, int r0, int r1, Tensor<S>& x) {
  const int ho = win.out(x.h), wo = win.out(x.w);
  const int kk = win.k * win.k;
  for (int ci = 0; ci < x.c; ++ci) {
    for (int ky = 0; ky < win.k; ++ky) {
      for (int kx = 0; kx < win.k; ++kx) {
        const S* row = col.data() + (static_cast<std::size_t>(ci) * kk + ky * win.k + kx) * col.cols();
        const auto [lo, hi] = valid_range(wo, x.w, win.stride, win.pad, kx);
        for (int r = r0; r < r1; ++r) {
          const int ni = r / ho, oy = r % ho;
          const int iy = oy * win.stride - win.pad + ky;
          if (iy < 0 || iy >= x.h) continue;
          const S* src = row + static_cast<std::size_t>(r - r0) * wo;
          S* drow = x.data.data() + (static_cast<std::size_t>(ci) * x.n + ni) * x.plane() +
                    static_cast<std::ptrdiff_t>(iy) * x.w - win.pad + kx;
          if (win.stride == 1) {
            for (int ox = lo; ox < hi; ++ox) drow[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) drow[ox * win.stride] += src[ox];
          }
        }
      }
    }
  }
}

/// Unfolds x (cin, n, h, w) into a (cin*k*k, n*ho*wo) patch matrix.
template <class S>
RowMat<S> im2col(const Tensor<S>& x, Window win) {
  RowMat<S> col;
  im2col_rows(x, win, 0, x.n * win.out(x.h), col);
  return col;
}

/// Adjoint of im2col.
template <class S>
void col2im_add(const RowMat<S>& col, Window win, Tensor<S>& x) {
  col2im_add_rows(col, win, 0, x.n * win.out(x.h), x);
}

/// Splits the n*ho output rows into chunks whose patch matrix stays cache-sized.
inline int rows_per_chunk(Eigen::Index patch_rows, int wo) {
  constexpr std::size_t kChunkFloats = 1 << 16;
  const std::size_t per_row = static_cast<std::size_t>(patch_rows) * wo;
  return std::max(1, static_cast<int>(kChunkFloats / std::max<std::size_t>(per_row, 1)));
}

template <class S>
void check_kernel(const Tensor<S>& x, Eigen::Index kernel_cols, Window win, const char* where) {
  if (kernel_cols != static_cast<Eigen::Index>(x.c) * win.k * win.k)
    throw ShapeError(std::string(where) + ": kernel expects " + std::to_string(kernel_cols) +
                     " inputs, tensor has " + std::to_string(x.c) + " features");
}

inline bool is_pointwise(Window win) { return win.k == 1 && win.stride == 1 && win.pad == 0; }

// Adds each row's sum to bias[r]. Plain loop: Eigen's vectorized sum peels
// by buffer alignment, which makes the rounding depend on where malloc put it.
template <class S, class M>
void add_row_sums(const M& m, S* bias) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const S* row = m.data() + r * m.cols();
    double acc = 0.0;
    for (Eigen::Index j = 0; j < m.cols(); ++j) acc += row[j];
    bias[r] += static_cast<S>(acc);
  }
}

/// y += W * patches(x). W is (cout, cin*k*k); y must already have the output shape.
template <class S>
void conv2d_accumulate(const Tensor<S>& x, const ConstMatMap<S>& weight, Window win, Tensor<S>& y) {
  check_kernel(x, weight.cols(), win, "conv2d");
  if (y.c != weight.rows() || y.n != x.n || y.h != win.out(x.h) || y.w != win.out(x.w))
    throw ShapeError("conv2d: output tensor has the wrong shape");
  if (is_pointwise(win)) {
    y.mat().noalias() += weight * x.mat();
    return;
  }
  auto ym = y.mat();
  const int rows = y.n * y.h, step = rows_per_chunk(weight.cols(), y.w);
  RowMat<S> col;
  for (int r0 = 0; r0 < rows; r0 += step) {
    const int r1 = std::min(rows, r0 + step);
    im2col_rows(x, win, r0, r1, col);
    ym.middleCols(static_cast<Eigen::Index>(r0) * y.w, col.cols()).noalias() += weight * col;
  }
}

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const ConstMatMap<S>& weight, const S* bias, Window win) {
  Tensor<S> y(static_cast<int>(weight.rows()), x.n, win.out(x.h), win.out(x.w));
  conv2d_accumulate(x, weight, win, y);
  if (bias) {
    auto m = y.mat();
    for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r).array() += bias[r];
  }
  return y;
}

/// Backward of y = W * patches(x) + b. Gradients accumulate into grad_weight,
/// grad_bias (may be null) and grad_x (may be null).
template <class S>
void conv2d_backward(const Tensor<S>& x, const ConstMatMap<S>& weight, const Tensor<S>& grad_y, Window win,
                     MatMap<S> grad_weight, S* grad_bias, Tensor<S>* grad_x) {
  const auto dy = grad_y.mat();
  if (grad_bias) add_row_sums(dy, grad_bias);
  if (grad_x) require_same_shape(*grad_x, x, "conv2d_backward");
  if (is_pointwise(win)) {
    grad_weight.noalias() += dy * x.mat().transpose();
    if (grad_x) grad_x->mat().noalias() += weight.transpose() * dy;
    return;
  }
  const int rows = grad_y.n * grad_y.h, step = rows_per_chunk(weight.cols(), grad_y.w);
  RowMat<S> col, dcol;
  for (int r0 = 0; r0 < rows; r0 += step) {
    const int r1 = std::min(rows, r0 + step);
    im2col_rows(x, win, r0, r1, col);
    const auto dy_chunk = dy.middleCols(static_cast<Eigen::Index>(r0) * grad_y.w, col.cols());
    grad_weight.noalias() += dy_chunk * col.transpose();
    if (grad_x) {
      dcol.noalias() = weight.transpose() * dy_chunk;
      col2im_add_rows(dcol, win, r0, r1, *grad_x);
    }
  }
}

/// Learned 2x upsampling: the transpose of a 4x4 stride-2 pad-1 convolution.
/// weight is (cin, cout*16).
template <class S>
Tensor<S> upsample2x(const Tensor<S>& x, const ConstMatMap<S>& weight, const S* bias) {
  if (weight.rows() != x.c) throw ShapeError("upsample2x: kernel/input feature mismatch");
  const int cout = static_cast<int>(weight.cols() / (up4x4.k * up4x4.k));
  Tensor<S> y(cout, x.n, 2 * x.h, 2 * x.w);
  RowMat<S> col = weight.transpose() * x.mat();
  col2im_add(col, up4x4, y);
  if (bias) {
    auto m = y.mat();
    for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r).array() += bias[r];
  }
  return y;
}

template <class S>
void upsample2x_backward(const Tensor<S>& x, const ConstMatMap<S>& weight, const Tensor<S>& grad_y,
                         MatMap<S> grad_weight, S* grad_bias, Tensor<S>* grad_x) {
  const RowMat<S> dcol = im2col(grad_y, up4x4);  // (cout*16, n*h*w)
  grad_weight.noalias() += x.mat() * dcol.transpose();
  if (grad_bias) add_row_sums(grad_y.mat(), grad_bias);
  if (grad_x) {
    require_same_shape(*grad_x, x, "upsample2x_backward");
    grad_x->mat().noalias() += weight * dcol;
  }
}

enum class ActivationKind { leaky_relu, tanh };

struct Activation {
  ActivationKind kind = ActivationKind::leaky_relu;
  double slope = 0.01;

  template <class S>
  S apply(S v) const {
    if (kind == ActivationKind::tanh) return std::tanh(v);
    return v > S(0) ? v : static_cast<S>(slope) * v;
  }

  template <class S>
  S derivative(S pre) const {
    if (kind == ActivationKind::tanh) {
      const S t = std::tanh(pre);
      return S(1) - t * t;
    }
    return pre > S(0) ? S(1) : static_cast<S>(slope);
  }
};

template <class S>
Tensor<S> activate(const Tensor<S>& pre, Activation act) {
  Tensor<S> out = Tensor<S>::zeros_like(pre);
  for (std::size_t i = 0; i < pre.data.size(); ++i) out.data[i] = act.apply(pre.data[i]);
  return out;
}

/// grad_pre += grad_out * act'(pre)
template <class S>
void activate_backward(const Tensor<S>& pre, const Tensor<S>& grad_out, Activation act, Tensor<S>& grad_pre) {
  require_same_shape(pre, grad_out, "activate_backward");
  require_same_shape(pre, grad_pre, "activate_backward");
  for (std::size_t i = 0; i < pre.data.size(); ++i) grad_pre.data[i] += grad_out.data[i] * act.derivative(pre.data[i]);
}

/// Softmax across the feature axis independently at every (sample, pixel).
template <class S>
Tensor<S> softmax_features(const Tensor<S>& logits) {
  Tensor<S> p = Tensor<S>::zeros_like(logits);
  const std::size_t stride = static_cast<std::size_t>(logits.cols());
  for (std::size_t j = 0; j < stride; ++j) {
    S m = -std::numeric_limits<S>::infinity();
    for (int k = 0; k < logits.c; ++k) m = std::max(m, logits.data[k * stride + j]);
    S z = 0;
    for (int k = 0; k < logits.c; ++k) {
      const S e = std::exp(logits.data[k * stride + j] - m);
      p.data[k * stride + j] = e;
      z += e;
    }
    for (int k = 0; k < logits.c; ++k) p.data[k * stride + j] /= z;
  }
  return p;
}

}  // namespace modalseg::ops
