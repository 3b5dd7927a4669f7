#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "modalseg/errors.hpp"

namespace modalseg {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

/// Dense batch of feature maps stored feature-major: [feature][sample][row][col].
///
/// With this layout the whole batch is a (features x samples*rows*cols)
/// row-major matrix, which is what the convolution GEMMs consume and produce.
template <class S>
struct Tensor {
  int c = 0;
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<S> data;

  Tensor() = default;
  Tensor(int c_, int n_, int h_, int w_, S fill = S(0))
      : c(c_), n(n_), h(h_), w(w_), data(static_cast<std::size_t>(c_) * n_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  int plane() const { return h * w; }
  int cols() const { return n * h * w; }
  bool empty() const { return data.empty(); }

  S& at(int ci, int ni, int y, int x) {
    return data[((static_cast<std::size_t>(ci) * n + ni) * h + y) * w + x];
  }
  S at(int ci, int ni, int y, int x) const {
    return data[((static_cast<std::size_t>(ci) * n + ni) * h + y) * w + x];
  }

  MatMap<S> mat() { return MatMap<S>(data.data(), c, cols()); }
  ConstMatMap<S> mat() const { return ConstMatMap<S>(data.data(), c, cols()); }

  bool same_shape(const Tensor& o) const { return c == o.c && n == o.n && h == o.h && w == o.w; }

  void set_zero() { std::fill(data.begin(), data.end(), S(0)); }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.c, t.n, t.h, t.w); }
};

template <class S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* where) {
  if (!a.same_shape(b)) throw ShapeError(std::string(where) + ": tensor shape mismatch");
}

/// a += b
template <class S>
void add_into(Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "add_into");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out(t.c, t.n, t.h, t.w);
  for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
  return out;
}

}  // namespace modalseg
