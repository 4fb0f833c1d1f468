// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <vector>

#include <Eigen/Core>

#include "lptq/error.hpp"
#include "lptq/tensor.hpp"

namespace lptq::nn {

struct ConvGeometry {
  int in_ch = 0;
  int out_ch = 0;
  int kh = 1;
  int kw = 1;
  int stride = 1;
  int pad = 0;

  int out_h(int h) const { return (h + 2 * pad - kh) / stride + 1; }
  int out_w(int w) const { return (w + 2 * pad - kw) / stride + 1; }
  int patch() const { return in_ch * kh * kw; }
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
ConvGeometry geometry_of(const Tensor<T>& w, int stride, int pad) {
  if (w.rank() != 4) throw ShapeError("conv weight must be OIHW, got " + w.shape_str());
  return ConvGeometry{w.dim(1), w.dim(0), w.dim(2), w.dim(3), stride, pad};
}

namespace detail {

/// Unfold one CHW sample into a (C*kh*kw) x (Ho*Wo) column matrix.
template <typename T>
void im2col(const T* x, int h, int w, const ConvGeometry& g, T* cols) {
  const int ho = g.out_h(h);
  const int wo = g.out_w(w);
  for (int c = 0; c < g.in_ch; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        T* row = cols + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * ho * wo;
        // valid output columns: 0 <= ow*stride - pad + kj < w
        int ow0 = 0;
        while (ow0 < wo && ow0 * g.stride - g.pad + kj < 0) ++ow0;
        int ow1 = wo;
        while (ow1 > ow0 && (ow1 - 1) * g.stride - g.pad + kj >= w) --ow1;
        for (int oh = 0; oh < ho; ++oh) {
          T* dst = row + static_cast<std::size_t>(oh) * wo;
          const int ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= h) {
            std::fill(dst, dst + wo, T{0});
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * h + ih) * w;
          std::fill(dst, dst + ow0, T{0});
          if (g.stride == 1) {
            const int off = kj - g.pad;
            std::copy(src + ow0 + off, src + ow1 + off, dst + ow0);
          } else {
            for (int ow = ow0; ow < ow1; ++ow) dst[ow] = src[ow * g.stride - g.pad + kj];
          }
          std::fill(dst + ow1, dst + wo, T{0});
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-add columns back into a CHW sample.
template <typename T>
void col2im(const T* cols, int h, int w, const ConvGeometry& g, T* x) {
  const int ho = g.out_h(h);
  const int wo = g.out_w(w);
  for (int c = 0; c < g.in_ch; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * ho * wo;
        int ow0 = 0;
        while (ow0 < wo && ow0 * g.stride - g.pad + kj < 0) ++ow0;
        int ow1 = wo;
        while (ow1 > ow0 && (ow1 - 1) * g.stride - g.pad + kj >= w) --ow1;
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= h) continue;
          const T* src = row + static_cast<std::size_t>(oh) * wo;
          T* dst = x + (static_cast<std::size_t>(c) * h + ih) * w;
          for (int ow = ow0; ow < ow1; ++ow) dst[ow * g.stride - g.pad + kj] += src[ow];
        }
      }
    }
  }
}

}  // namespace detail

/// Plain cross-correlation of an NCHW batch with OIHW weights. `bias` may be
/// empty.
template <typename T>
Tensor<T> conv2d_raw(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                     int stride, int pad) {
  const ConvGeometry g = geometry_of(w, stride, pad);
  if (x.rank() != 4 || x.dim(1) != g.in_ch) {
    throw ShapeError("conv2d: input " + x.shape_str() + " incompatible with weight " +
                     w.shape_str());
  }
  if (!bias.empty() && static_cast<int>(bias.size()) != g.out_ch) {
    throw ShapeError("conv2d: bias " + bias.shape_str() + " vs weight " + w.shape_str());
  }
  const int n = x.dim(0), h = x.dim(2), wd = x.dim(3);
  const int ho = g.out_h(h), wo = g.out_w(wd);
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output for input " + x.shape_str());
  Tensor<T> y({n, g.out_ch, ho, wo});
  const int hw = ho * wo;
  RowMatrix<T> cols(g.patch(), hw);
  Eigen::Map<const RowMatrix<T>> wm(w.ptr(), g.out_ch, g.patch());
  for (int b = 0; b < n; ++b) {
    detail::im2col(x.ptr() + static_cast<std::size_t>(b) * g.in_ch * h * wd, h, wd, g,
                   cols.data());
    Eigen::Map<RowMatrix<T>> ym(y.ptr() + static_cast<std::size_t>(b) * g.out_ch * hw,
                                g.out_ch, hw);
    ym.noalias() = wm * cols;
    if (!bias.empty()) {
      for (int o = 0; o < g.out_ch; ++o) ym.row(o).array() += bias[o];
    }
  }
  return y;
}

template <typename T>
struct ConvGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> db;
};

/// Gradients of conv2d_raw given dL/dy. Each requested term is computed
/// with a fixed summation order so results do not depend on call context.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad,
                             const Tensor<T>& dy, bool need_dx, bool need_dw,
                             bool need_db) {
  const ConvGeometry g = geometry_of(w, stride, pad);
  const int n = x.dim(0), h = x.dim(2), wd = x.dim(3);
  const int ho = g.out_h(h), wo = g.out_w(wd);
  if (dy.shape() != std::vector<int>{n, g.out_ch, ho, wo}) {
    throw ShapeError("conv2d_backward: gradient " + dy.shape_str() + " does not match output");
  }
  const int hw = ho * wo;
  ConvGrads<T> out;
  if (need_dx) out.dx = Tensor<T>(x.shape());
  if (need_dw) out.dw = Tensor<T>(w.shape());
  if (need_db) out.db = Tensor<T>({g.out_ch});

  RowMatrix<T> cols(g.patch(), hw);
  Eigen::Map<const RowMatrix<T>> wm(w.ptr(), g.out_ch, g.patch());
  for (int b = 0; b < n; ++b) {
    Eigen::Map<const RowMatrix<T>> dym(dy.ptr() + static_cast<std::size_t>(b) * g.out_ch * hw,
                                       g.out_ch, hw);
    if (need_dw) {
      detail::im2col(x.ptr() + static_cast<std::size_t>(b) * g.in_ch * h * wd, h, wd, g,
                     cols.data());
      Eigen::Map<RowMatrix<T>> dwm(out.dw.ptr(), g.out_ch, g.patch());
      dwm.noalias() += dym * cols.transpose();
    }
    if (need_db) {
      // a plain loop: Eigen's vectorized sum peels by address, which would
      // make the result depend on where dy happens to be allocated
      for (int o = 0; o < g.out_ch; ++o) {
        const T* row = dym.data() + static_cast<std::size_t>(o) * hw;
        T acc = 0;
        for (int i = 0; i < hw; ++i) acc += row[i];
        out.db[o] += acc;
      }
    }
    if (need_dx) {
      cols.noalias() = wm.transpose() * dym;
      detail::col2im(cols.data(), h, wd, g,
                     out.dx.ptr() + static_cast<std::size_t>(b) * g.in_ch * h * wd);
    }
  }
  return out;
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (auto& v : x.vec()) v = v > T{0} ? v : T{0};
}

template <typename T>
T sigmoid(T v) {
  return T{1} / (T{1} + std::exp(-v));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
  return y;
}

}  // namespace lptq::nn
