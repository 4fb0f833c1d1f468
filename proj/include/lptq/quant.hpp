// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "lptq/error.hpp"
#include "lptq/tensor.hpp"

namespace lptq {

/// Scale assigned to tensors whose range collapses to zero.
inline constexpr double kDegenerateScale = 1e-8;

/// Uniform signed symmetric quantizer for one tensor.
///
/// q_min = -2^(bits-1), q_max = 2^(bits-1) - 1 and zero_point = 0. Construct
/// through `symmetric()` so the invariants are checked once.
struct QuantParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;
  int bits = 8;

  std::int64_t q_min() const { return -(std::int64_t{1} << (bits - 1)); }
  std::int64_t q_max() const { return (std::int64_t{1} << (bits - 1)) - 1; }

  static QuantParams symmetric(double scale, int bits) {
    QuantParams p{scale, 0, bits};
    p.validate();
    return p;
  }

  void validate() const {
    if (bits < 2 || bits > 32) {
      throw ParamError("bit-width must be in [2, 32], got " + std::to_string(bits));
    }
    if (!(scale > 0.0) || !std::isfinite(scale)) {
      throw ParamError("quantization scale must be positive and finite, got " +
                       std::to_string(scale));
    }
    if (zero_point != 0) {
      throw ParamError("symmetric scheme requires zero_point = 0");
    }
  }

  bool operator==(const QuantParams&) const = default;
};

/// Per-weight rounding offsets. The raw value is stored unconstrained and
/// clamped into [0, scale] wherever it is read.
template <typename T>
struct RoundingOffsets {
  Tensor<T> theta;

  static RoundingOffsets zeros_like(const Tensor<T>& w) {
    return RoundingOffsets{Tensor<T>(w.shape())};
  }
};

/// std::round rounds half away from zero, which is the tie rule used for
/// every quantizer in the library.
template <typename T>
inline T round_half_away(T v) {
  return std::round(v);
}

template <typename T>
inline T effective_offset(T raw, T scale) {
  return std::clamp(raw, T{0}, scale);
}

/// Integer level of `x` (with optional offset already added) before clamping.
template <typename T>
inline T unclamped_level(T x, T scale) {
  return round_half_away(x / scale);
}

template <typename T>
inline T clamp_level(T level, const QuantParams& p) {
  return std::clamp(level, static_cast<T>(p.q_min()), static_cast<T>(p.q_max()));
}

/// Scalar fake quantization with an already-clamped offset.
template <typename T>
inline T fake_quant_value(T x, T scale, const QuantParams& p, T offset = T{0}) {
  return clamp_level(unclamped_level(x + offset, scale), p) * scale;
}

template <typename T>
Tensor<std::int32_t> quantize(const Tensor<T>& x, const QuantParams& p) {
  p.validate();
  Tensor<std::int32_t> out(x.shape());
  const T s = static_cast<T>(p.scale);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) {
      throw ParamError("quantize: non-finite input at index " + std::to_string(i));
    }
    const T level = clamp_level(unclamped_level(x[i], s) + static_cast<T>(p.zero_point), p);
    out[i] = static_cast<std::int32_t>(level);
  }
  return out;
}

template <typename T>
Tensor<T> dequantize(const Tensor<std::int32_t>& q, const QuantParams& p) {
  p.validate();
  Tensor<T> out(q.shape());
  const T s = static_cast<T>(p.scale);
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] < p.q_min() || q[i] > p.q_max()) {
      throw ParamError("dequantize: value " + std::to_string(q[i]) + " at index " +
                       std::to_string(i) + " outside [" + std::to_string(p.q_min()) +
                       ", " + std::to_string(p.q_max()) + "]");
    }
    out[i] = static_cast<T>(q[i] - p.zero_point) * s;
  }
  return out;
}

/// Scale covering [x_min, x_max] with 2^bits - 1 steps.
inline QuantParams scale_from_range(double x_min, double x_max, int bits) {
  if (!(x_max > x_min)) {
    throw ParamError("scale_from_range: empty range [" + std::to_string(x_min) + ", " +
                     std::to_string(x_max) + "]");
  }
  if (bits < 2) throw ParamError("scale_from_range: bits must be >= 2");
  const double levels = std::ldexp(1.0, bits) - 1.0;
  return QuantParams::symmetric((x_max - x_min) / levels, bits);
}

/// Quantize-dequantize in floating point. With `theta`, each element is
/// shifted by its clamped offset before rounding.
template <typename T>
Tensor<T> fake_quant(const Tensor<T>& x, const QuantParams& p,
                     const RoundingOffsets<T>* theta = nullptr) {
  p.validate();
  if (theta && theta->theta.shape() != x.shape()) {
    throw ShapeError("fake_quant: offsets " + theta->theta.shape_str() +
                     " do not match input " + x.shape_str());
  }
  Tensor<T> out(x.shape());
  const T s = static_cast<T>(p.scale);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) {
      throw ParamError("fake_quant: non-finite input at index " + std::to_string(i));
    }
    const T off = theta ? effective_offset(theta->theta[i], s) : T{0};
    out[i] = fake_quant_value(x[i], s, p, off);
  }
  return out;
}

/// Gradients of a fake-quant node given the upstream gradient `g`.
///
/// Inputs and offsets use the straight-through estimator: the gradient passes
/// where (x + theta) / s lies within [q_min, q_max] and is zero outside. The
/// scale gradient differentiates s * n holding the clamped integer n fixed,
/// so clipped elements contribute q_min or q_max.
template <typename T>
struct FakeQuantGrad {
  Tensor<T> dx;
  Tensor<T> dtheta;  // empty unless offsets were supplied
  double dscale = 0.0;
};

template <typename T>
FakeQuantGrad<T> fake_quant_backward(const Tensor<T>& x, const QuantParams& p,
                                     const RoundingOffsets<T>* theta,
                                     const Tensor<T>& g) {
  if (g.shape() != x.shape()) {
    throw ShapeError("fake_quant_backward: gradient " + g.shape_str() + " vs input " +
                     x.shape_str());
  }
  FakeQuantGrad<T> out;
  out.dx = Tensor<T>(x.shape());
  if (theta) out.dtheta = Tensor<T>(x.shape());
  const T s = static_cast<T>(p.scale);
  const T lo = static_cast<T>(p.q_min());
  const T hi = static_cast<T>(p.q_max());
  double ds = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T raw = theta ? theta->theta[i] : T{0};
    const T off = effective_offset(raw, s);
    const T u = (x[i] + off) / s;
    const T level = clamp_level(round_half_away(u), p);
    const bool inside = u >= lo && u <= hi;
    if (inside) {
      out.dx[i] = g[i];
      // d clamp(raw, 0, s) / d raw
      if (theta && raw >= T{0} && raw <= s) out.dtheta[i] = g[i];
    }
    ds += static_cast<double>(g[i]) * static_cast<double>(level);
  }
  out.dscale = ds;
  return out;
}

/// Largest absolute round-trip error of `x` under `p`.
template <typename T>
double round_trip_error_bound(const Tensor<T>& x, const QuantParams& p) {
  const Tensor<T> y = fake_quant(x, p);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(x[i]) - static_cast<double>(y[i])));
  }
  return worst;
}

}  // namespace lptq
