// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "lptq/error.hpp"

namespace lptq::nn {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

/// One bias-corrected Adam update in place.
template <typename P, typename G>
void adam_step(std::span<P> params, std::span<const G> grads, AdamState& st, double lr) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient size mismatch");
  if (st.m.empty()) {
    st.m.assign(params.size(), 0.0);
    st.v.assign(params.size(), 0.0);
  }
  if (st.m.size() != params.size()) throw ShapeError("adam_step: state size mismatch");
  ++st.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    st.m[i] = kAdamBeta1 * st.m[i] + (1.0 - kAdamBeta1) * g;
    st.v[i] = kAdamBeta2 * st.v[i] + (1.0 - kAdamBeta2) * g * g;
    const double mh = st.m[i] / c1;
    const double vh = st.v[i] / c2;
    params[i] = static_cast<P>(static_cast<double>(params[i]) - lr * mh / (std::sqrt(vh) + kAdamEps));
  }
}

}  // namespace lptq::nn
