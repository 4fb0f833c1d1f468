// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lptq/error.hpp"
#include "lptq/quant.hpp"
#include "lptq/tensor.hpp"

namespace lptq {

inline constexpr int kEntropyBins = 2048;

/// Histogram of |x| with equal-width bins starting at `origin`.
struct Histogram {
  std::vector<std::uint64_t> bin_counts;
  double bin_width = 1.0;
  double origin = 0.0;

  int bins() const { return static_cast<int>(bin_counts.size()); }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : bin_counts) t += c;
    return t;
  }

  /// Element-wise sum; both histograms must share the same binning.
  void merge(const Histogram& other) {
    if (other.bin_counts.size() != bin_counts.size() || other.bin_width != bin_width ||
        other.origin != origin) {
      throw ShapeError("histogram merge requires identical binning");
    }
    for (std::size_t i = 0; i < bin_counts.size(); ++i) bin_counts[i] += other.bin_counts[i];
  }
};

/// Grid search over candidate clipping thresholds.
///
/// Candidates are T thresholds spread linearly over [alpha, beta] times
/// max|x|, plus max|x| itself so the max-min scale is always evaluated.
/// `reciprocal_sweep` switches to the range / T / i sweep (i = 1 .. T-1).
struct SearchConfig {
  int T = 100;
  double alpha = 0.01;
  double beta = 1.2;
  bool reciprocal_sweep = false;
  // Nonzero values scored per candidate; larger inputs are strided down.
  // 0 scores every value.
  std::size_t max_samples = std::size_t{1} << 21;

  void validate() const {
    if (T < 1) throw ParamError("search T must be >= 1");
    if (!(alpha > 0.0) || !(alpha <= beta)) {
      throw ParamError("search multipliers need 0 < alpha <= beta");
    }
  }
};

enum class CalibMethod { maxmin, entropy, maxmin_grid };

inline std::string to_string(CalibMethod m) {
  switch (m) {
    case CalibMethod::maxmin: return "maxmin";
    case CalibMethod::entropy: return "entropy";
    case CalibMethod::maxmin_grid: return "maxmin_grid";
  }
  return "?";
}

inline CalibMethod parse_calib_method(const std::string& s) {
  if (s == "maxmin") return CalibMethod::maxmin;
  if (s == "entropy") return CalibMethod::entropy;
  if (s == "maxmin_grid") return CalibMethod::maxmin_grid;
  throw ConfigError("unknown calibration method '" + s + "'");
}

template <typename T>
double max_abs(std::span<const T> x) {
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) {
      throw ParamError("non-finite value at index " + std::to_string(i));
    }
    m = std::max(m, std::abs(static_cast<double>(x[i])));
  }
  return m;
}

/// Symmetric range (-max|x|, max|x|). An all-zero tensor yields
/// (-kDegenerateScale, kDegenerateScale).
template <typename T>
std::pair<double, double> maxmin_range(std::span<const T> x) {
  if (x.empty()) throw ParamError("maxmin_range: empty tensor");
  const double m = max_abs(x);
  if (m == 0.0) return {-kDegenerateScale, kDegenerateScale};
  return {-m, m};
}

/// Histogram of |x| over [0, range_max]; values beyond range_max land in the
/// last bin.
template <typename T>
Histogram build_histogram_in_range(std::span<const T> x, int n_bins, double range_max) {
  if (n_bins < 2) throw ParamError("histogram needs at least 2 bins");
  if (!(range_max > 0.0)) {
    throw ParamError("histogram of an all-zero tensor; skip entropy calibration");
  }
  Histogram h;
  h.bin_counts.assign(static_cast<std::size_t>(n_bins), 0);
  h.bin_width = range_max / n_bins;
  const double inv = 1.0 / h.bin_width;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = std::abs(static_cast<double>(x[i]));
    if (!std::isfinite(a)) throw ParamError("non-finite value at index " + std::to_string(i));
    auto idx = static_cast<std::int64_t>(a * inv);
    idx = std::min<std::int64_t>(idx, n_bins - 1);
    ++h.bin_counts[static_cast<std::size_t>(idx)];
  }
  return h;
}

template <typename T>
Histogram build_histogram(std::span<const T> x, int n_bins) {
  return build_histogram_in_range(x, n_bins, max_abs(x));
}

/// D_KL(p || q) in nats. 0 log 0 is 0; q(i) = 0 with p(i) > 0 gives +inf.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw ShapeError("kl_divergence: lengths " + std::to_string(p.size()) + " and " +
                     std::to_string(q.size()));
  }
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    d += p[i] * std::log(p[i]) - p[i] * std::log(q[i]);
  }
  return d;
}

struct EntropyResult {
  double threshold = 0.0;
  std::pair<double, double> range;
  int index = -1;             // bin index attaining the minimum divergence
  bool degenerate = false;    // fell back to the max-min range
  std::vector<double> divergence;  // indexed by bin i; entries below 2^(b-1) unused
};

namespace detail {

inline constexpr double kKlSmoothing = 1e-10;

/// Merge the first `i` bins into `levels` equal-width groups (fractional
/// bin edges split linearly) and spread each group back over its non-empty
/// source bins.
inline std::vector<double> requantize_bins(std::span<const std::uint64_t> counts, int i,
                                           int levels) {
  std::vector<double> expanded(static_cast<std::size_t>(i), 0.0);
  const double per_level = static_cast<double>(i) / levels;
  for (int level = 0; level < levels; ++level) {
    const double start = level * per_level;
    const double end = start + per_level;
    const auto left_upper = static_cast<int>(std::ceil(start));
    const auto right_lower = static_cast<int>(std::floor(end));
    const double left_scale = left_upper > start ? left_upper - start : 0.0;
    const double right_scale = right_lower < end ? end - right_lower : 0.0;

    double mass = 0.0;
    double coverage = 0.0;
    if (left_scale > 0.0) {
      const double c = static_cast<double>(counts[left_upper - 1]);
      mass += left_scale * c;
      if (c != 0.0) coverage += left_scale;
    }
    if (right_scale > 0.0) {
      const double c = static_cast<double>(counts[right_lower]);
      mass += right_scale * c;
      if (c != 0.0) coverage += right_scale;
    }
    for (int j = left_upper; j < right_lower; ++j) {
      const double c = static_cast<double>(counts[j]);
      mass += c;
      if (c != 0.0) coverage += 1.0;
    }
    if (coverage == 0.0) continue;
    const double value = mass / coverage;
    if (left_scale > 0.0 && counts[left_upper - 1] != 0) {
      expanded[left_upper - 1] += value * left_scale;
    }
    if (right_scale > 0.0 && counts[right_lower] != 0) {
      expanded[right_lower] += value * right_scale;
    }
    for (int j = left_upper; j < right_lower; ++j) {
      if (counts[j] != 0) expanded[j] += value;
    }
  }
  return expanded;
}

inline void normalize(std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  if (s > 0.0) {
    for (double& x : v) x /= s;
  }
}

}  // namespace detail

/// KL-divergence threshold search over candidate clip bins
/// i = 2^(bits-1) .. N-1. Outlier mass beyond bin i is folded into bin i-1 of
/// the reference distribution; the candidate is the first i bins
/// requantized to 2^(bits-1) levels.
inline EntropyResult entropy_threshold(const Histogram& h, int bits) {
  const int target = 1 << (bits - 1);
  const int n = h.bins();
  if (n <= target) {
    throw ParamError("entropy_threshold: histogram has " + std::to_string(n) +
                     " bins, need more than " + std::to_string(target));
  }
  if (h.total() == 0) throw ParamError("entropy_threshold: empty histogram");

  EntropyResult r;
  const double full = h.origin + n * h.bin_width;
  int nonzero = 0;
  int last_nonzero = -1;
  for (int j = 0; j < n; ++j) {
    if (h.bin_counts[j] != 0) {
      ++nonzero;
      last_nonzero = j;
    }
  }
  if (nonzero <= 1 && last_nonzero < target) {
    r.degenerate = true;
    r.threshold = full;
    r.range = {-full, full};
    r.index = n;
    return r;
  }

  r.divergence.assign(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::span<const std::uint64_t> counts(h.bin_counts);

  // Suffix sums give the outlier mass for every i in O(1).
  std::vector<double> tail(static_cast<std::size_t>(n) + 1, 0.0);
  for (int j = n - 1; j >= 0; --j) tail[j] = tail[j + 1] + static_cast<double>(counts[j]);

  double best = std::numeric_limits<double>::infinity();
  int best_i = target;
  for (int i = target; i < n; ++i) {
    std::vector<double> p(counts.begin(), counts.begin() + i);
    p[i - 1] += tail[i];
    detail::normalize(p);

    std::vector<double> q = detail::requantize_bins(counts, i, target);
    detail::normalize(q);
    bool smoothed = false;
    for (int j = 0; j < i; ++j) {
      if (p[j] > 0.0 && q[j] == 0.0) {
        q[j] = detail::kKlSmoothing;
        smoothed = true;
      }
    }
    if (smoothed) detail::normalize(q);

    const double d = kl_divergence(p, q);
    r.divergence[i] = d;
    if (d < best) {
      best = d;
      best_i = i;
    }
  }
  r.index = best_i;
  r.threshold = h.origin + (best_i + 0.5) * h.bin_width;
  r.range = {-r.threshold, r.threshold};
  return r;
}

/// Sum of squared fake-quantization errors. Zeros reproduce exactly under
/// the symmetric scheme and add nothing.
template <typename T>
double quant_sse(std::span<const T> x, const QuantParams& p) {
  const T s = static_cast<T>(p.scale);
  double sse = 0.0;
  for (T v : x) {
    const double e = static_cast<double>(v) - static_cast<double>(fake_quant_value(v, s, p));
    sse += e * e;
  }
  return sse;
}

inline std::vector<double> grid_candidates(double range, const SearchConfig& cfg) {
  cfg.validate();
  std::vector<double> t;
  if (cfg.reciprocal_sweep) {
    for (int i = 1; i < cfg.T; ++i) t.push_back(range / cfg.T / i);
    if (t.empty()) t.push_back(range);
    std::sort(t.begin(), t.end());
    return t;
  }
  const double step = cfg.T > 1 ? (cfg.beta - cfg.alpha) / (cfg.T - 1) : 0.0;
  for (int i = 0; i < cfg.T; ++i) t.push_back(range * (cfg.alpha + step * i));
  t.push_back(range);
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  return t;
}

struct GridSearchResult {
  QuantParams params;
  double threshold = 0.0;
  double sse = 0.0;
  int index = -1;  // position in the ascending candidate list
  bool degenerate = false;
  std::vector<double> candidates;
};

/// Pick the candidate threshold whose scale minimizes ||x - fq(x)||^2.
/// Ties go to the larger threshold.
template <typename T>
GridSearchResult grid_search_scale(std::span<const T> x, int bits, const SearchConfig& cfg) {
  if (x.empty()) throw ParamError("grid_search_scale: empty tensor");
  cfg.validate();
  GridSearchResult r;
  const double range = max_abs(x);
  if (range == 0.0) {
    r.degenerate = true;
    r.params = QuantParams::symmetric(kDegenerateScale, bits);
    r.threshold = 0.0;
    return r;
  }
  std::vector<T> nz;
  nz.reserve(x.size() / 4);
  for (T v : x) {
    if (v != T{0}) nz.push_back(v);
  }
  if (cfg.max_samples > 0 && nz.size() > cfg.max_samples) {
    // evenly strided subsample; the range above still covers every value
    const std::size_t stride = (nz.size() + cfg.max_samples - 1) / cfg.max_samples;
    std::size_t k = 0;
    for (std::size_t i = 0; i < nz.size(); i += stride) nz[k++] = nz[i];
    nz.resize(k);
  }
  r.candidates = grid_candidates(range, cfg);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < r.candidates.size(); ++i) {
    const double t = r.candidates[i];
    const QuantParams p = scale_from_range(-t, t, bits);
    const double e = quant_sse<T>(nz, p);
    if (e <= best) {
      best = e;
      r.index = static_cast<int>(i);
      r.params = p;
      r.threshold = t;
    }
  }
  r.sse = best;
  return r;
}

struct LayerCalibration {
  QuantParams w;
  QuantParams a;
  bool w_degenerate = false;
  bool a_degenerate = false;
  double a_sse_maxmin = 0.0;  // activation error under plain max-min
  double a_sse = 0.0;         // activation error under the chosen method
};

template <typename T>
QuantParams maxmin_params(std::span<const T> x, int bits, bool* degenerate = nullptr) {
  const auto [lo, hi] = maxmin_range(x);
  if (degenerate) *degenerate = hi == kDegenerateScale;
  if (hi == kDegenerateScale) return QuantParams::symmetric(kDegenerateScale, bits);
  return scale_from_range(lo, hi, bits);
}

/// Calibrate one layer's weight and input quantizers.
///
/// Activation statistics are pooled over every calibration batch first.
/// Entropy histograms use a common range (the global max), so per-batch
/// histograms merge by addition. Weights use max-min for the max-min and
/// entropy methods and grid search for maxmin_grid.
template <typename T>
LayerCalibration calibrate_layer(std::span<const Tensor<T>> activations,
                                 const Tensor<T>& weights, CalibMethod method, int bits,
                                 const SearchConfig& cfg) {
  if (activations.empty()) throw ParamError("calibrate_layer: empty calibration set");
  LayerCalibration out;

  std::size_t total = 0;
  for (const auto& a : activations) total += a.size();
  std::vector<T> pooled;
  pooled.reserve(total);
  for (const auto& a : activations) pooled.insert(pooled.end(), a.vec().begin(), a.vec().end());
  std::span<const T> pooled_span(pooled);

  const QuantParams a_maxmin = maxmin_params(pooled_span, bits, &out.a_degenerate);
  out.a_sse_maxmin = quant_sse(pooled_span, a_maxmin);

  switch (method) {
    case CalibMethod::maxmin:
      out.w = maxmin_params(weights.data(), bits, &out.w_degenerate);
      out.a = a_maxmin;
      break;
    case CalibMethod::entropy: {
      out.w = maxmin_params(weights.data(), bits, &out.w_degenerate);
      if (out.a_degenerate) {
        out.a = a_maxmin;
        break;
      }
      const double range = max_abs(pooled_span);
      Histogram h = build_histogram_in_range<T>(activations.front().data(), kEntropyBins, range);
      for (std::size_t b = 1; b < activations.size(); ++b) {
        h.merge(build_histogram_in_range<T>(activations[b].data(), kEntropyBins, range));
      }
      const EntropyResult e = entropy_threshold(h, bits);
      out.a = scale_from_range(e.range.first, e.range.second, bits);
      break;
    }
    case CalibMethod::maxmin_grid: {
      const auto gw = grid_search_scale(weights.data(), bits, cfg);
      out.w = gw.params;
      out.w_degenerate = gw.degenerate;
      const auto ga = grid_search_scale(pooled_span, bits, cfg);
      out.a = ga.params;
      break;
    }
  }
  out.a_sse = quant_sse(pooled_span, out.a);
  return out;
}

}  // namespace lptq
