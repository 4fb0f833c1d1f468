// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "lptq/detector.hpp"
#include "lptq/error.hpp"
#include "lptq/nn/conv.hpp"
#include "lptq/tensor.hpp"

namespace lptq {

/// Weights of the output-level and total objectives:
/// L_tgpl = L_cls + alpha_reg * L_reg and
/// L_total = lambda1 * L_local + lambda2 * L_tgpl.
struct LossWeights {
  double alpha_reg = 0.25;
  double lambda1 = 1.0;
  double lambda2 = 1.0;

  void validate() const {
    if (alpha_reg < 0 || lambda1 < 0 || lambda2 < 0) throw ParamError("loss weights must be >= 0");
  }
};

inline constexpr double kFocalClamp = 1e-4;
inline constexpr int kMinGaussianRadius = 1;
inline constexpr double kGaussianOverlap = 0.1;

/// Heatmap and regression targets for one frame.
template <typename T>
struct PseudoLabels {
  std::vector<Box3D> boxes;
  Tensor<T> heatmap_target;           // classes x H x W
  Tensor<T> reg_target;               // 8 x H x W
  std::vector<std::uint8_t> reg_mask;  // H x W

  int positives() const {
    int n = 0;
    for (auto m : reg_mask) n += m;
    return n;
  }
};

/// Radius (in cells) at which a shifted box still reaches `min_overlap` IoU
/// with the original; the usual center-heatmap heuristic.
inline double gaussian_radius(double height, double width, double min_overlap = kGaussianOverlap) {
  const double b1 = height + width;
  const double c1 = width * height * (1 - min_overlap) / (1 + min_overlap);
  const double r1 = (b1 + std::sqrt(b1 * b1 - 4 * c1)) / 2;
  const double b2 = 2 * (height + width);
  const double c2 = (1 - min_overlap) * width * height;
  const double r2 = (b2 + std::sqrt(b2 * b2 - 16 * c2)) / 2;
  const double a3 = 4 * min_overlap;
  const double b3 = -2 * min_overlap * (height + width);
  const double c3 = (min_overlap - 1) * width * height;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4 * a3 * c3)) / 2;
  return std::min({r1, r2, r3});
}

/// Render center-peak Gaussian heatmaps and center-cell regression targets
/// for `boxes`, which are taken in the given order: when two boxes share a
/// center cell the first one owns the regression target.
template <typename T>
PseudoLabels<T> render_targets(std::vector<Box3D> boxes, const GridConfig& cfg) {
  const int h = cfg.out_height(), w = cfg.out_width();
  const double cell = cfg.out_cell();
  PseudoLabels<T> lab;
  lab.heatmap_target = Tensor<T>({kNumClasses, h, w});
  lab.reg_target = Tensor<T>({kRegChannels, h, w});
  lab.reg_mask.assign(static_cast<std::size_t>(h) * w, 0);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (const auto& b : boxes) {
    const double fx = (b.x - cfg.x_min) / cell;
    const double fy = (b.y - cfg.y_min) / cell;
    if (fx < 0 || fy < 0 || fx >= w || fy >= h || b.cls < 0 || b.cls >= kNumClasses) continue;
    const int col = static_cast<int>(fx), row = static_cast<int>(fy);
    const BevRect r = bev_rect(b);
    const double radius_f = gaussian_radius((r.y1 - r.y0) / cell, (r.x1 - r.x0) / cell);
    const int radius = std::max(kMinGaussianRadius, static_cast<int>(radius_f));
    const double sigma = (2 * radius + 1) / 6.0;
    T* hm = lab.heatmap_target.ptr() + b.cls * plane;
    for (int dr = -radius; dr <= radius; ++dr) {
      for (int dc = -radius; dc <= radius; ++dc) {
        const int rr = row + dr, cc = col + dc;
        if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
        const T g = (dr == 0 && dc == 0)
                        ? T{1}
                        : static_cast<T>(std::exp(-(dr * dr + dc * dc) / (2 * sigma * sigma)));
        T& dst = hm[static_cast<std::size_t>(rr) * w + cc];
        dst = std::max(dst, g);
      }
    }
    const std::size_t at = static_cast<std::size_t>(row) * w + col;
    if (lab.reg_mask[at]) continue;
    lab.reg_mask[at] = 1;
    const double t[kRegChannels] = {b.x - (cfg.x_min + (col + 0.5) * cell),
                                    b.y - (cfg.y_min + (row + 0.5) * cell),
                                    b.z,
                                    std::log(b.h),
                                    std::log(b.w),
                                    std::log(b.l),
                                    std::sin(b.yaw),
                                    std::cos(b.yaw)};
    for (int ch = 0; ch < kRegChannels; ++ch) lab.reg_target[ch * plane + at] = static_cast<T>(t[ch]);
  }
  lab.boxes = std::move(boxes);
  return lab;
}

/// Pseudo-labels from full-precision detector output for frame `n`:
/// gamma-filtered peaks, top K, NMS, then rendered targets.
template <typename T>
PseudoLabels<T> make_pseudo_labels(const DetectorOutput<T>& fp_out, int n, double gamma, int top_k,
                                   double nms_iou, const GridConfig& cfg) {
  auto boxes = nms_bev(decode_boxes(fp_out, n, cfg, gamma, top_k), nms_iou);
  return render_targets<T>(std::move(boxes), cfg);
}

// ---------------------------------------------------------------------------
// Losses. Each returns the value and, on request, its gradient.
// ---------------------------------------------------------------------------

/// Penalty-reduced focal loss on probabilities:
///   target == 1: -(1-p)^2 log p;  otherwise: -(1-t)^4 p^2 log(1-p),
/// normalized by max(1, number of positives). Predictions are clamped to
/// [1e-4, 1-1e-4]; the gradient is zero where the clamp is active.
template <typename T>
double focal_loss(std::span<const T> pred, std::span<const T> target,
                  std::span<T> grad_pred = {}) {
  if (pred.size() != target.size()) throw ShapeError("focal_loss: shape mismatch");
  if (!grad_pred.empty() && grad_pred.size() != pred.size()) {
    throw ShapeError("focal_loss: gradient buffer size mismatch");
  }
  std::size_t positives = 0;
  for (T t : target) positives += t == T{1};
  const double norm = std::max<double>(1.0, static_cast<double>(positives));
  double loss = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double raw = static_cast<double>(pred[i]);
    const double p = std::clamp(raw, kFocalClamp, 1.0 - kFocalClamp);
    const bool clamped = p != raw;
    const double t = static_cast<double>(target[i]);
    double dl;
    if (target[i] == T{1}) {
      const double om = 1.0 - p;
      loss += -om * om * std::log(p);
      dl = 2.0 * om * std::log(p) - om * om / p;
    } else {
      const double neg = std::pow(1.0 - t, 4);
      loss += -neg * p * p * std::log(1.0 - p);
      dl = -neg * (2.0 * p * std::log(1.0 - p) - p * p / (1.0 - p));
    }
    if (!grad_pred.empty()) grad_pred[i] = clamped ? T{0} : static_cast<T>(dl / norm);
  }
  return loss / norm;
}

/// Mean absolute error over masked cells and all regression channels.
/// `pred` and `target` are R x H x W, `mask` is H x W.
template <typename T>
double l1_reg_loss(std::span<const T> pred, std::span<const T> target,
                   std::span<const std::uint8_t> mask, std::span<T> grad_pred = {}) {
  if (pred.size() != target.size()) throw ShapeError("l1_reg_loss: shape mismatch");
  if (mask.empty() || pred.size() % mask.size() != 0) {
    throw ShapeError("l1_reg_loss: mask does not tile the regression map");
  }
  const std::size_t plane = mask.size();
  const std::size_t channels = pred.size() / plane;
  std::size_t positives = 0;
  for (auto m : mask) positives += m != 0;
  if (!grad_pred.empty()) std::fill(grad_pred.begin(), grad_pred.end(), T{0});
  if (positives == 0) return 0.0;
  const double denom = static_cast<double>(positives * channels);
  double sum = 0.0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t k = 0; k < plane; ++k) {
      if (!mask[k]) continue;
      const std::size_t i = c * plane + k;
      const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
      sum += std::abs(d);
      if (!grad_pred.empty()) grad_pred[i] = static_cast<T>((d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0) / denom);
    }
  }
  return sum / denom;
}

struct TgplTerms {
  double cls = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

/// Output-level loss for a batch, averaged over frames. `logits` and `reg`
/// are the raw head outputs (N x classes x H x W and N x 8 x H x W); the
/// heatmap is sigmoid(logits). Optional gradients are w.r.t. the raw head
/// outputs.
template <typename T>
TgplTerms tgpl_loss(const Tensor<T>& logits, const Tensor<T>& reg,
                    std::span<const PseudoLabels<T>* const> labels, const LossWeights& w,
                    Tensor<T>* d_logits = nullptr, Tensor<T>* d_reg = nullptr) {
  const int n = logits.dim(0);
  if (static_cast<int>(labels.size()) != n || reg.dim(0) != n) {
    throw ShapeError("tgpl_loss: batch size mismatch");
  }
  if (d_logits) *d_logits = Tensor<T>(logits.shape());
  if (d_reg) *d_reg = Tensor<T>(reg.shape());
  TgplTerms out;
  const Tensor<T> prob = nn::sigmoid(logits);
  std::vector<T> gp(prob.size() / n);
  for (int b = 0; b < n; ++b) {
    const auto& lab = *labels[b];
    if (lab.heatmap_target.size() != gp.size()) throw ShapeError("tgpl_loss: heatmap target shape");
    const double lc = focal_loss<T>(prob.slice(b), lab.heatmap_target.data(),
                                    d_logits ? std::span<T>(gp) : std::span<T>{});
    std::span<T> greg = d_reg ? d_reg->slice(b) : std::span<T>{};
    const double lr = l1_reg_loss<T>(reg.slice(b), lab.reg_target.data(), lab.reg_mask, greg);
    out.cls += lc / n;
    out.reg += lr / n;
    if (d_logits) {
      auto dst = d_logits->slice(b);
      auto pb = prob.slice(b);
      for (std::size_t i = 0; i < gp.size(); ++i) {
        dst[i] = gp[i] * pb[i] * (T{1} - pb[i]) / static_cast<T>(n);
      }
    }
    if (d_reg) {
      for (auto& v : greg) v *= static_cast<T>(w.alpha_reg / n);
    }
  }
  out.total = out.cls + w.alpha_reg * out.reg;
  return out;
}

/// ||W * I - Ŵ * I||_F^2 averaged over the batch of recorded inputs `input`
/// (bias cancels). Optionally returns dL/dŴ.
template <typename T>
double local_recon_loss(const Tensor<T>& weight, const Tensor<T>& q_weight, const Tensor<T>& input,
                        int stride, int pad, Tensor<T>* d_q_weight = nullptr) {
  if (weight.shape() != q_weight.shape()) {
    throw ShapeError("local_recon_loss: weight " + weight.shape_str() + " vs quantized " +
                     q_weight.shape_str());
  }
  if (input.rank() != 4 || weight.rank() != 4 || input.dim(1) != weight.dim(1)) {
    throw ShapeError("local_recon_loss: input " + input.shape_str() + " does not fit weight " +
                     weight.shape_str());
  }
  Tensor<T> diff(weight.shape());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = q_weight[i] - weight[i];
  const Tensor<T> r = nn::conv2d_raw(input, diff, Tensor<T>{}, stride, pad);
  const double n = input.dim(0);
  double sum = 0.0;
  for (T v : r.vec()) sum += static_cast<double>(v) * static_cast<double>(v);
  if (d_q_weight) {
    Tensor<T> dr = r;
    for (auto& v : dr.vec()) v *= static_cast<T>(2.0 / n);
    *d_q_weight = nn::conv2d_backward(input, diff, stride, pad, dr, false, true, false).dw;
  }
  return sum / n;
}

inline double total_loss(double local, double tgpl, const LossWeights& w) {
  return w.lambda1 * local + w.lambda2 * tgpl;
}

}  // namespace lptq
