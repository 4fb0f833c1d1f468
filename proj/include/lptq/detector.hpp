// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <tuple>
#include <vector>

#include "lptq/error.hpp"
#include "lptq/nn/network.hpp"
#include "lptq/random.hpp"
#include "lptq/tensor.hpp"

namespace lptq {

struct Point {
  float x = 0, y = 0, z = 0, r = 0;
  bool operator==(const Point&) const = default;
};

using PointCloud = std::vector<Point>;

inline constexpr int kNumClasses = 2;  // 0 = vehicle, 1 = pedestrian
inline constexpr int kRegChannels = 8;  // dx, dy, z, log h, log w, log l, sin yaw, cos yaw
inline constexpr int kPillarChannels = 6;

inline const char* class_name(int cls) { return cls == 0 ? "vehicle" : "pedestrian"; }

/// Object box: center, size (h, w, l), heading, class, confidence. `l` runs
/// along the heading, `w` across it.
struct Box3D {
  double x = 0, y = 0, z = 0;
  double h = 1, w = 1, l = 1;
  double yaw = 0;
  int cls = 0;
  double score = 1.0;

  bool operator==(const Box3D&) const = default;
};

/// Wrap an angle into (-pi, pi].
inline double normalize_yaw(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

struct GridConfig {
  double x_min = -32.0, x_max = 32.0;
  double y_min = -32.0, y_max = 32.0;
  double voxel = 0.5;
  int out_stride = 2;         // BEV downsampling of the detector
  double count_norm = 32.0;   // point-count feature saturates here

  int width() const { return static_cast<int>(std::lround((x_max - x_min) / voxel)); }
  int height() const { return static_cast<int>(std::lround((y_max - y_min) / voxel)); }
  int out_width() const { return width() / out_stride; }
  int out_height() const { return height() / out_stride; }
  double out_cell() const { return voxel * out_stride; }

  void validate() const {
    if (!(voxel > 0.0) || !(x_max > x_min) || !(y_max > y_min)) {
      throw ParamError("grid config needs voxel > 0 and a non-empty range");
    }
  }
};

/// Dense BEV pillar features (C x H x W) plus occupancy.
struct PillarGrid {
  Tensor<float> features;
  std::vector<std::uint8_t> occupancy;  // H x W
  GridConfig cfg;

  double occupancy_fraction() const {
    std::size_t n = 0;
    for (auto o : occupancy) n += o;
    return occupancy.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(occupancy.size());
  }
};

/// Hand-crafted pillar encoder. Per occupied pillar:
///   0 mean x, 1 mean y, 2 mean z, 3 mean reflectance,
///   4 min(count, count_norm) / count_norm, 5 mean(|x| + |y|).
/// Absolute coordinates are kept so feature magnitude grows with range.
inline PillarGrid pillarize(const PointCloud& pc, const GridConfig& cfg) {
  cfg.validate();
  const int h = cfg.height(), w = cfg.width();
  PillarGrid g;
  g.cfg = cfg;
  g.features = Tensor<float>({kPillarChannels, h, w});
  g.occupancy.assign(static_cast<std::size_t>(h) * w, 0);
  std::vector<double> acc(static_cast<std::size_t>(h) * w * 5, 0.0);
  std::vector<int> count(static_cast<std::size_t>(h) * w, 0);
  for (const auto& p : pc) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) continue;
    const double fx = (p.x - cfg.x_min) / cfg.voxel;
    const double fy = (p.y - cfg.y_min) / cfg.voxel;
    if (fx < 0 || fy < 0) continue;
    const auto col = static_cast<int>(fx);
    const auto row = static_cast<int>(fy);
    if (col >= w || row >= h) continue;
    const std::size_t cell = static_cast<std::size_t>(row) * w + col;
    double* a = &acc[cell * 5];
    a[0] += p.x;
    a[1] += p.y;
    a[2] += p.z;
    a[3] += p.r;
    a[4] += std::abs(p.x) + std::abs(p.y);
    ++count[cell];
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  float* f = g.features.ptr();
  for (std::size_t cell = 0; cell < plane; ++cell) {
    const int n = count[cell];
    if (n == 0) continue;
    g.occupancy[cell] = 1;
    const double* a = &acc[cell * 5];
    f[0 * plane + cell] = static_cast<float>(a[0] / n);
    f[1 * plane + cell] = static_cast<float>(a[1] / n);
    f[2 * plane + cell] = static_cast<float>(a[2] / n);
    f[3 * plane + cell] = static_cast<float>(a[3] / n);
    f[4 * plane + cell] = static_cast<float>(std::min<double>(n, cfg.count_norm) / cfg.count_norm);
    f[5 * plane + cell] = static_cast<float>(a[4] / n);
  }
  return g;
}

/// Stack pillar grids into an N x C x H x W network input.
template <typename T = float>
Tensor<T> batch_grids(const std::vector<const PillarGrid*>& grids) {
  if (grids.empty()) throw ShapeError("empty batch");
  const auto& s = grids.front()->features.shape();
  Tensor<T> out({static_cast<int>(grids.size()), s[0], s[1], s[2]});
  const std::size_t stride = grids.front()->features.size();
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const auto& v = grids[i]->features.vec();
    std::copy(v.begin(), v.end(), out.vec().begin() + static_cast<std::ptrdiff_t>(stride * i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

struct DetectorArch {
  int channels = 16;
  int backbone_layers = 5;  // conv1 (stride 1) + conv2 (stride 2) + the rest
  double heatmap_prior = 0.1;
};

/// Backbone of 3x3 conv+ReLU layers with one stride-2 layer, then two
/// sibling 1x1 heads. The first conv and both heads are marked exempt from
/// quantization.
template <typename T>
nn::Network<T> make_detector(const DetectorArch& arch, std::uint64_t seed) {
  if (arch.backbone_layers < 2) throw ParamError("detector needs at least 2 backbone layers");
  Rng rng(seed);
  nn::Network<T> net;
  net.input_channels = kPillarChannels;
  auto conv = [&](const std::string& name, nn::LayerRole role, int in, int out, int k, int stride,
                  nn::Activation act) {
    nn::LayerSpec<T> l;
    l.name = name;
    l.role = role;
    l.weight = Tensor<T>({out, in, k, k});
    const double sd = std::sqrt(2.0 / (in * k * k));
    for (auto& v : l.weight.vec()) v = static_cast<T>(rng.normal(0.0, sd));
    l.bias = Tensor<T>({out});
    l.stride = stride;
    l.padding = k / 2;
    l.activation = act;
    return l;
  };
  const int c = arch.channels;
  for (int i = 0; i < arch.backbone_layers; ++i) {
    auto l = conv("conv" + std::to_string(i + 1), nn::LayerRole::backbone,
                  i == 0 ? kPillarChannels : c, c, 3, i == 1 ? 2 : 1, nn::Activation::relu);
    l.fp_exempt = i == 0;
    net.layers.push_back(std::move(l));
  }
  auto cls = conv("head_cls", nn::LayerRole::head_cls, c, kNumClasses, 1, 1, nn::Activation::none);
  for (auto& v : cls.weight.vec()) v *= static_cast<T>(0.1);
  const double prior_logit = std::log(arch.heatmap_prior / (1.0 - arch.heatmap_prior));
  cls.bias.fill(static_cast<T>(prior_logit));
  cls.fp_exempt = true;
  auto reg = conv("head_reg", nn::LayerRole::head_reg, c, kRegChannels, 1, 1, nn::Activation::none);
  for (auto& v : reg.weight.vec()) v *= static_cast<T>(0.1);
  reg.fp_exempt = true;
  net.layers.push_back(std::move(cls));
  net.layers.push_back(std::move(reg));
  net.validate();
  return net;
}

template <typename T>
int head_index(const nn::Network<T>& net, nn::LayerRole role) {
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (net.layers[i].role == role) return static_cast<int>(i);
  }
  throw ShapeError("network has no head of the requested role");
}

/// Post-sigmoid heatmap (N x classes x H x W) and raw regression
/// (N x 8 x H x W).
template <typename T>
struct DetectorOutput {
  Tensor<T> heatmap;
  Tensor<T> regression;
};

template <typename T>
DetectorOutput<T> outputs_from(const nn::Network<T>& net, const std::vector<Tensor<T>>& outs) {
  const int ci = head_index(net, nn::LayerRole::head_cls);
  const int ri = head_index(net, nn::LayerRole::head_reg);
  return {nn::sigmoid(outs[ci]), outs[ri]};
}

template <typename T>
DetectorOutput<T> detector_forward(const nn::Network<T>& net, const Tensor<T>& input) {
  if (input.rank() != 4 || input.dim(1) != net.input_channels) {
    throw ShapeError("detector input " + input.shape_str() + " does not match " +
                     std::to_string(net.input_channels) + " pillar channels");
  }
  return outputs_from(net, nn::forward_all(net, input));
}

// ---------------------------------------------------------------------------
// Decoding and NMS
// ---------------------------------------------------------------------------

/// Axis-aligned BEV extent of a (possibly rotated) footprint.
struct BevRect {
  double x0, y0, x1, y1;
};

inline BevRect bev_rect(const Box3D& b) {
  const double c = std::abs(std::cos(b.yaw)), s = std::abs(std::sin(b.yaw));
  const double ex = 0.5 * (c * b.l + s * b.w);
  const double ey = 0.5 * (s * b.l + c * b.w);
  return {b.x - ex, b.y - ey, b.x + ex, b.y + ey};
}

inline double bev_iou(const Box3D& a, const Box3D& b) {
  const BevRect ra = bev_rect(a), rb = bev_rect(b);
  const double iw = std::min(ra.x1, rb.x1) - std::max(ra.x0, rb.x0);
  const double ih = std::min(ra.y1, rb.y1) - std::max(ra.y0, rb.y0);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double ua = (ra.x1 - ra.x0) * (ra.y1 - ra.y0) + (rb.x1 - rb.x0) * (rb.y1 - rb.y0) - inter;
  return ua > 0.0 ? inter / ua : 0.0;
}

/// Total order used wherever boxes are ranked: score descending, then x, y
/// ascending.
inline bool score_order(const Box3D& a, const Box3D& b) {
  return std::tie(b.score, a.x, a.y, a.cls) < std::tie(a.score, b.x, b.y, b.cls);
}

/// Heatmap peaks (3x3 local maxima at or above `score_floor`) for frame `n`,
/// best first, at most `max_boxes`.
template <typename T>
std::vector<Box3D> decode_boxes(const DetectorOutput<T>& out, int n, const GridConfig& cfg,
                                double score_floor, int max_boxes) {
  const int classes = out.heatmap.dim(1), h = out.heatmap.dim(2), w = out.heatmap.dim(3);
  struct Peak {
    double score;
    int cls, row, col;
  };
  std::vector<Peak> peaks;
  for (int c = 0; c < classes; ++c) {
    for (int r = 0; r < h; ++r) {
      for (int q = 0; q < w; ++q) {
        const double v = out.heatmap.at(n, c, r, q);
        if (v < score_floor) continue;
        bool is_max = true;
        for (int dr = -1; dr <= 1 && is_max; ++dr) {
          for (int dq = -1; dq <= 1; ++dq) {
            const int rr = r + dr, qq = q + dq;
            if ((dr || dq) && rr >= 0 && rr < h && qq >= 0 && qq < w &&
                out.heatmap.at(n, c, rr, qq) > v) {
              is_max = false;
              break;
            }
          }
        }
        if (is_max) peaks.push_back({v, c, r, q});
      }
    }
  }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    return std::tie(b.score, a.cls, a.row, a.col) < std::tie(a.score, b.cls, b.row, b.col);
  });
  if (static_cast<int>(peaks.size()) > max_boxes) peaks.resize(static_cast<std::size_t>(std::max(0, max_boxes)));

  const double cell = cfg.out_cell();
  std::vector<Box3D> boxes;
  boxes.reserve(peaks.size());
  for (const auto& p : peaks) {
    auto reg = [&](int ch) { return static_cast<double>(out.regression.at(n, ch, p.row, p.col)); };
    Box3D b;
    b.x = cfg.x_min + (p.col + 0.5) * cell + reg(0);
    b.y = cfg.y_min + (p.row + 0.5) * cell + reg(1);
    b.z = reg(2);
    b.h = std::exp(std::clamp(reg(3), -5.0, 5.0));
    b.w = std::exp(std::clamp(reg(4), -5.0, 5.0));
    b.l = std::exp(std::clamp(reg(5), -5.0, 5.0));
    b.yaw = normalize_yaw(std::atan2(reg(6), reg(7)));
    b.cls = p.cls;
    b.score = p.score;
    boxes.push_back(b);
  }
  return boxes;
}

/// Greedy class-agnostic BEV NMS; a box is dropped when its IoU with an
/// already kept box reaches `iou_threshold`.
inline std::vector<Box3D> nms_bev(std::vector<Box3D> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(), score_order);
  std::vector<Box3D> kept;
  for (const auto& b : boxes) {
    bool keep = true;
    for (const auto& k : kept) {
      if (bev_iou(b, k) >= iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(b);
  }
  return kept;
}

}  // namespace lptq
