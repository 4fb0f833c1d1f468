// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "lptq/detector.hpp"
#include "lptq/error.hpp"

namespace lptq {

using Json = nlohmann::ordered_json;

/// Range buckets by BEV center distance from the sensor, in meters.
struct RangeBucket {
  std::string name;
  double lo, hi;
  bool contains(const Box3D& b) const {
    const double d = std::hypot(b.x, b.y);
    return d >= lo && d < hi;
  }
};

inline std::vector<RangeBucket> default_range_buckets() {
  return {{"0-10m", 0.0, 10.0},
          {"10-20m", 10.0, 20.0},
          {"20m-inf", 20.0, std::numeric_limits<double>::infinity()}};
}

struct ClassResult {
  double ap = 0.0;
  int gt = 0;
  int tp = 0;
  int fp = 0;
  int fn = 0;
};

/// AP over a set of scenes. Classes without ground truth are left out of
/// the mean; `mean_ap` is 0 when no class has ground truth.
struct ApResult {
  std::array<ClassResult, kNumClasses> classes{};
  double mean_ap = 0.0;
  int gt_total() const {
    int n = 0;
    for (const auto& c : classes) n += c.gt;
    return n;
  }
};

struct BucketResult {
  RangeBucket bucket;
  ApResult result;
};

struct EvalReport {
  double iou_threshold = 0.3;
  ApResult overall;
  std::vector<BucketResult> buckets;
};

/// 101-point interpolated AP from a precision/recall curve sampled at the
/// end of each group of equal scores.
inline double interpolated_ap(const std::vector<double>& recall, const std::vector<double>& precision) {
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    double best = 0.0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
      if (recall[i] >= r - 1e-12) best = std::max(best, precision[i]);
    }
    sum += best;
  }
  return sum / 101.0;
}

/// Greedy one-to-one matching per class: predictions in score order each
/// take the unmatched ground-truth box of the same scene with the highest
/// BEV IoU, provided it reaches `iou_threshold`.
inline ApResult average_precision(const std::vector<std::vector<Box3D>>& preds,
                                  const std::vector<std::vector<Box3D>>& gts, double iou_threshold) {
  if (preds.size() != gts.size()) {
    throw ShapeError("evaluate: " + std::to_string(preds.size()) + " prediction lists for " +
                     std::to_string(gts.size()) + " scenes");
  }
  ApResult out;
  int classes_with_gt = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    struct Det {
      Box3D box;
      std::size_t scene;
    };
    std::vector<Det> dets;
    std::vector<std::vector<int>> gt_idx(gts.size());
    int n_gt = 0;
    for (std::size_t s = 0; s < gts.size(); ++s) {
      for (std::size_t j = 0; j < gts[s].size(); ++j) {
        if (gts[s][j].cls == c) {
          gt_idx[s].push_back(static_cast<int>(j));
          ++n_gt;
        }
      }
      for (const auto& p : preds[s]) {
        if (p.cls == c) dets.push_back({p, s});
      }
    }
    std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
      if (a.box.score != b.box.score) return a.box.score > b.box.score;
      if (a.scene != b.scene) return a.scene < b.scene;
      return score_order(a.box, b.box);
    });
    std::vector<std::vector<char>> used(gts.size());
    for (std::size_t s = 0; s < gts.size(); ++s) used[s].assign(gt_idx[s].size(), 0);

    std::vector<double> recall, precision;
    int tp = 0, fp = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      const auto& d = dets[i];
      int best = -1;
      double best_iou = iou_threshold;
      for (std::size_t k = 0; k < gt_idx[d.scene].size(); ++k) {
        if (used[d.scene][k]) continue;
        const double iou = bev_iou(d.box, gts[d.scene][gt_idx[d.scene][k]]);
        if (iou >= best_iou && (best < 0 || iou > best_iou)) {
          best = static_cast<int>(k);
          best_iou = iou;
        }
      }
      if (best >= 0) {
        used[d.scene][best] = 1;
        ++tp;
      } else {
        ++fp;
      }
      const bool group_end = i + 1 == dets.size() || dets[i + 1].box.score != d.box.score;
      if (group_end && n_gt > 0) {
        recall.push_back(static_cast<double>(tp) / n_gt);
        precision.push_back(static_cast<double>(tp) / (tp + fp));
      }
    }
    auto& r = out.classes[c];
    r.gt = n_gt;
    r.tp = tp;
    r.fp = fp;
    r.fn = n_gt - tp;
    r.ap = n_gt > 0 ? interpolated_ap(recall, precision) : 0.0;
    if (n_gt > 0) {
      out.mean_ap += r.ap;
      ++classes_with_gt;
    }
  }
  if (classes_with_gt > 0) out.mean_ap /= classes_with_gt;
  return out;
}

/// Overall AP plus AP per range bucket. Buckets split both ground truth and
/// predictions by center distance, so a bucket scores only detections made
/// inside it.
inline EvalReport evaluate(const std::vector<std::vector<Box3D>>& preds,
                           const std::vector<std::vector<Box3D>>& gts, double iou_threshold,
                           const std::vector<RangeBucket>& buckets = default_range_buckets()) {
  EvalReport rep;
  rep.iou_threshold = iou_threshold;
  rep.overall = average_precision(preds, gts, iou_threshold);
  for (const auto& b : buckets) {
    std::vector<std::vector<Box3D>> p(preds.size()), g(gts.size());
    for (std::size_t s = 0; s < preds.size(); ++s) {
      for (const auto& x : preds[s]) {
        if (b.contains(x)) p[s].push_back(x);
      }
      for (const auto& x : gts[s]) {
        if (b.contains(x)) g[s].push_back(x);
      }
    }
    rep.buckets.push_back({b, average_precision(p, g, iou_threshold)});
  }
  return rep;
}

inline Json to_json(const ApResult& r) {
  Json j;
  j["mean_ap"] = r.mean_ap;
  Json per = Json::object();
  for (int c = 0; c < kNumClasses; ++c) {
    const auto& x = r.classes[c];
    per[class_name(c)] = {{"ap", x.ap}, {"gt", x.gt}, {"tp", x.tp}, {"fp", x.fp}, {"fn", x.fn}};
  }
  j["classes"] = per;
  return j;
}

inline Json to_json(const EvalReport& rep) {
  Json j;
  j["iou_threshold"] = rep.iou_threshold;
  j["overall"] = to_json(rep.overall);
  Json b = Json::array();
  for (const auto& x : rep.buckets) {
    Json e = to_json(x.result);
    e["bucket"] = x.bucket.name;
    b.push_back(e);
  }
  j["buckets"] = b;
  return j;
}

/// (reference - value) / reference, or 0 when the reference is 0.
inline double relative_drop(double reference, double value) {
  return reference > 0.0 ? (reference - value) / reference : 0.0;
}

struct RangeRow {
  std::string variant;
  EvalReport report;
  std::vector<double> bucket_drop;  // relative to the reference variant
  double overall_drop = 0.0;
};

/// Per-variant reports and their relative AP drops against the first
/// variant, which serves as the reference.
inline std::vector<RangeRow> range_ablation(const std::vector<std::pair<std::string, EvalReport>>& variants) {
  if (variants.size() < 2) throw ParamError("range_ablation needs at least 2 variants");
  const auto& ref = variants.front().second;
  std::vector<RangeRow> rows;
  for (const auto& [name, rep] : variants) {
    if (rep.buckets.size() != ref.buckets.size()) throw ShapeError("range_ablation: bucket mismatch");
    RangeRow row{name, rep, {}, relative_drop(ref.overall.mean_ap, rep.overall.mean_ap)};
    for (std::size_t b = 0; b < rep.buckets.size(); ++b) {
      row.bucket_drop.push_back(
          relative_drop(ref.buckets[b].result.mean_ap, rep.buckets[b].result.mean_ap));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Json to_json(const std::vector<RangeRow>& rows) {
  Json out = Json::array();
  for (const auto& r : rows) {
    Json j;
    j["variant"] = r.variant;
    j["mean_ap"] = r.report.overall.mean_ap;
    j["relative_drop"] = r.overall_drop;
    Json b = Json::array();
    for (std::size_t k = 0; k < r.report.buckets.size(); ++k) {
      b.push_back({{"bucket", r.report.buckets[k].bucket.name},
                   {"mean_ap", r.report.buckets[k].result.mean_ap},
                   {"relative_drop", r.bucket_drop[k]}});
    }
    j["buckets"] = b;
    out.push_back(j);
  }
  return out;
}

}  // namespace lptq
