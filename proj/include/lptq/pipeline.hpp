// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <cstring>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "lptq/calib.hpp"
#include "lptq/detector.hpp"
#include "lptq/error.hpp"
#include "lptq/eval.hpp"
#include "lptq/nn/adam.hpp"
#include "lptq/nn/model_io.hpp"
#include "lptq/nn/network.hpp"
#include "lptq/random.hpp"
#include "lptq/scene.hpp"
#include "lptq/tgpl.hpp"

namespace lptq {

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct DetectConfig {
  double score_floor = 0.05;
  int max_boxes = 100;
  double nms_iou = 0.2;
};

/// Decoded, NMS-filtered detections for each cloud, in input order.
template <typename T>
std::vector<std::vector<Box3D>> detect(const nn::Network<T>& net, std::span<const PointCloud> clouds,
                                       const GridConfig& grid, const DetectConfig& dc, int batch = 8) {
  std::vector<std::vector<Box3D>> out;
  out.reserve(clouds.size());
  for (std::size_t i = 0; i < clouds.size(); i += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(clouds.size(), i + static_cast<std::size_t>(batch));
    std::vector<PillarGrid> grids;
    for (std::size_t k = i; k < end; ++k) grids.push_back(pillarize(clouds[k], grid));
    std::vector<const PillarGrid*> ptrs;
    for (const auto& g : grids) ptrs.push_back(&g);
    const auto o = detector_forward(net, batch_grids<T>(ptrs));
    for (std::size_t k = 0; k < grids.size(); ++k) {
      out.push_back(nms_bev(decode_boxes(o, static_cast<int>(k), grid, dc.score_floor, dc.max_boxes), dc.nms_iou));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full-precision training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 8;
  double lr = 2e-3;
  int batch = 4;
  std::uint64_t seed = 1;
  double ap_floor = 0.6;
  double alpha_reg = 0.25;
  double iou_threshold = 0.3;  // BEV IoU used for the held-out AP check
  DetectorArch arch;
  DetectConfig detect;
  int log_every = 100;  // 0 disables progress lines
};

struct TrainResult {
  nn::Network<float> net;
  double val_ap = 0.0;
  std::vector<double> step_losses;
};

namespace detail {

inline std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

}  // namespace detail

/// Train the detector against ground-truth targets with the same focal + L1
/// objective the quantizer uses. Throws if held-out AP stays below the floor.
inline TrainResult train_fp_baseline(std::span<const Frame> train, std::span<const Frame> val,
                                     const GridConfig& grid, const TrainConfig& cfg,
                                     std::ostream* progress = nullptr) {
  if (train.empty()) throw ParamError("train_fp_baseline: empty training set");
  if (cfg.batch < 1 || cfg.epochs < 1 || !(cfg.lr > 0)) throw ParamError("train_fp_baseline: bad schedule");
  TrainResult res;
  auto& net = res.net;
  net = make_detector<float>(cfg.arch, cfg.seed);
  const int ci = head_index(net, nn::LayerRole::head_cls);
  const int ri = head_index(net, nn::LayerRole::head_reg);
  std::vector<nn::ParamRef> wanted;
  for (int l = 0; l < static_cast<int>(net.layers.size()); ++l) {
    wanted.push_back({l, nn::ParamKind::weight});
    wanted.push_back({l, nn::ParamKind::bias});
  }
  std::map<nn::ParamRef, nn::AdamState> adam;
  LossWeights lw;
  lw.alpha_reg = cfg.alpha_reg;
  Rng rng(detail::mix_seed(cfg.seed, 0x7261696eu));
  const std::size_t steps_per_epoch = (train.size() + cfg.batch - 1) / cfg.batch;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(cfg.epochs);
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::shuffled(train.size(), rng);
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch), ++step) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch));
      std::vector<PillarGrid> grids;
      std::vector<PseudoLabels<float>> targets;
      for (std::size_t k = b; k < end; ++k) {
        grids.push_back(pillarize(train[order[k]].scene.points, grid));
        targets.push_back(render_targets<float>(train[order[k]].scene.boxes, grid));
      }
      std::vector<const PillarGrid*> gp;
      std::vector<const PseudoLabels<float>*> tp;
      for (std::size_t k = 0; k < grids.size(); ++k) {
        gp.push_back(&grids[k]);
        tp.push_back(&targets[k]);
      }
      const auto tr = nn::forward_traced(net, batch_grids<float>(gp), 0);
      Tensor<float> dl, dr;
      const auto terms = tgpl_loss<float>(tr.output(ci), tr.output(ri), tp, lw, &dl, &dr);
      if (!std::isfinite(terms.total)) {
        throw Error("train_fp_baseline: non-finite loss at step " + std::to_string(step));
      }
      res.step_losses.push_back(terms.total);
      const auto grads = nn::backward(net, tr, {{ci, dl}, {ri, dr}}, wanted);
      // cosine decay to 5% of the base rate
      const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
      const double lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
      for (const auto& ref : wanted) {
        auto& layer = net.layers[ref.layer];
        auto& param = ref.kind == nn::ParamKind::weight ? layer.weight : layer.bias;
        nn::adam_step<float, float>(param.data(), grads.tensor(ref.layer, ref.kind).data(), adam[ref], lr);
      }
      if (progress && cfg.log_every > 0 && step % static_cast<std::size_t>(cfg.log_every) == 0) {
        *progress << "train step " << step << "/" << total_steps << " loss " << terms.total
                  << " (cls " << terms.cls << ", reg " << terms.reg << ")\n";
      }
    }
  }
  if (!val.empty()) {
    std::vector<PointCloud> clouds;
    std::vector<std::vector<Box3D>> gts;
    for (const auto& f : val) {
      clouds.push_back(f.scene.points);
      gts.push_back(f.scene.boxes);
    }
    const auto preds = detect(net, std::span<const PointCloud>(clouds), grid, cfg.detect);
    res.val_ap = average_precision(preds, gts, cfg.iou_threshold).mean_ap;
    if (res.val_ap < cfg.ap_floor) {
      throw Error("FP training ended below the AP floor: val AP " + std::to_string(res.val_ap) +
                  " < " + std::to_string(cfg.ap_floor) + " after " + std::to_string(cfg.epochs) +
                  " epochs");
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Calibration data
// ---------------------------------------------------------------------------

/// `n` distinct indices drawn uniformly from [0, dataset_size), in an order
/// fixed by `seed`.
inline std::vector<std::size_t> sample_calibration_set(std::size_t dataset_size, std::size_t n,
                                                       std::uint64_t seed) {
  if (n > dataset_size) {
    throw ParamError("calibration set of " + std::to_string(n) + " frames requested from " +
                     std::to_string(dataset_size));
  }
  Rng rng(detail::mix_seed(seed, 0x63616c69u));
  std::vector<std::size_t> idx(dataset_size);
  for (std::size_t i = 0; i < dataset_size; ++i) idx[i] = i;
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.below(dataset_size - i)]);
  idx.resize(n);
  return idx;
}

/// Network inputs for calibration. Holds no labels by construction.
struct CalibrationSet {
  std::vector<int> frame_ids;
  std::vector<PillarGrid> inputs;

  std::size_t size() const { return inputs.size(); }

  template <typename T = float>
  Tensor<T> batch(std::span<const std::size_t> which) const {
    std::vector<const PillarGrid*> p;
    for (auto i : which) p.push_back(&inputs.at(i));
    return batch_grids<T>(p);
  }
};

inline CalibrationSet make_calibration_set(std::vector<int> ids, std::span<const PointCloud> clouds,
                                           const GridConfig& grid) {
  if (ids.size() != clouds.size()) throw ShapeError("make_calibration_set: ids/clouds mismatch");
  CalibrationSet cs;
  cs.frame_ids = std::move(ids);
  for (const auto& c : clouds) cs.inputs.push_back(pillarize(c, grid));
  return cs;
}

/// Full-precision input of each listed layer, one 1xCxHxW tensor per
/// calibration frame.
template <typename T>
std::map<int, std::vector<Tensor<T>>> record_layer_inputs(const nn::Network<T>& net,
                                                          const CalibrationSet& cs,
                                                          const std::vector<int>& layers,
                                                          int batch = 8) {
  std::map<int, std::vector<Tensor<T>>> out;
  for (int l : layers) out[l].reserve(cs.size());
  for (std::size_t i = 0; i < cs.size(); i += static_cast<std::size_t>(batch)) {
    std::vector<std::size_t> which;
    for (std::size_t k = i; k < std::min(cs.size(), i + static_cast<std::size_t>(batch)); ++k) which.push_back(k);
    const Tensor<T> x = cs.batch<T>(which);
    const auto outs = nn::forward_all(net, x);
    for (int l : layers) {
      const int p = net.producer_of(l);
      const Tensor<T>& src = p < 0 ? x : outs[p];
      for (int k = 0; k < src.dim(0); ++k) out[l].push_back(take(src, k));
    }
  }
  return out;
}

namespace detail {

template <typename T>
std::vector<T> pool(const std::vector<Tensor<T>>& parts) {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  std::vector<T> v;
  v.reserve(n);
  for (const auto& p : parts) v.insert(v.end(), p.vec().begin(), p.vec().end());
  return v;
}

template <typename T>
Tensor<T> stack_frames(const std::vector<Tensor<T>>& frames, std::span<const std::size_t> which) {
  std::vector<const Tensor<T>*> p;
  for (auto i : which) p.push_back(&frames.at(i));
  return stack<T>(p);
}

template <typename T>
std::vector<int> quantizable_layers(const nn::Network<T>& net) {
  std::vector<int> q;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (!net.layers[i].fp_exempt) q.push_back(static_cast<int>(i));
  }
  return q;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Baseline calibrators
// ---------------------------------------------------------------------------

inline constexpr int kFullPrecisionBits = 32;

template <typename T>
struct BaselineResult {
  nn::Network<T> net;
  std::vector<std::pair<std::string, LayerCalibration>> layers;
};

/// One calibrator applied to every non-exempt layer, using full-precision
/// activations, with no optimization. bits == 32 returns the model as is.
template <typename T>
BaselineResult<T> run_baseline_calibration(const nn::Network<T>& fp, const CalibrationSet& cs,
                                           CalibMethod method, int bits,
                                           const SearchConfig& search = {}) {
  BaselineResult<T> res{fp.as_fp(), {}};
  if (bits == kFullPrecisionBits) return res;
  if (cs.size() == 0) throw ParamError("run_baseline_calibration: empty calibration set");
  const auto layers = detail::quantizable_layers(fp);
  const auto inputs = record_layer_inputs(fp, cs, layers);
  for (int l : layers) {
    auto& layer = res.net.layers[l];
    const auto& acts = inputs.at(l);
    const auto lc = calibrate_layer<T>(std::span<const Tensor<T>>(acts), layer.weight, method, bits, search);
    layer.w_quant = lc.w;
    layer.a_quant = lc.a;
    layer.theta.reset();
    layer.precision = nn::Precision::int8;
    res.layers.emplace_back(layer.name, lc);
  }
  return res;
}

// ---------------------------------------------------------------------------
// LiDAR-PTQ
// ---------------------------------------------------------------------------

enum class Granularity { layer, block };
enum class ScaleGrad { backprop, finite_diff };

struct PipelineConfig {
  int bits_w = 8;
  int bits_a = 8;
  int calib_frames = 256;
  int iters_T = 200;
  double lr_scale = 5e-5;    // activation scales
  double lr_w_scale = 1e-6;  // weight scales
  double lr_theta = 5e-3;    // in units of the layer's initial weight scale
  int batch = 4;
  Granularity granularity = Granularity::block;
  int block_size = 2;
  LossWeights loss;
  SearchConfig search;
  std::uint64_t seed = 0;
  double gamma = 0.1;
  int top_k = 500;
  double nms_iou = 0.2;
  int eval_every = 10;
  int eval_frames = 16;
  bool freeze_w_scale = false;
  bool optimize_theta = true;
  ScaleGrad scale_grad = ScaleGrad::backprop;
  std::string ofp_cache;  // file caching the FP outputs; empty keeps them in memory

  void validate() const {
    if (bits_w < 2 || bits_w > 16 || bits_a < 2 || bits_a > 16) throw ConfigError("bits must be in [2, 16]");
    if (batch < 1 || calib_frames < batch) throw ConfigError("need calib_frames >= batch >= 1");
    if (iters_T < 0) throw ConfigError("iters_T must be >= 0");
    if (block_size < 1) throw ConfigError("block_size must be >= 1");
    if (eval_every < 1 || eval_frames < 1) throw ConfigError("eval_every and eval_frames must be >= 1");
    if (!(lr_scale >= 0) || !(lr_w_scale >= 0) || !(lr_theta >= 0)) throw ConfigError("learning rates must be >= 0");
    if (top_k < 1 || gamma < 0 || gamma > 1) throw ConfigError("need top_k >= 1 and gamma in [0, 1]");
    loss.validate();
    search.validate();
  }
};

struct IterRecord {
  int iteration = 0;
  std::string unit;
  double local = 0.0;
  double tgpl = 0.0;
  double total = 0.0;
};

struct LayerReport {
  std::string name;
  std::string unit;
  double mse_init = 0.0;   // local reconstruction loss on the held-out calibration frames
  double mse_final = 0.0;
  QuantParams w;
  QuantParams a;
  int best_iteration = 0;  // 0 means the initialization was kept
  bool has_theta = false;
};

struct RunLog {
  std::vector<IterRecord> iterations;
  std::vector<LayerReport> layers;
  double wall_seconds = 0.0;

  void write_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write run log '" + path + "'");
    out << "iteration,layer,local,tgpl,total\n";
    char buf[256];
    for (const auto& r : iterations) {
      std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g,%.9g\n", r.iteration, r.unit.c_str(), r.local,
                    r.tgpl, r.total);
      out << buf;
    }
  }

  /// Deterministic content only; wall time is left out.
  Json to_json() const {
    Json layers_j = Json::array();
    for (const auto& l : layers) {
      layers_j.push_back({{"layer", l.name},
                          {"unit", l.unit},
                          {"w_scale", l.w.scale},
                          {"w_zero_point", l.w.zero_point},
                          {"a_scale", l.a.scale},
                          {"a_zero_point", l.a.zero_point},
                          {"mse_init", l.mse_init},
                          {"mse_final", l.mse_final},
                          {"best_iteration", l.best_iteration},
                          {"theta", l.has_theta}});
    }
    return {{"iterations_logged", iterations.size()}, {"layers", layers_j}};
  }
};

namespace detail {

template <typename T>
struct FpOutputs {
  std::vector<Tensor<T>> heatmap;     // per frame, 1 x classes x H x W (post-sigmoid)
  std::vector<Tensor<T>> regression;  // per frame, 1 x 8 x H x W
};

inline constexpr char kOfpMagic[4] = {'O', 'F', 'P', '1'};

template <typename T>
void save_fp_outputs(const FpOutputs<T>& o, const std::vector<int>& ids, const std::string& path) {
  nn::io::ByteWriter w;
  w.bytes(kOfpMagic, 4);
  w.u32(static_cast<std::uint32_t>(ids.size()));
  for (int id : ids) w.i32(id);
  for (std::size_t f = 0; f < ids.size(); ++f) {
    for (const auto* t : {&o.heatmap[f], &o.regression[f]}) {
      for (int d : t->shape()) w.u32(static_cast<std::uint32_t>(d));
      for (T v : t->vec()) w.f32(static_cast<float>(v));
    }
  }
  nn::io::write_file(path, w.buffer());
}

template <typename T>
bool load_fp_outputs(FpOutputs<T>& o, const std::vector<int>& ids, const std::string& path) {
  if (!std::filesystem::exists(path)) return false;
  const auto bytes = nn::io::read_file(path);
  nn::io::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kOfpMagic, 4) != 0) return false;
  if (r.u32() != ids.size()) return false;
  for (int id : ids) {
    if (r.i32() != id) return false;
  }
  o = {};
  for (std::size_t f = 0; f < ids.size(); ++f) {
    for (auto* dst : {&o.heatmap, &o.regression}) {
      std::vector<int> shape(4);
      for (auto& d : shape) d = static_cast<int>(r.u32());
      Tensor<T> t(shape);
      for (auto& v : t.vec()) v = static_cast<T>(r.f32());
      dst->push_back(std::move(t));
    }
  }
  if (!r.done()) throw FormatError("FP output cache '" + path + "': trailing bytes");
  return true;
}

template <typename T>
FpOutputs<T> compute_fp_outputs(const nn::Network<T>& fp, const CalibrationSet& cs, int batch = 8) {
  FpOutputs<T> o;
  for (std::size_t i = 0; i < cs.size(); i += static_cast<std::size_t>(batch)) {
    std::vector<std::size_t> which;
    for (std::size_t k = i; k < std::min(cs.size(), i + static_cast<std::size_t>(batch)); ++k) which.push_back(k);
    const auto out = detector_forward(fp, cs.batch<T>(which));
    for (int k = 0; k < out.heatmap.dim(0); ++k) {
      o.heatmap.push_back(take(out.heatmap, k));
      o.regression.push_back(take(out.regression, k));
    }
  }
  return o;
}

struct LayerState {
  std::optional<QuantParams> w, a;
  std::optional<Tensor<float>> theta;
};

}  // namespace detail

/// Quantization units in order: consecutive non-exempt backbone layers are
/// grouped `block_size` at a time under block granularity; every other
/// non-exempt layer is its own unit.
template <typename T>
std::vector<std::vector<int>> quantization_units(const nn::Network<T>& net, Granularity g, int block_size) {
  std::vector<std::vector<int>> units;
  for (int l : detail::quantizable_layers(net)) {
    const bool backbone = net.layers[l].role == nn::LayerRole::backbone;
    if (g == Granularity::block && backbone && !units.empty()) {
      auto& last = units.back();
      const int prev = last.back();
      if (static_cast<int>(last.size()) < block_size && net.layers[prev].role == nn::LayerRole::backbone &&
          net.producer_of(l) == prev) {
        last.push_back(l);
        continue;
      }
    }
    units.push_back({l});
  }
  return units;
}

/// LiDAR-PTQ. Weight scales are grid-searched for every non-exempt layer,
/// the FP outputs over the calibration set become pseudo-labels, then each
/// unit in turn gets grid-searched activation scales followed by `iters_T`
/// Adam steps on lambda1 * L_local + lambda2 * L_tgpl over its scales and
/// rounding offsets. The unit's inputs and the layers after it stay full
/// precision while it is optimized, and it is frozen afterwards. Every
/// `eval_every` steps the objective is measured on a fixed held-out slice
/// of the calibration set; an iterate is kept only if it lowers that
/// objective without raising any layer's local loss above its initial value.
template <typename T>
std::pair<nn::Network<T>, RunLog> run_lidar_ptq(const nn::Network<T>& fp, const CalibrationSet& cs,
                                                const PipelineConfig& cfg, const GridConfig& grid,
                                                std::ostream* progress = nullptr) {
  const auto t_start = std::chrono::steady_clock::now();
  cfg.validate();
  fp.validate();
  if (static_cast<int>(cs.size()) < cfg.batch) {
    throw ParamError("calibration set has " + std::to_string(cs.size()) + " frames, batch is " +
                     std::to_string(cfg.batch));
  }
  for (const auto& l : fp.layers) {
    if (l.quantized()) throw ParamError("run_lidar_ptq: layer '" + l.name + "' is not full precision");
  }
  const int first = 0;
  if (!fp.layers[first].fp_exempt) {
    throw ParamError("first layer '" + fp.layers[first].name + "' must be flagged FP-exempt");
  }
  for (const auto& l : fp.layers) {
    if (l.role != nn::LayerRole::backbone && !l.fp_exempt) {
      throw ParamError("output layer '" + l.name + "' must be flagged FP-exempt");
    }
  }
  const int ci = head_index(fp, nn::LayerRole::head_cls);
  const int ri = head_index(fp, nn::LayerRole::head_reg);
  const auto units = quantization_units(fp, cfg.granularity, cfg.block_size);
  if (units.empty()) throw ParamError("run_lidar_ptq: no quantizable layers");

  nn::Network<T> q = fp;
  RunLog log;

  // weight scales for every quantizable layer
  for (const auto& u : units) {
    for (int l : u) {
      q.layers[l].w_quant = grid_search_scale<T>(q.layers[l].weight.data(), cfg.bits_w, cfg.search).params;
    }
  }

  // FP outputs and pseudo-labels
  detail::FpOutputs<T> ofp;
  if (cfg.ofp_cache.empty() || !detail::load_fp_outputs(ofp, cs.frame_ids, cfg.ofp_cache)) {
    ofp = detail::compute_fp_outputs(fp, cs);
    if (!cfg.ofp_cache.empty()) detail::save_fp_outputs(ofp, cs.frame_ids, cfg.ofp_cache);
  }
  std::vector<PseudoLabels<T>> labels;
  labels.reserve(cs.size());
  for (std::size_t f = 0; f < cs.size(); ++f) {
    labels.push_back(make_pseudo_labels(DetectorOutput<T>{ofp.heatmap[f], ofp.regression[f]}, 0,
                                        cfg.gamma, cfg.top_k, cfg.nms_iou, grid));
  }
  ofp = {};

  const std::size_t n_eval = std::min<std::size_t>(static_cast<std::size_t>(cfg.eval_frames), cs.size());
  std::vector<std::size_t> eval_idx(n_eval);
  for (std::size_t i = 0; i < n_eval; ++i) eval_idx[i] = i;
  Rng rng(detail::mix_seed(cfg.seed, 0x70747121u));

  for (const auto& unit : units) {
    std::string unit_name;
    for (int l : unit) unit_name += (unit_name.empty() ? "" : "+") + q.layers[l].name;
    const int start = unit.front();
    if (q.layers[start].role != nn::LayerRole::backbone && unit.size() > 1) {
      throw Error("unit '" + unit_name + "' mixes heads into a block");
    }

    const auto inputs = record_layer_inputs(fp, cs, unit);
    std::vector<T> s_w0(unit.size());
    for (std::size_t k = 0; k < unit.size(); ++k) {
      auto& layer = q.layers[unit[k]];
      const auto pooled = detail::pool(inputs.at(unit[k]));
      layer.a_quant = grid_search_scale<T>(std::span<const T>(pooled), cfg.bits_a, cfg.search).params;
      layer.precision = nn::Precision::int8;
      if (cfg.iters_T > 0 && cfg.optimize_theta) {
        layer.theta = RoundingOffsets<T>{Tensor<T>(layer.weight.shape())};
      }
      s_w0[k] = static_cast<T>(layer.w_quant->scale);
    }

    struct Measure {
      std::vector<double> local;
      double local_sum = 0.0;
      TgplTerms tgpl;
      double total = 0.0;
    };
    auto local_terms = [&](std::span<const std::size_t> which, Measure& m,
                           std::vector<Tensor<T>>* d_qweight) {
      m.local.assign(unit.size(), 0.0);
      m.local_sum = 0.0;
      if (d_qweight) d_qweight->assign(unit.size(), Tensor<T>{});
      for (std::size_t k = 0; k < unit.size(); ++k) {
        const auto& layer = q.layers[unit[k]];
        const Tensor<T> I = detail::stack_frames(inputs.at(unit[k]), which);
        m.local[k] = local_recon_loss(layer.weight, layer.effective_weight(), I, layer.stride,
                                      layer.padding, d_qweight ? &(*d_qweight)[k] : nullptr);
        m.local_sum += m.local[k];
      }
    };
    auto label_ptrs = [&](std::span<const std::size_t> which) {
      std::vector<const PseudoLabels<T>*> p;
      for (auto i : which) p.push_back(&labels[i]);
      return p;
    };
    auto measure = [&](std::span<const std::size_t> which) {
      Measure m;
      local_terms(which, m, nullptr);
      const auto tr = nn::forward_traced(q, detail::stack_frames(inputs.at(start), which), start);
      const auto lp = label_ptrs(which);
      m.tgpl = tgpl_loss<T>(tr.output(ci), tr.output(ri), lp, cfg.loss);
      m.total = total_loss(m.local_sum, m.tgpl.total, cfg.loss);
      return m;
    };
    auto snapshot = [&] {
      std::vector<detail::LayerState> s;
      for (int l : unit) {
        const auto& layer = q.layers[l];
        s.push_back({layer.w_quant, layer.a_quant,
                     layer.theta ? std::optional<Tensor<float>>(layer.theta->theta.template cast<float>())
                                 : std::nullopt});
      }
      return s;
    };
    auto restore = [&](const std::vector<detail::LayerState>& s) {
      for (std::size_t k = 0; k < unit.size(); ++k) {
        auto& layer = q.layers[unit[k]];
        layer.w_quant = s[k].w;
        layer.a_quant = s[k].a;
        if (s[k].theta) layer.theta = RoundingOffsets<T>{s[k].theta->template cast<T>()};
      }
    };

    const Measure initial = measure(eval_idx);
    Measure best = initial;
    auto best_state = snapshot();
    int best_iter = 0;

    std::vector<nn::AdamState> adam_sw(unit.size()), adam_sa(unit.size()), adam_th(unit.size());
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    for (int t = 1; t <= cfg.iters_T; ++t) {
      std::vector<std::size_t> which;
      while (static_cast<int>(which.size()) < cfg.batch) {
        if (cursor == order.size()) {
          order = detail::shuffled(cs.size(), rng);
          cursor = 0;
        }
        which.push_back(order[cursor++]);
      }
      const auto tr = nn::forward_traced(q, detail::stack_frames(inputs.at(start), which), start);
      Tensor<T> dl, dr;
      const auto lp = label_ptrs(which);
      Measure m;
      m.tgpl = tgpl_loss<T>(tr.output(ci), tr.output(ri), lp, cfg.loss, &dl, &dr);
      std::vector<Tensor<T>> d_qw;
      local_terms(which, m, &d_qw);
      m.total = total_loss(m.local_sum, m.tgpl.total, cfg.loss);
      if (!std::isfinite(m.total)) {
        throw Error("non-finite loss in unit '" + unit_name + "' at iteration " + std::to_string(t) +
                    " (local " + std::to_string(m.local_sum) + ", tgpl " + std::to_string(m.tgpl.total) + ")");
      }
      log.iterations.push_back({t, unit_name, m.local_sum, m.tgpl.total, m.total});

      std::vector<double> g_sw(unit.size(), 0.0), g_sa(unit.size(), 0.0);
      std::vector<Tensor<T>> g_th(unit.size());
      for (std::size_t k = 0; k < unit.size(); ++k) {
        const auto& layer = q.layers[unit[k]];
        if (layer.theta) g_th[k] = Tensor<T>(layer.weight.shape());
      }
      if (cfg.loss.lambda2 > 0) {
        std::vector<nn::ParamRef> wanted;
        for (std::size_t k = 0; k < unit.size(); ++k) {
          wanted.push_back({unit[k], nn::ParamKind::a_scale});
          if (!cfg.freeze_w_scale) wanted.push_back({unit[k], nn::ParamKind::w_scale});
          if (q.layers[unit[k]].theta) wanted.push_back({unit[k], nn::ParamKind::theta});
        }
        for (auto& v : dl.vec()) v *= static_cast<T>(cfg.loss.lambda2);
        for (auto& v : dr.vec()) v *= static_cast<T>(cfg.loss.lambda2);
        const auto grads = nn::backward(q, tr, {{ci, dl}, {ri, dr}}, wanted);
        for (std::size_t k = 0; k < unit.size(); ++k) {
          g_sa[k] += grads.scalar(unit[k], nn::ParamKind::a_scale);
          if (!cfg.freeze_w_scale) g_sw[k] += grads.scalar(unit[k], nn::ParamKind::w_scale);
          if (q.layers[unit[k]].theta) {
            const auto& gt = grads.tensor(unit[k], nn::ParamKind::theta);
            for (std::size_t i = 0; i < gt.size(); ++i) g_th[k][i] += gt[i];
          }
        }
      }
      if (cfg.loss.lambda1 > 0) {
        for (std::size_t k = 0; k < unit.size(); ++k) {
          const auto& layer = q.layers[unit[k]];
          const auto* th = layer.theta ? &*layer.theta : nullptr;
          const auto fg = fake_quant_backward(layer.weight, *layer.w_quant, th, d_qw[k]);
          g_sw[k] += cfg.loss.lambda1 * fg.dscale;
          if (th) {
            for (std::size_t i = 0; i < fg.dtheta.size(); ++i) {
              g_th[k][i] += static_cast<T>(cfg.loss.lambda1) * fg.dtheta[i];
            }
          }
        }
      }
      if (cfg.scale_grad == ScaleGrad::finite_diff) {
        // central differences of the minibatch objective
        auto objective = [&] {
          Measure f;
          local_terms(which, f, nullptr);
          const auto ftr = nn::forward_traced(q, detail::stack_frames(inputs.at(start), which), start);
          f.tgpl = tgpl_loss<T>(ftr.output(ci), ftr.output(ri), lp, cfg.loss);
          return total_loss(f.local_sum, f.tgpl.total, cfg.loss);
        };
        for (std::size_t k = 0; k < unit.size(); ++k) {
          for (int which_scale = 0; which_scale < 2; ++which_scale) {
            if (which_scale == 0 && cfg.freeze_w_scale) continue;
            auto& qp = which_scale == 0 ? *q.layers[unit[k]].w_quant : *q.layers[unit[k]].a_quant;
            const double s0 = qp.scale, h = 1e-3 * s0;
            qp.scale = s0 + h;
            const double up = objective();
            qp.scale = s0 - h;
            const double down = objective();
            qp.scale = s0;
            (which_scale == 0 ? g_sw : g_sa)[k] = (up - down) / (2 * h);
          }
        }
      }

      for (std::size_t k = 0; k < unit.size(); ++k) {
        auto& layer = q.layers[unit[k]];
        auto step_scale = [](QuantParams& qp, double g, nn::AdamState& st, double lr) {
          double s = qp.scale;
          const double gg = g;
          nn::adam_step<double, double>(std::span<double>(&s, 1), std::span<const double>(&gg, 1), st, lr);
          qp.scale = std::max(s, kDegenerateScale);
        };
        step_scale(*layer.a_quant, g_sa[k], adam_sa[k], cfg.lr_scale);
        if (!cfg.freeze_w_scale) step_scale(*layer.w_quant, g_sw[k], adam_sw[k], cfg.lr_w_scale);
        if (layer.theta) {
          nn::adam_step<T, T>(layer.theta->theta.data(), std::span<const T>(g_th[k].vec()), adam_th[k],
                              cfg.lr_theta * static_cast<double>(s_w0[k]));
        }
      }

      if (t % cfg.eval_every == 0 || t == cfg.iters_T) {
        const Measure e = measure(eval_idx);
        bool local_ok = true;
        for (std::size_t k = 0; k < unit.size(); ++k) local_ok = local_ok && e.local[k] <= initial.local[k];
        if (e.total < best.total && local_ok) {
          best = e;
          best_state = snapshot();
          best_iter = t;
        }
        if (progress) {
          *progress << unit_name << " iter " << t << " eval total " << e.total << " (best "
                    << best.total << " @" << best_iter << ")\n";
        }
      }
    }
    restore(best_state);
    for (std::size_t k = 0; k < unit.size(); ++k) {
      const auto& layer = q.layers[unit[k]];
      log.layers.push_back({layer.name, unit_name, initial.local[k], best.local[k], *layer.w_quant,
                            *layer.a_quant, best_iter, layer.theta.has_value()});
    }
  }
  q.validate();
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return {std::move(q), std::move(log)};
}

}  // namespace lptq
