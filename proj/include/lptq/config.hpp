// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lptq/error.hpp"
#include "lptq/pipeline.hpp"

namespace lptq {

/// Everything one CLI invocation needs. Every field is settable from a flat
/// `key = value` file or a command-line override.
struct ExperimentConfig {
  std::string data;                 // dataset directory
  std::string model;                // input model (PTQF)
  std::vector<std::string> models;  // compare: label=path or path entries
  CalibMethod method = CalibMethod::maxmin_grid;
  int n_train = 2000;
  int n_val = 200;
  std::uint64_t seed = 0;
  double eval_iou = 0.3;

  SceneSpec scene;
  GridConfig grid;
  TrainConfig train;
  PipelineConfig pipeline;
  DetectConfig detect;

  void validate() const {
    if (n_train < 1 || n_val < 1) throw ConfigError("n_train and n_val must be >= 1");
    if (!(eval_iou > 0.0) || eval_iou > 1.0) throw ConfigError("eval_iou must be in (0, 1]");
    try {
      scene.validate();
      grid.validate();
    } catch (const ParamError& e) {
      throw ConfigError(e.what());
    }
    pipeline.validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || p != end) throw ConfigError("bad value for '" + key + "': '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for '" + key + "': '" + v + "'");
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

inline std::map<std::string, Setter> config_registry() {
  std::map<std::string, Setter> r;
  auto real = [&](const std::string& k, auto get) {
    r[k] = [k, get](ExperimentConfig& c, const std::string& v) { get(c) = parse_number<double>(k, v); };
  };
  auto integer = [&](const std::string& k, auto get) {
    r[k] = [k, get](ExperimentConfig& c, const std::string& v) { get(c) = parse_number<int>(k, v); };
  };
  auto boolean = [&](const std::string& k, auto get) {
    r[k] = [k, get](ExperimentConfig& c, const std::string& v) { get(c) = parse_bool(k, v); };
  };
  auto text = [&](const std::string& k, auto get) {
    r[k] = [get](ExperimentConfig& c, const std::string& v) { get(c) = v; };
  };
  auto seed = [&](const std::string& k, auto get) {
    r[k] = [k, get](ExperimentConfig& c, const std::string& v) { get(c) = parse_number<std::uint64_t>(k, v); };
  };
  auto range = [&](const std::string& k, auto get) {
    real(k + "_min", [get](ExperimentConfig& c) -> double& { return get(c)[0]; });
    real(k + "_max", [get](ExperimentConfig& c) -> double& { return get(c)[1]; });
  };

  text("data", [](ExperimentConfig& c) -> std::string& { return c.data; });
  text("model", [](ExperimentConfig& c) -> std::string& { return c.model; });
  r["models"] = [](ExperimentConfig& c, const std::string& v) {
    c.models.clear();
    std::stringstream ss(v);
    for (std::string item; std::getline(ss, item, ',');) {
      item = trim(item);
      if (!item.empty()) c.models.push_back(item);
    }
  };
  r["method"] = [](ExperimentConfig& c, const std::string& v) { c.method = parse_calib_method(v); };
  integer("n_train", [](ExperimentConfig& c) -> int& { return c.n_train; });
  integer("n_val", [](ExperimentConfig& c) -> int& { return c.n_val; });
  seed("seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.seed; });
  real("eval_iou", [](ExperimentConfig& c) -> double& { return c.eval_iou; });

  // scene
  integer("scene.min_objects", [](ExperimentConfig& c) -> int& { return c.scene.min_objects; });
  integer("scene.max_objects", [](ExperimentConfig& c) -> int& { return c.scene.max_objects; });
  real("scene.vehicle_fraction", [](ExperimentConfig& c) -> double& { return c.scene.vehicle_fraction; });
  range("scene.vehicle_l", [](ExperimentConfig& c) -> double* { return c.scene.vehicle_l; });
  range("scene.vehicle_w", [](ExperimentConfig& c) -> double* { return c.scene.vehicle_w; });
  range("scene.vehicle_h", [](ExperimentConfig& c) -> double* { return c.scene.vehicle_h; });
  range("scene.ped_lw", [](ExperimentConfig& c) -> double* { return c.scene.ped_lw; });
  range("scene.ped_h", [](ExperimentConfig& c) -> double* { return c.scene.ped_h; });
  real("scene.surface_density", [](ExperimentConfig& c) -> double& { return c.scene.surface_density; });
  real("scene.falloff", [](ExperimentConfig& c) -> double& { return c.scene.falloff; });
  real("scene.ground_points", [](ExperimentConfig& c) -> double& { return c.scene.ground_points; });
  integer("scene.max_distractors", [](ExperimentConfig& c) -> int& { return c.scene.max_distractors; });
  real("scene.min_range", [](ExperimentConfig& c) -> double& { return c.scene.min_range; });
  real("scene.sensor_range", [](ExperimentConfig& c) -> double& { return c.scene.sensor_range; });
  real("scene.placement_half_extent",
       [](ExperimentConfig& c) -> double& { return c.scene.placement_half_extent; });
  real("scene.yaw_jitter", [](ExperimentConfig& c) -> double& { return c.scene.yaw_jitter; });

  // training
  integer("train.epochs", [](ExperimentConfig& c) -> int& { return c.train.epochs; });
  real("train.lr", [](ExperimentConfig& c) -> double& { return c.train.lr; });
  integer("train.batch", [](ExperimentConfig& c) -> int& { return c.train.batch; });
  real("train.ap_floor", [](ExperimentConfig& c) -> double& { return c.train.ap_floor; });
  real("train.alpha_reg", [](ExperimentConfig& c) -> double& { return c.train.alpha_reg; });
  integer("train.channels", [](ExperimentConfig& c) -> int& { return c.train.arch.channels; });
  integer("train.backbone_layers", [](ExperimentConfig& c) -> int& { return c.train.arch.backbone_layers; });
  integer("train.log_every", [](ExperimentConfig& c) -> int& { return c.train.log_every; });

  // detection
  real("detect.score_floor", [](ExperimentConfig& c) -> double& { return c.detect.score_floor; });
  integer("detect.max_boxes", [](ExperimentConfig& c) -> int& { return c.detect.max_boxes; });
  real("detect.nms_iou", [](ExperimentConfig& c) -> double& { return c.detect.nms_iou; });

  // quantization pipeline
  integer("bits_w", [](ExperimentConfig& c) -> int& { return c.pipeline.bits_w; });
  integer("bits_a", [](ExperimentConfig& c) -> int& { return c.pipeline.bits_a; });
  integer("calib_frames", [](ExperimentConfig& c) -> int& { return c.pipeline.calib_frames; });
  integer("iters_T", [](ExperimentConfig& c) -> int& { return c.pipeline.iters_T; });
  real("lr_scale", [](ExperimentConfig& c) -> double& { return c.pipeline.lr_scale; });
  real("lr_w_scale", [](ExperimentConfig& c) -> double& { return c.pipeline.lr_w_scale; });
  real("lr_theta", [](ExperimentConfig& c) -> double& { return c.pipeline.lr_theta; });
  integer("batch", [](ExperimentConfig& c) -> int& { return c.pipeline.batch; });
  r["granularity"] = [](ExperimentConfig& c, const std::string& v) {
    if (v == "layer") c.pipeline.granularity = Granularity::layer;
    else if (v == "block") c.pipeline.granularity = Granularity::block;
    else throw ConfigError("granularity must be 'layer' or 'block', got '" + v + "'");
  };
  integer("block_size", [](ExperimentConfig& c) -> int& { return c.pipeline.block_size; });
  real("alpha", [](ExperimentConfig& c) -> double& { return c.pipeline.loss.alpha_reg; });
  real("lambda1", [](ExperimentConfig& c) -> double& { return c.pipeline.loss.lambda1; });
  real("lambda2", [](ExperimentConfig& c) -> double& { return c.pipeline.loss.lambda2; });
  integer("search.T", [](ExperimentConfig& c) -> int& { return c.pipeline.search.T; });
  real("search.alpha", [](ExperimentConfig& c) -> double& { return c.pipeline.search.alpha; });
  real("search.beta", [](ExperimentConfig& c) -> double& { return c.pipeline.search.beta; });
  boolean("search.reciprocal_sweep",
          [](ExperimentConfig& c) -> bool& { return c.pipeline.search.reciprocal_sweep; });
  r["search.max_samples"] = [](ExperimentConfig& c, const std::string& v) {
    c.pipeline.search.max_samples = parse_number<std::size_t>("search.max_samples", v);
  };
  real("gamma", [](ExperimentConfig& c) -> double& { return c.pipeline.gamma; });
  integer("top_k", [](ExperimentConfig& c) -> int& { return c.pipeline.top_k; });
  real("nms_iou", [](ExperimentConfig& c) -> double& { return c.pipeline.nms_iou; });
  integer("eval_every", [](ExperimentConfig& c) -> int& { return c.pipeline.eval_every; });
  integer("eval_frames", [](ExperimentConfig& c) -> int& { return c.pipeline.eval_frames; });
  boolean("freeze_w_scale", [](ExperimentConfig& c) -> bool& { return c.pipeline.freeze_w_scale; });
  boolean("optimize_theta", [](ExperimentConfig& c) -> bool& { return c.pipeline.optimize_theta; });
  r["scale_grad"] = [](ExperimentConfig& c, const std::string& v) {
    if (v == "backprop") c.pipeline.scale_grad = ScaleGrad::backprop;
    else if (v == "finite_diff") c.pipeline.scale_grad = ScaleGrad::finite_diff;
    else throw ConfigError("scale_grad must be 'backprop' or 'finite_diff', got '" + v + "'");
  };
  text("ofp_cache", [](ExperimentConfig& c) -> std::string& { return c.pipeline.ofp_cache; });
  return r;
}

}  // namespace detail

/// Names of every accepted key, sorted.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::config_registry()) out.push_back(k);
  return out;
}

/// Apply one `key=value` assignment. Unknown keys and unparsable values
/// throw ConfigError.
inline void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  static const auto registry = detail::config_registry();
  const auto it = registry.find(key);
  if (it == registry.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, value);
}

inline void apply_assignment(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  apply_setting(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Parse config text: one `key = value` per line, `#` starts a comment.
inline void apply_config_text(ExperimentConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_assignment(cfg, line);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline void apply_config_file(ExperimentConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str());
}

}  // namespace lptq
