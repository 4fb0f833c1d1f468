// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0
//
// lptq: command-line front end.
//
//   lptq <verb> [--config FILE] [--out DIR] [--seed N] [--force] [key=value ...]
//
// Exit status: 0 success, 2 configuration error, 3 runtime error. Errors go
// to stderr as "lptq: E_CONFIG: ..." or "lptq: E_RUNTIME: ...".

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lptq/lptq.hpp"

namespace fs = std::filesystem;
using namespace lptq;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Invocation {
  std::string verb;
  std::string config_path;
  std::string out;
  std::vector<std::string> overrides;
  bool force = false;
  bool has_seed = false;
  std::uint64_t seed = 0;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

/// Refuses to reuse a non-empty directory unless forced.
void prepare_out_dir(const Invocation& inv) {
  if (inv.out.empty()) throw ConfigError("--out is required for '" + inv.verb + "'");
  const fs::path p(inv.out);
  if (fs::exists(p)) {
    if (!fs::is_directory(p)) throw ConfigError("--out '" + inv.out + "' is not a directory");
    if (!fs::is_empty(p) && !inv.force) {
      throw ConfigError("output directory '" + inv.out + "' is not empty (use --force to overwrite)");
    }
  }
  fs::create_directories(p);
}

void require(const std::string& value, const char* key) {
  if (value.empty()) throw ConfigError(std::string("config key '") + key + "' is required");
}

nn::Network<float> load_model(const std::string& path, AccessLog& log) {
  if (!fs::exists(path)) throw ConfigError("model file not found: '" + path + "'");
  log.record("model", path);
  return nn::load_ptqf<float>(path);
}

struct Split {
  std::vector<ManifestEntry> entries;
  std::vector<PointCloud> clouds;
  std::vector<std::vector<Box3D>> boxes;
};

Split load_split(const DatasetReader& reader, const std::string& name, bool with_labels) {
  Split s;
  s.entries = reader.split(name);
  if (s.entries.empty()) throw Error("dataset has no '" + name + "' frames");
  for (const auto& e : s.entries) {
    s.clouds.push_back(reader.points(e));
    if (with_labels) s.boxes.push_back(reader.labels(e));
  }
  return s;
}

std::vector<Frame> to_frames(const Split& s) {
  std::vector<Frame> out;
  for (std::size_t i = 0; i < s.entries.size(); ++i) {
    out.push_back({s.entries[i].id, s.entries[i].split, {s.clouds[i], s.boxes[i]}});
  }
  return out;
}

/// Points only: calibration never sees labels.
CalibrationSet load_calibration_set(const DatasetReader& reader, const ExperimentConfig& cfg) {
  const auto train = reader.split("train");
  const auto picks = sample_calibration_set(train.size(), static_cast<std::size_t>(cfg.pipeline.calib_frames),
                                            cfg.seed);
  std::vector<int> ids;
  std::vector<PointCloud> clouds;
  for (auto i : picks) {
    ids.push_back(train[i].id);
    clouds.push_back(reader.points(train[i]));
  }
  return make_calibration_set(std::move(ids), clouds, cfg.grid);
}

Json quant_json(const QuantParams& p) {
  return {{"scale", p.scale}, {"zero_point", p.zero_point}, {"bits", p.bits}};
}

Json config_json(const ExperimentConfig& cfg) {
  return {{"seed", cfg.seed},
          {"method", to_string(cfg.method)},
          {"bits_w", cfg.pipeline.bits_w},
          {"bits_a", cfg.pipeline.bits_a},
          {"calib_frames", cfg.pipeline.calib_frames},
          {"iters_T", cfg.pipeline.iters_T},
          {"eval_iou", cfg.eval_iou}};
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Invocation& inv, const ExperimentConfig& cfg) {
  prepare_out_dir(inv);
  const auto frames = generate_dataset(cfg.scene, cfg.n_train, cfg.n_val, cfg.seed);
  write_dataset(frames, inv.out);
  double occ = 0.0;
  std::size_t boxes = 0;
  for (const auto& f : frames) {
    occ += pillarize(f.scene.points, cfg.grid).occupancy_fraction();
    boxes += f.scene.boxes.size();
  }
  write_json(fs::path(inv.out) / "summary.json",
             {{"frames", frames.size()},
              {"train", cfg.n_train},
              {"val", cfg.n_val},
              {"boxes", boxes},
              {"mean_occupancy", occ / static_cast<double>(frames.size())},
              {"seed", cfg.seed}});
  std::printf("wrote %zu frames to %s\n", frames.size(), inv.out.c_str());
  return 0;
}

int cmd_train_fp(const Invocation& inv, const ExperimentConfig& cfg) {
  require(cfg.data, "data");
  AccessLog log;
  DatasetReader reader(cfg.data, log);
  prepare_out_dir(inv);
  const auto train = to_frames(load_split(reader, "train", true));
  const auto val = to_frames(load_split(reader, "val", true));
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  tc.iou_threshold = cfg.eval_iou;
  tc.detect = cfg.detect;
  const auto res = train_fp_baseline(train, val, cfg.grid, tc, &std::cerr);
  const fs::path out(inv.out);
  nn::save_ptqf(res.net, (out / "model.ptqf").string());
  std::ofstream losses(out / "train_log.csv", std::ios::trunc);
  losses << "step,loss\n";
  for (std::size_t i = 0; i < res.step_losses.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, res.step_losses[i]);
    losses << buf;
  }
  write_json(out / "summary.json", {{"val_ap", res.val_ap}, {"epochs", tc.epochs}, {"seed", cfg.seed}});
  log.write((out / "file_access.txt").string());
  std::printf("FP model: val AP %.4f\n", res.val_ap);
  return 0;
}

/// Shared by calibrate and quantize. With maxmin_grid the LiDAR-PTQ pipeline
/// runs for cfg.pipeline.iters_T iterations (0 for calibrate).
struct QuantRun {
  nn::Network<float> net;
  Json layers = Json::array();
  std::string report;
  RunLog log;
  bool pipeline = false;
};

QuantRun run_quantization(const nn::Network<float>& fp, const CalibrationSet& cs, const ExperimentConfig& cfg,
                          int iters_T, const fs::path& out) {
  QuantRun q;
  char line[256];
  if (cfg.method == CalibMethod::maxmin_grid) {
    PipelineConfig pc = cfg.pipeline;
    pc.iters_T = iters_T;
    pc.seed = cfg.seed;
    const fs::path cache = out / "ofp_cache.bin";
    fs::remove(cache);
    if (pc.ofp_cache.empty()) pc.ofp_cache = cache.string();
    auto [net, log] = run_lidar_ptq(fp, cs, pc, cfg.grid, &std::cerr);
    fs::remove(cache);
    q.net = std::move(net);
    q.log = std::move(log);
    q.pipeline = true;
    for (const auto& l : q.log.layers) {
      q.layers.push_back({{"layer", l.name},
                          {"w", quant_json(l.w)},
                          {"a", quant_json(l.a)},
                          {"mse_init", l.mse_init},
                          {"mse_final", l.mse_final},
                          {"best_iteration", l.best_iteration}});
      std::snprintf(line, sizeof line, "%s %s w_scale=%.9g a_scale=%.9g pre_mse=%.9g post_mse=%.9g\n",
                    l.name.c_str(), to_string(cfg.method).c_str(), l.w.scale, l.a.scale, l.mse_init,
                    l.mse_final);
      q.report += line;
    }
  } else {
    if (cfg.pipeline.bits_w != cfg.pipeline.bits_a) {
      throw ConfigError("method '" + to_string(cfg.method) + "' needs bits_w == bits_a");
    }
    auto res = run_baseline_calibration(fp, cs, cfg.method, cfg.pipeline.bits_a, cfg.pipeline.search);
    q.net = std::move(res.net);
    for (const auto& [name, lc] : res.layers) {
      q.layers.push_back({{"layer", name},
                          {"w", quant_json(lc.w)},
                          {"a", quant_json(lc.a)},
                          {"a_sse_maxmin", lc.a_sse_maxmin},
                          {"a_sse", lc.a_sse}});
      std::snprintf(line, sizeof line, "%s %s w_scale=%.9g a_scale=%.9g pre_sse=%.9g post_sse=%.9g\n",
                    name.c_str(), to_string(cfg.method).c_str(), lc.w.scale, lc.a.scale, lc.a_sse_maxmin,
                    lc.a_sse);
      q.report += line;
    }
  }
  return q;
}

int cmd_quantize(const Invocation& inv, const ExperimentConfig& cfg, bool calibrate_only) {
  require(cfg.data, "data");
  require(cfg.model, "model");
  AccessLog log;
  const auto fp = load_model(cfg.model, log);
  DatasetReader reader(cfg.data, log);
  prepare_out_dir(inv);
  const fs::path out(inv.out);
  const auto cs = load_calibration_set(reader, cfg);
  const auto q = run_quantization(fp, cs, cfg, calibrate_only ? 0 : cfg.pipeline.iters_T, out);

  nn::save_ptqf(q.net, (out / "model.ptqf").string());
  write_text(out / "calibration_report.txt", q.report);
  Json summary = config_json(cfg);
  summary["verb"] = inv.verb;
  Json frames = Json::array();
  for (int id : cs.frame_ids) frames.push_back(id);
  summary["calibration_frames"] = frames;
  summary["layers"] = q.layers;
  if (!calibrate_only) {
    q.log.write_csv((out / "run_log.csv").string());
    if (q.pipeline) summary["run"] = q.log.to_json();
  }
  write_json(out / "summary.json", summary);
  log.write((out / "file_access.txt").string());
  std::printf("%s: %zu layers -> %s\n", inv.verb.c_str(), q.layers.size(), (out / "model.ptqf").c_str());
  return 0;
}

struct NamedModel {
  std::string label;
  std::string path;
};

std::vector<NamedModel> model_list(const ExperimentConfig& cfg) {
  if (cfg.models.size() < 1) throw ConfigError("config key 'models' is required");
  std::vector<NamedModel> out;
  for (const auto& m : cfg.models) {
    const auto eq = m.find('=');
    if (eq == std::string::npos) {
      out.push_back({fs::path(m).parent_path().filename().string(), m});
    } else {
      out.push_back({m.substr(0, eq), m.substr(eq + 1)});
    }
    if (out.back().label.empty()) out.back().label = out.back().path;
  }
  return out;
}

EvalReport evaluate_model(const nn::Network<float>& net, const Split& val, const ExperimentConfig& cfg) {
  const auto preds = detect(net, std::span<const PointCloud>(val.clouds), cfg.grid, cfg.detect);
  return evaluate(preds, val.boxes, cfg.eval_iou);
}

int cmd_evaluate(const Invocation& inv, const ExperimentConfig& cfg) {
  require(cfg.data, "data");
  require(cfg.model, "model");
  AccessLog log;
  const auto net = load_model(cfg.model, log);
  DatasetReader reader(cfg.data, log);
  prepare_out_dir(inv);
  const auto val = load_split(reader, "val", true);
  const auto rep = evaluate_model(net, val, cfg);
  const fs::path out(inv.out);
  write_json(out / "eval.json", to_json(rep));
  log.write((out / "file_access.txt").string());
  std::printf("mean AP %.4f", rep.overall.mean_ap);
  for (const auto& b : rep.buckets) std::printf("  %s %.4f", b.bucket.name.c_str(), b.result.mean_ap);
  std::printf("\n");
  return 0;
}

int cmd_compare(const Invocation& inv, const ExperimentConfig& cfg, bool ranges) {
  require(cfg.data, "data");
  const auto models = model_list(cfg);
  if (ranges && models.size() < 2) throw ConfigError("ablate-range needs at least 2 models");
  AccessLog log;
  std::vector<nn::Network<float>> nets;
  for (const auto& m : models) nets.push_back(load_model(m.path, log));
  DatasetReader reader(cfg.data, log);
  prepare_out_dir(inv);
  const auto val = load_split(reader, "val", true);
  std::vector<std::pair<std::string, EvalReport>> reports;
  for (std::size_t i = 0; i < models.size(); ++i) {
    reports.emplace_back(models[i].label, evaluate_model(nets[i], val, cfg));
  }
  const fs::path out(inv.out);
  std::string table;
  char line[256];
  if (ranges) {
    const auto rows = range_ablation(reports);
    std::snprintf(line, sizeof line, "%-16s %8s %8s", "variant", "AP", "drop");
    table += line;
    for (const auto& b : rows.front().report.buckets) {
      std::snprintf(line, sizeof line, " %9s %7s", b.bucket.name.c_str(), "drop");
      table += line;
    }
    table += "\n";
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-16s %8.4f %7.1f%%", r.variant.c_str(), r.report.overall.mean_ap,
                    100.0 * r.overall_drop);
      table += line;
      for (std::size_t b = 0; b < r.report.buckets.size(); ++b) {
        std::snprintf(line, sizeof line, " %9.4f %6.1f%%", r.report.buckets[b].result.mean_ap,
                      100.0 * r.bucket_drop[b]);
        table += line;
      }
      table += "\n";
    }
    write_json(out / "ablation.json", to_json(rows));
    write_text(out / "ablation.txt", table);
  } else {
    std::stable_sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) {
      return a.second.overall.mean_ap > b.second.overall.mean_ap;
    });
    std::snprintf(line, sizeof line, "%-16s %8s", "model", "AP");
    table += line;
    for (int c = 0; c < kNumClasses; ++c) {
      std::snprintf(line, sizeof line, " %10s", class_name(c));
      table += line;
    }
    table += "\n";
    Json rows = Json::array();
    for (const auto& [label, rep] : reports) {
      std::snprintf(line, sizeof line, "%-16s %8.4f", label.c_str(), rep.overall.mean_ap);
      table += line;
      for (int c = 0; c < kNumClasses; ++c) {
        std::snprintf(line, sizeof line, " %10.4f", rep.overall.classes[c].ap);
        table += line;
      }
      table += "\n";
      Json j = to_json(rep);
      j["model"] = label;
      rows.push_back(j);
    }
    write_json(out / "compare.json", rows);
    write_text(out / "compare.txt", table);
  }
  log.write((out / "file_access.txt").string());
  std::fputs(table.c_str(), stdout);
  return 0;
}

int dispatch(const Invocation& inv) {
  ExperimentConfig cfg;
  if (!inv.config_path.empty()) apply_config_file(cfg, inv.config_path);
  for (const auto& o : inv.overrides) apply_assignment(cfg, o);
  if (inv.has_seed) cfg.seed = inv.seed;
  cfg.validate();

  if (inv.verb == "gen-data") return cmd_gen_data(inv, cfg);
  if (inv.verb == "train-fp") return cmd_train_fp(inv, cfg);
  if (inv.verb == "calibrate") return cmd_quantize(inv, cfg, true);
  if (inv.verb == "quantize") return cmd_quantize(inv, cfg, false);
  if (inv.verb == "evaluate") return cmd_evaluate(inv, cfg);
  if (inv.verb == "compare") return cmd_compare(inv, cfg, false);
  if (inv.verb == "ablate-range") return cmd_compare(inv, cfg, true);
  throw ConfigError("unknown verb '" + inv.verb + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LiDAR post-training quantization toolkit"};
  app.require_subcommand(1, 1);
  Invocation inv;
  const std::vector<std::pair<const char*, const char*>> verbs = {
      {"gen-data", "generate the synthetic dataset"},
      {"train-fp", "train the full-precision detector"},
      {"calibrate", "calibrate quantizers without optimization"},
      {"quantize", "run the quantization pipeline or a baseline calibrator"},
      {"evaluate", "BEV AP of one model on the val split"},
      {"compare", "AP table for several models"},
      {"ablate-range", "AP drop per range bucket against the first model"}};
  for (const auto& [name, help] : verbs) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", inv.config_path, "key=value config file");
    sub->add_option("--out", inv.out, "output directory");
    sub->add_option("--seed", inv.seed, "seed override")->each([&](const std::string&) { inv.has_seed = true; });
    sub->add_flag("--force", inv.force, "overwrite a non-empty output directory");
    sub->add_option("overrides", inv.overrides, "key=value config overrides");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  for (auto* sub : app.get_subcommands()) inv.verb = sub->get_name();

  try {
    return dispatch(inv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "lptq: E_CONFIG: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "lptq: E_RUNTIME: %s\n", e.what());
    return kExitRuntime;
  }
}
