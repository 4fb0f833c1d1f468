// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "lptq/pipeline.hpp"

namespace lptq {
namespace {

// A small world so every test runs in seconds: 16 m x 16 m at 0.5 m pillars.
struct World {
  GridConfig grid;
  std::vector<Frame> frames;
  nn::Network<float> fp;
  CalibrationSet cs;
};

const World& world() {
  static const World w = [] {
    World w;
    w.grid.x_min = w.grid.y_min = -8;
    w.grid.x_max = w.grid.y_max = 8;
    SceneSpec spec;
    spec.min_objects = 1;
    spec.max_objects = 3;
    spec.placement_half_extent = 7;
    spec.sensor_range = 10;
    spec.max_distractors = 1;
    spec.ground_points = 300;
    w.frames = generate_dataset(spec, 24, 0, 3);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch = 4;
    tc.arch.channels = 6;
    tc.arch.backbone_layers = 4;
    tc.log_every = 0;
    w.fp = train_fp_baseline(w.frames, {}, w.grid, tc).net;
    std::vector<int> ids;
    std::vector<PointCloud> clouds;
    for (auto i : sample_calibration_set(w.frames.size(), 8, 1)) {
      ids.push_back(static_cast<int>(i));
      clouds.push_back(w.frames[i].scene.points);
    }
    w.cs = make_calibration_set(ids, clouds, w.grid);
    return w;
  }();
  return w;
}

PipelineConfig small_config(int iters) {
  PipelineConfig c;
  c.calib_frames = 8;
  c.batch = 2;
  c.iters_T = iters;
  c.eval_every = 2;
  c.eval_frames = 4;
  c.search.T = 20;
  return c;
}

TEST(CalibrationSampling, DistinctInRangeAndSeeded) {
  const auto a = sample_calibration_set(100, 30, 5);
  ASSERT_EQ(a.size(), 30u);
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 30u);
  for (auto i : a) EXPECT_LT(i, 100u);
  EXPECT_EQ(sample_calibration_set(100, 30, 5), a);
  EXPECT_NE(sample_calibration_set(100, 30, 6), a);
  auto all = sample_calibration_set(10, 10, 0);
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(all[i], i);
  EXPECT_THROW(sample_calibration_set(5, 6, 0), ParamError);
}

TEST(Training, LossFallsOverFirstSteps) {
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch = 2;
  tc.arch.channels = 6;
  tc.arch.backbone_layers = 3;
  tc.log_every = 0;
  const auto& w = world();
  const auto r = train_fp_baseline(std::span<const Frame>(w.frames).first(20), {}, w.grid, tc);
  ASSERT_EQ(r.step_losses.size(), 10u);
  const double head = (r.step_losses[0] + r.step_losses[1] + r.step_losses[2]) / 3;
  const double tail = (r.step_losses[7] + r.step_losses[8] + r.step_losses[9]) / 3;
  EXPECT_LT(tail, head);
}

TEST(Training, ApFloorIsEnforced) {
  TrainConfig tc;
  tc.epochs = 1;
  tc.arch.channels = 4;
  tc.arch.backbone_layers = 2;
  tc.ap_floor = 1.01;
  const auto& w = world();
  const std::span<const Frame> f(w.frames);
  EXPECT_THROW(train_fp_baseline(f.first(4), f.subspan(4, 2), w.grid, tc), Error);
}

TEST(Units, BlockAndLayerGrouping) {
  const auto net = make_detector<float>(DetectorArch{.backbone_layers = 5}, 0);
  using U = std::vector<std::vector<int>>;
  EXPECT_EQ(quantization_units(net, Granularity::block, 2), (U{{1, 2}, {3, 4}}));
  EXPECT_EQ(quantization_units(net, Granularity::block, 3), (U{{1, 2, 3}, {4}}));
  EXPECT_EQ(quantization_units(net, Granularity::layer, 2), (U{{1}, {2}, {3}, {4}}));
}

TEST(Baseline, ThirtyTwoBitsIsIdentity) {
  const auto& w = world();
  const auto r = run_baseline_calibration(w.fp, w.cs, CalibMethod::maxmin, kFullPrecisionBits);
  EXPECT_EQ(nn::encode_ptqf(r.net), nn::encode_ptqf(w.fp));
  EXPECT_TRUE(r.layers.empty());
}

TEST(Baseline, QuantizesOnlyNonExemptLayers) {
  const auto& w = world();
  const auto r = run_baseline_calibration(w.fp, w.cs, CalibMethod::entropy, 8);
  for (const auto& l : r.net.layers) EXPECT_EQ(l.quantized(), !l.fp_exempt) << l.name;
  EXPECT_EQ(r.layers.size(), 3u);
}

TEST(Pipeline, ZeroIterationsEqualsGridCalibration) {
  const auto& w = world();
  const auto [q, log] = run_lidar_ptq(w.fp, w.cs, small_config(0), w.grid);
  const auto base = run_baseline_calibration(w.fp, w.cs, CalibMethod::maxmin_grid, 8, small_config(0).search);
  EXPECT_EQ(nn::encode_ptqf(q), nn::encode_ptqf(base.net));
  EXPECT_TRUE(log.iterations.empty());
  for (const auto& l : log.layers) {
    EXPECT_EQ(l.mse_final, l.mse_init);
    EXPECT_EQ(l.best_iteration, 0);
    EXPECT_FALSE(l.has_theta);
  }
}

TEST(Pipeline, KeepBestNeverRaisesLocalLoss) {
  const auto& w = world();
  const auto cfg = small_config(8);
  const auto [q, log] = run_lidar_ptq(w.fp, w.cs, cfg, w.grid);
  ASSERT_EQ(log.layers.size(), 3u);
  EXPECT_EQ(log.layers[0].unit, "conv2+conv3");
  EXPECT_EQ(log.layers[2].unit, "conv4");
  for (const auto& l : log.layers) {
    EXPECT_LE(l.mse_final, l.mse_init) << l.name;
    EXPECT_TRUE(l.best_iteration % cfg.eval_every == 0) << l.name;
    EXPECT_TRUE(l.has_theta);
  }
  EXPECT_EQ(log.iterations.size(), 2u * 8u);
  for (const auto& l : q.layers) EXPECT_EQ(l.quantized(), !l.fp_exempt);
}

TEST(Pipeline, Deterministic) {
  const auto& w = world();
  const auto a = run_lidar_ptq(w.fp, w.cs, small_config(4), w.grid);
  const auto b = run_lidar_ptq(w.fp, w.cs, small_config(4), w.grid);
  EXPECT_EQ(nn::encode_ptqf(a.first), nn::encode_ptqf(b.first));
  EXPECT_EQ(a.second.to_json().dump(), b.second.to_json().dump());
}

TEST(Pipeline, LaterUnitsLeaveEarlierOnesAlone) {
  const auto& w = world();
  auto cfg = small_config(4);
  cfg.granularity = Granularity::layer;
  const auto full = run_lidar_ptq(w.fp, w.cs, cfg, w.grid).first;
  auto shorter = w.fp;
  shorter.layers[3].fp_exempt = true;  // drop the last unit
  const auto part = run_lidar_ptq(shorter, w.cs, cfg, w.grid).first;
  for (int l : {1, 2}) {
    EXPECT_EQ(full.layers[l].w_quant, part.layers[l].w_quant);
    EXPECT_EQ(full.layers[l].a_quant, part.layers[l].a_quant);
    EXPECT_EQ(full.layers[l].theta->theta.vec(), part.layers[l].theta->theta.vec());
  }
  EXPECT_FALSE(part.layers[3].quantized());
}

TEST(Pipeline, CachedFpOutputsGiveSameResult) {
  const auto& w = world();
  const auto path = std::filesystem::temp_directory_path() / "lptq_ofp_test.bin";
  std::filesystem::remove(path);
  auto cfg = small_config(2);
  cfg.ofp_cache = path.string();
  const auto first = run_lidar_ptq(w.fp, w.cs, cfg, w.grid).first;
  ASSERT_TRUE(std::filesystem::exists(path));
  const auto second = run_lidar_ptq(w.fp, w.cs, cfg, w.grid).first;
  EXPECT_EQ(nn::encode_ptqf(first), nn::encode_ptqf(second));
  std::filesystem::remove(path);
}

TEST(Pipeline, RejectsBadNetworks) {
  const auto& w = world();
  auto no_flag = w.fp;
  no_flag.layers[0].fp_exempt = false;
  EXPECT_THROW(run_lidar_ptq(no_flag, w.cs, small_config(0), w.grid), ParamError);
  auto head = w.fp;
  head.layers.back().fp_exempt = false;
  EXPECT_THROW(run_lidar_ptq(head, w.cs, small_config(0), w.grid), ParamError);
  const auto quantized = run_baseline_calibration(w.fp, w.cs, CalibMethod::maxmin, 8).net;
  EXPECT_THROW(run_lidar_ptq(quantized, w.cs, small_config(0), w.grid), ParamError);
  auto cfg = small_config(0);
  cfg.batch = 16;
  EXPECT_THROW(run_lidar_ptq(w.fp, w.cs, cfg, w.grid), ConfigError);
}

TEST(Detect, OneListPerCloud) {
  const auto& w = world();
  std::vector<PointCloud> clouds;
  for (int i = 0; i < 5; ++i) clouds.push_back(w.frames[i].scene.points);
  const auto out = detect(w.fp, std::span<const PointCloud>(clouds), w.grid, DetectConfig{}, 2);
  ASSERT_EQ(out.size(), 5u);
  const auto one = detect(w.fp, std::span<const PointCloud>(clouds).subspan(3, 1), w.grid, DetectConfig{});
  EXPECT_EQ(one[0], out[3]);  // batching does not change results
}

}  // namespace
}  // namespace lptq
