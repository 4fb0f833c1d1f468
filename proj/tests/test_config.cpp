// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "lptq/config.hpp"

namespace lptq {
namespace {

TEST(Config, DefaultsValidate) {
  const ExperimentConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.method, CalibMethod::maxmin_grid);
  EXPECT_EQ(cfg.eval_iou, 0.3);
}

TEST(Config, ParsesTextWithComments) {
  ExperimentConfig cfg;
  apply_config_text(cfg, R"(# experiment
data = /tmp/ds      # trailing comment
method=entropy
n_train = 64
seed = 12345678901
bits_w = 4
lambda1 = 0.5
granularity = layer
optimize_theta = false
scene.vehicle_l_min = 3.5
train.channels = 8
models = fp=/a/model.ptqf, /b/model.ptqf

search.reciprocal_sweep = 1
)");
  EXPECT_EQ(cfg.data, "/tmp/ds");
  EXPECT_EQ(cfg.method, CalibMethod::entropy);
  EXPECT_EQ(cfg.n_train, 64);
  EXPECT_EQ(cfg.seed, 12345678901ull);
  EXPECT_EQ(cfg.pipeline.bits_w, 4);
  EXPECT_EQ(cfg.pipeline.loss.lambda1, 0.5);
  EXPECT_EQ(cfg.pipeline.granularity, Granularity::layer);
  EXPECT_FALSE(cfg.pipeline.optimize_theta);
  EXPECT_EQ(cfg.scene.vehicle_l[0], 3.5);
  EXPECT_EQ(cfg.train.arch.channels, 8);
  EXPECT_EQ(cfg.models, (std::vector<std::string>{"fp=/a/model.ptqf", "/b/model.ptqf"}));
  EXPECT_TRUE(cfg.pipeline.search.reciprocal_sweep);
}

TEST(Config, UnknownKeyIsConfigErrorWithLine) {
  ExperimentConfig cfg;
  try {
    apply_config_text(cfg, "seed = 1\n\nno_such_key = 3\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("no_such_key"), std::string::npos) << msg;
    EXPECT_EQ(e.code(), 2);
  }
}

TEST(Config, BadValuesRejected) {
  ExperimentConfig cfg;
  EXPECT_THROW(apply_assignment(cfg, "n_train=12abc"), ConfigError);
  EXPECT_THROW(apply_assignment(cfg, "lr_scale=fast"), ConfigError);
  EXPECT_THROW(apply_assignment(cfg, "optimize_theta=yes"), ConfigError);
  EXPECT_THROW(apply_assignment(cfg, "method=kmeans"), ConfigError);
  EXPECT_THROW(apply_assignment(cfg, "granularity=net"), ConfigError);
  EXPECT_THROW(apply_assignment(cfg, "scale_grad=adjoint"), ConfigError);
  EXPECT_THROW(apply_assignment(cfg, "seed=-1"), ConfigError);
  EXPECT_THROW(apply_assignment(cfg, "just_a_word"), ConfigError);
  EXPECT_EQ(cfg.n_train, 2000);  // failed assignments leave the field alone
}

TEST(Config, ValidationCatchesInconsistentValues) {
  ExperimentConfig cfg;
  apply_assignment(cfg, "eval_iou=1.5");
  EXPECT_THROW(cfg.validate(), ConfigError);
  ExperimentConfig scene;
  apply_assignment(scene, "scene.min_objects=9");
  apply_assignment(scene, "scene.max_objects=3");
  EXPECT_THROW(scene.validate(), ConfigError);
  ExperimentConfig bits;
  apply_assignment(bits, "bits_a=1");
  EXPECT_THROW(bits.validate(), ConfigError);
}

TEST(Config, LaterAssignmentsOverride) {
  ExperimentConfig cfg;
  apply_config_text(cfg, "iters_T = 50\n");
  apply_assignment(cfg, " iters_T = 7 ");
  EXPECT_EQ(cfg.pipeline.iters_T, 7);
}

TEST(Config, EveryKeyIsSettable) {
  const auto keys = config_keys();
  EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
  EXPECT_NE(std::find(keys.begin(), keys.end(), "search.max_samples"), keys.end());
  EXPECT_NE(std::find(keys.begin(), keys.end(), "scene.ped_h_max"), keys.end());
  for (const auto& k : keys) {
    ExperimentConfig cfg;
    std::string v = "1";
    if (k == "method") v = "maxmin";
    if (k == "granularity") v = "block";
    if (k == "scale_grad") v = "backprop";
    EXPECT_NO_THROW(apply_setting(cfg, k, v)) << k;
  }
}

TEST(Config, FileLoading) {
  const auto path = std::filesystem::temp_directory_path() / "lptq_config_test.cfg";
  {
    std::ofstream out(path);
    out << "n_val = 17\n";
  }
  ExperimentConfig cfg;
  apply_config_file(cfg, path.string());
  EXPECT_EQ(cfg.n_val, 17);
  std::filesystem::remove(path);
  EXPECT_THROW(apply_config_file(cfg, path.string()), ConfigError);
}

}  // namespace
}  // namespace lptq
