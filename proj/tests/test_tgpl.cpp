// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "lptq/random.hpp"
#include "lptq/tgpl.hpp"

namespace lptq {
namespace {

Tensor<double> randn(std::vector<int> shape, Rng& rng, double sd = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.vec()) v = rng.normal(0.0, sd);
  return t;
}

GridConfig small_grid() {
  GridConfig g;
  g.x_min = -8;
  g.x_max = 8;
  g.y_min = -8;
  g.y_max = 8;
  g.voxel = 0.5;  // 16 x 16 output cells of 1 m
  return g;
}

TEST(Focal, HandComputedHalfProbabilities) {
  const std::vector<double> p(4, 0.5);
  const std::vector<double> t{1.0, 0.0, 0.0, 0.0};
  // positive: -(1/4) log(1/2); each negative: -(1/4) log(1/2); one positive
  EXPECT_NEAR(focal_loss<double>(p, t), std::log(2.0), 1e-15);
}

TEST(Focal, PenaltyReducedNegatives) {
  const std::vector<double> p{0.3};
  const std::vector<double> t{0.5};
  const double want = -std::pow(0.5, 4) * 0.09 * std::log(0.7);
  EXPECT_NEAR(focal_loss<double>(p, t), want, 1e-15);  // no positives, so no division
}

TEST(Focal, ClampedPredictionsHaveZeroGradient) {
  const std::vector<double> p{0.0, 1.0, 0.5};
  const std::vector<double> t{1.0, 0.0, 0.2};
  std::vector<double> g(3);
  const double l = focal_loss<double>(p, t, g);
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_NE(g[2], 0.0);
  EXPECT_THROW(focal_loss<double>(p, std::vector<double>{1.0}), ShapeError);
}

TEST(Focal, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  std::vector<double> p(50), t(50);
  for (int i = 0; i < 50; ++i) {
    p[i] = rng.uniform(0.05, 0.95);
    t[i] = i % 7 == 0 ? 1.0 : rng.uniform(0.0, 0.9);
  }
  std::vector<double> g(50);
  focal_loss<double>(p, t, g);
  for (int i = 0; i < 50; ++i) {
    const double keep = p[i], h = 1e-6;
    p[i] = keep + h;
    const double up = focal_loss<double>(p, t);
    p[i] = keep - h;
    const double dn = focal_loss<double>(p, t);
    p[i] = keep;
    EXPECT_NEAR(g[i], (up - dn) / (2 * h), 1e-6);
  }
}

TEST(L1Reg, Examples) {
  const std::vector<double> pred{1.0, 2.0, -1.0, 5.0};
  const std::vector<double> target{0.0, 0.0, 0.5, 0.0};
  const std::vector<std::uint8_t> mask{1, 0};
  std::vector<double> g(4);
  // two channels, one masked cell each: (|1| + |-1.5|) / 2
  EXPECT_DOUBLE_EQ(l1_reg_loss<double>(pred, target, mask, g), 1.25);
  EXPECT_EQ(g, (std::vector<double>{0.5, 0.0, -0.5, 0.0}));
  const std::vector<std::uint8_t> none{0, 0};
  EXPECT_EQ(l1_reg_loss<double>(pred, target, none, g), 0.0);
  EXPECT_EQ(g, std::vector<double>(4, 0.0));
  EXPECT_THROW(l1_reg_loss<double>(pred, target, std::vector<std::uint8_t>{1, 0, 1}), ShapeError);
}

TEST(RenderTargets, SingleBox) {
  const auto cfg = small_grid();
  const Box3D b{.x = 0.3, .y = -2.6, .z = 0.9, .h = 1.5, .w = 1.8, .l = 4.0, .yaw = 0.4, .cls = 0};
  const auto lab = render_targets<double>({b}, cfg);
  EXPECT_EQ(lab.positives(), 1);
  const int col = 8, row = 5;  // floor((0.3 + 8) / 1), floor((-2.6 + 8) / 1)
  const std::size_t plane = 256, at = row * 16 + col;
  EXPECT_EQ(lab.heatmap_target[at], 1.0);
  EXPECT_EQ(lab.heatmap_target[plane + at], 0.0);  // other class untouched
  EXPECT_GT(lab.heatmap_target[at + 1], 0.0);
  EXPECT_LT(lab.heatmap_target[at + 1], 1.0);
  EXPECT_NEAR(lab.reg_target[at], 0.3 - 8.5 + 8, 1e-12);
  EXPECT_NEAR(lab.reg_target[plane + at], -2.6 - 5.5 + 8, 1e-12);
  EXPECT_NEAR(lab.reg_target[2 * plane + at], 0.9, 1e-12);
  EXPECT_NEAR(lab.reg_target[3 * plane + at], std::log(1.5), 1e-12);
  EXPECT_NEAR(lab.reg_target[4 * plane + at], std::log(1.8), 1e-12);
  EXPECT_NEAR(lab.reg_target[5 * plane + at], std::log(4.0), 1e-12);
  EXPECT_NEAR(lab.reg_target[6 * plane + at], std::sin(0.4), 1e-12);
  EXPECT_NEAR(lab.reg_target[7 * plane + at], std::cos(0.4), 1e-12);
}

TEST(RenderTargets, FirstBoxOwnsSharedCellAndOutsideIsDropped) {
  const auto cfg = small_grid();
  const Box3D a{.x = 0.2, .y = 0.2, .z = 1.0, .cls = 1};
  const Box3D b{.x = 0.7, .y = 0.7, .z = 2.0, .cls = 0};
  const Box3D far{.x = 50.0, .y = 0.0};
  const auto lab = render_targets<double>({a, b, far}, cfg);
  EXPECT_EQ(lab.positives(), 1);
  const std::size_t at = 8 * 16 + 8;
  EXPECT_EQ(lab.reg_target[2 * 256 + at], 1.0);
  EXPECT_EQ(lab.heatmap_target[at], 1.0);        // class 0 peak from b
  EXPECT_EQ(lab.heatmap_target[256 + at], 1.0);  // class 1 peak from a
  EXPECT_EQ(lab.boxes.size(), 3u);
}

TEST(PseudoLabels, GammaFiltersWeakPeaks) {
  const auto cfg = small_grid();
  DetectorOutput<double> out{Tensor<double>({1, kNumClasses, 16, 16}),
                             Tensor<double>({1, kRegChannels, 16, 16})};
  for (std::size_t i = 0; i < 256; ++i) out.regression[7 * 256 + i] = 1.0;
  out.heatmap.at(0, 0, 3, 3) = 0.9;
  out.heatmap.at(0, 1, 10, 10) = 0.2;
  const auto strict = make_pseudo_labels(out, 0, 0.3, 50, 0.1, cfg);
  ASSERT_EQ(strict.boxes.size(), 1u);
  EXPECT_EQ(strict.boxes[0].cls, 0);
  EXPECT_EQ(strict.positives(), 1);
  const auto loose = make_pseudo_labels(out, 0, 0.1, 50, 0.1, cfg);
  EXPECT_EQ(loose.boxes.size(), 2u);
  const auto capped = make_pseudo_labels(out, 0, 0.1, 1, 0.1, cfg);
  EXPECT_EQ(capped.boxes.size(), 1u);
}

TEST(Tgpl, ZeroAlphaIgnoresRegression) {
  Rng rng(3);
  const auto cfg = small_grid();
  const auto lab = render_targets<double>({Box3D{.x = 1, .y = 1}}, cfg);
  const auto logits = randn({1, kNumClasses, 16, 16}, rng);
  const auto reg = randn({1, kRegChannels, 16, 16}, rng);
  const PseudoLabels<double>* labs[] = {&lab};
  const auto t0 = tgpl_loss<double>(logits, reg, labs, LossWeights{.alpha_reg = 0.0});
  EXPECT_EQ(t0.total, t0.cls);
  EXPECT_GT(t0.reg, 0.0);
  const auto t1 = tgpl_loss<double>(logits, reg, labs, LossWeights{.alpha_reg = 0.5});
  EXPECT_DOUBLE_EQ(t1.total, t1.cls + 0.5 * t1.reg);
  EXPECT_EQ(t1.cls, t0.cls);
}

TEST(Tgpl, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  const auto cfg = small_grid();
  const auto la = render_targets<double>({Box3D{.x = 1, .y = 1}, Box3D{.x = -4, .y = 3, .cls = 1}}, cfg);
  const auto lb = render_targets<double>({Box3D{.x = 5, .y = -5, .l = 4, .yaw = 0.3}}, cfg);
  auto logits = randn({2, kNumClasses, 16, 16}, rng);
  auto reg = randn({2, kRegChannels, 16, 16}, rng);
  const PseudoLabels<double>* labs[] = {&la, &lb};
  const LossWeights w{.alpha_reg = 0.25};
  Tensor<double> dl, dr;
  tgpl_loss<double>(logits, reg, labs, w, &dl, &dr);
  auto total = [&] { return tgpl_loss<double>(logits, reg, labs, w).total; };
  const double h = 1e-6;
  for (std::size_t i = 0; i < logits.size(); i += 37) {
    const double keep = logits[i];
    logits[i] = keep + h;
    const double up = total();
    logits[i] = keep - h;
    const double dn = total();
    logits[i] = keep;
    EXPECT_NEAR(dl[i], (up - dn) / (2 * h), 1e-6) << "logit " << i;
  }
  int masked = 0;
  for (std::size_t i = 0; i < reg.size(); ++i) {
    if (dr[i] == 0.0) continue;
    ++masked;
    const double keep = reg[i];
    reg[i] = keep + h;
    const double up = total();
    reg[i] = keep - h;
    const double dn = total();
    reg[i] = keep;
    EXPECT_NEAR(dr[i], (up - dn) / (2 * h), 1e-6) << "reg " << i;
  }
  EXPECT_EQ(masked, 3 * kRegChannels);
  const PseudoLabels<double>* one[] = {&la};
  EXPECT_THROW(tgpl_loss<double>(logits, reg, one, w), ShapeError);
}

TEST(LocalRecon, ImpulseInputIsolatesWeightError) {
  const Tensor<double> w({1, 1, 1, 1}, std::vector<double>{0.5});
  const Tensor<double> q({1, 1, 1, 1}, std::vector<double>{0.75});
  Tensor<double> x({1, 1, 3, 3});
  x.at(0, 0, 1, 1) = 2.0;
  // one nonzero output: (0.75 - 0.5) * 2
  EXPECT_DOUBLE_EQ(local_recon_loss(w, q, x, 1, 0), 0.25);
  EXPECT_EQ(local_recon_loss(w, w, x, 1, 0), 0.0);
}

TEST(LocalRecon, MatchesSeparateConvolutions) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto w = randn({4, 3, 3, 3}, rng);
    auto q = w;
    for (auto& v : q.vec()) v += rng.normal(0.0, 0.01);
    const auto x = randn({2, 3, 7, 7}, rng);
    const auto y = nn::conv2d_raw(x, w, Tensor<double>{}, 2, 1);
    const auto yq = nn::conv2d_raw(x, q, Tensor<double>{}, 2, 1);
    double ref = 0;
    for (std::size_t i = 0; i < y.size(); ++i) ref += (y[i] - yq[i]) * (y[i] - yq[i]);
    EXPECT_NEAR(local_recon_loss(w, q, x, 2, 1), ref / 2, 1e-10 * (1 + ref));
  }
}

TEST(LocalRecon, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  const auto w = randn({3, 2, 3, 3}, rng);
  auto q = w;
  for (auto& v : q.vec()) v += rng.normal(0.0, 0.05);
  const auto x = randn({2, 2, 6, 6}, rng);
  Tensor<double> g;
  local_recon_loss(w, q, x, 1, 1, &g);
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double keep = q[i], h = 1e-6;
    q[i] = keep + h;
    const double up = local_recon_loss(w, q, x, 1, 1);
    q[i] = keep - h;
    const double dn = local_recon_loss(w, q, x, 1, 1);
    q[i] = keep;
    EXPECT_NEAR(g[i], (up - dn) / (2 * h), 1e-5 * (1 + std::abs(g[i])));
  }
  EXPECT_THROW(local_recon_loss(w, Tensor<double>({3, 2, 1, 1}), x, 1, 1), ShapeError);
}

TEST(TotalLoss, WeightedSum) {
  EXPECT_EQ(total_loss(3.0, 4.0, LossWeights{.lambda1 = 2.0, .lambda2 = 0.5}), 8.0);
  EXPECT_EQ(total_loss(3.0, 4.0, LossWeights{.lambda1 = 0.0, .lambda2 = 1.0}), 4.0);
  EXPECT_THROW((LossWeights{.lambda1 = -1.0}.validate()), ParamError);
}

TEST(GaussianRadius, GrowsWithBoxSize) {
  EXPECT_LT(gaussian_radius(1, 1), gaussian_radius(4, 4));
  EXPECT_GT(gaussian_radius(4, 2), 0.0);
}

}  // namespace
}  // namespace lptq
