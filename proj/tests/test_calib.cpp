// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "lptq/calib.hpp"
#include "lptq/random.hpp"
#include "oracles.hpp"

namespace lptq {
namespace {

using testing_oracles::grid_oracle;
using testing_oracles::kl_oracle;

TEST(MaxMinRange, Examples) {
  const std::vector<double> a{-3.0, 0.5, 2.0};
  EXPECT_EQ(maxmin_range<double>(a), std::make_pair(-3.0, 3.0));
  const std::vector<double> z{0.0, 0.0};
  EXPECT_EQ(maxmin_range<double>(z), std::make_pair(-kDegenerateScale, kDegenerateScale));
  const std::vector<double> one{7.0};
  EXPECT_EQ(maxmin_range<double>(one), std::make_pair(-7.0, 7.0));
  EXPECT_THROW(maxmin_range<double>(std::vector<double>{}), ParamError);
  EXPECT_THROW(maxmin_range<double>(std::vector<double>{1.0, NAN}), ParamError);
}

TEST(MaxMinRange, ScaleEquivariant) {
  Rng rng(3);
  std::vector<double> x(100), y(100);
  for (int i = 0; i < 100; ++i) {
    x[i] = rng.normal();
    y[i] = 4.0 * x[i];
  }
  const auto [lo, hi] = maxmin_range<double>(x);
  const auto [lo4, hi4] = maxmin_range<double>(y);
  EXPECT_DOUBLE_EQ(lo4, 4.0 * lo);
  EXPECT_DOUBLE_EQ(hi4, 4.0 * hi);
}

TEST(Histogram, Examples) {
  const auto h = build_histogram<double>(std::vector<double>{0.1, 0.1, 0.9}, 2);
  EXPECT_EQ(h.bin_counts, (std::vector<std::uint64_t>{2, 1}));
  const auto g = build_histogram<double>(std::vector<double>{-0.5, 0.5}, 2);
  EXPECT_EQ(g.bin_counts, (std::vector<std::uint64_t>{0, 2}));
  EXPECT_THROW(build_histogram<double>(std::vector<double>{0.0, 0.0}, 4), ParamError);
  EXPECT_THROW(build_histogram<double>(std::vector<double>{1.0}, 1), ParamError);
}

TEST(Histogram, UniformCountsAreFlat) {
  Rng rng(8);
  std::vector<double> x(40000);
  for (auto& v : x) v = rng.uniform();
  const auto h = build_histogram<double>(x, 4);
  for (auto c : h.bin_counts) EXPECT_NEAR(static_cast<double>(c), 10000.0, 400.0);
  EXPECT_EQ(h.total(), 40000u);
}

TEST(Histogram, MergeRequiresSameBinning) {
  auto a = build_histogram_in_range<double>(std::vector<double>{0.2, 0.7}, 4, 1.0);
  const auto b = build_histogram_in_range<double>(std::vector<double>{0.9}, 4, 1.0);
  a.merge(b);
  EXPECT_EQ(a.bin_counts, (std::vector<std::uint64_t>{1, 0, 1, 1}));
  const auto c = build_histogram_in_range<double>(std::vector<double>{0.9}, 4, 2.0);
  EXPECT_THROW(a.merge(c), ShapeError);
}

TEST(KlDivergence, Examples) {
  const std::vector<double> p{0.5, 0.5};
  EXPECT_EQ(kl_divergence(p, p), 0.0);
  const std::vector<double> one{1.0, 0.0};
  EXPECT_NEAR(kl_divergence(one, p), std::log(2.0), 1e-15);
  EXPECT_EQ(kl_divergence(p, one), std::numeric_limits<double>::infinity());
  EXPECT_THROW(kl_divergence(p, std::vector<double>{1.0}), ShapeError);
}

TEST(KlDivergence, MatchesDirectSum) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> p(16), q(16);
    double sp = 0, sq = 0;
    for (int i = 0; i < 16; ++i) {
      sp += p[i] = rng.uniform(0.01, 1.0);
      sq += q[i] = rng.uniform(0.01, 1.0);
    }
    double direct = 0;
    for (int i = 0; i < 16; ++i) {
      p[i] /= sp;
      q[i] /= sq;
    }
    for (int i = 0; i < 16; ++i) direct += p[i] * std::log(p[i] / q[i]);
    EXPECT_NEAR(kl_divergence(p, q), direct, 1e-12);
    EXPECT_GE(kl_divergence(p, q), 0.0);
  }
}

TEST(EntropyThreshold, AllMassInLowBinsKeepsEverything) {
  Histogram h;
  h.bin_counts.assign(512, 0);
  h.bin_width = 0.01;
  for (int j = 0; j < 128; ++j) h.bin_counts[j] = 1 + j % 7;
  const auto r = entropy_threshold(h, 8);
  EXPECT_EQ(r.index, 128);
  EXPECT_NEAR(r.divergence[128], 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(r.threshold, 128.5 * 0.01);
}

TEST(EntropyThreshold, GaussianWithOutlierClipsOutlier) {
  Rng rng(21);
  std::vector<double> x(50000);
  for (auto& v : x) v = rng.normal(0.0, 1.0);
  x.push_back(40.0);
  const auto h = build_histogram<double>(x, kEntropyBins);
  const auto r = entropy_threshold(h, 8);
  EXPECT_LT(r.threshold, 40.0);
  EXPECT_EQ(r.index, kl_oracle(h.bin_counts, 8));
}

TEST(EntropyThreshold, DegenerateFallsBackToFullRange) {
  Histogram h;
  h.bin_counts.assign(512, 0);
  h.bin_counts[3] = 10;
  h.bin_width = 0.5;
  const auto r = entropy_threshold(h, 8);
  EXPECT_TRUE(r.degenerate);
  EXPECT_DOUBLE_EQ(r.threshold, 256.0);
}

TEST(EntropyThreshold, RejectsTooFewBins) {
  Histogram h;
  h.bin_counts.assign(128, 1);
  EXPECT_THROW(entropy_threshold(h, 8), ParamError);
}

TEST(EntropyThreshold, MatchesBruteForceScan) {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 160 + static_cast<int>(rng.below(200));
    std::vector<std::uint64_t> bins(n);
    const double decay = rng.uniform(0.005, 0.05);
    for (int j = 0; j < n; ++j) {
      // decaying counts with random holes
      bins[j] = rng.uniform() < 0.15 ? 0 : static_cast<std::uint64_t>(1000.0 * std::exp(-decay * j) * rng.uniform(0.5, 1.5));
    }
    bins[0] += 1;
    Histogram h;
    h.bin_counts = bins;
    h.bin_width = 0.1;
    EXPECT_EQ(entropy_threshold(h, 8).index, kl_oracle(bins, 8)) << "trial " << trial;
  }
}

TEST(GridCandidates, LinearSweepIncludesMaxMin) {
  SearchConfig cfg;
  cfg.T = 4;
  cfg.alpha = 0.25;
  cfg.beta = 1.0;
  const auto c = grid_candidates(10.0, cfg);
  ASSERT_EQ(c.size(), 4u);  // 10.0 already in the sweep
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(c[i], 2.5 * (i + 1));
  cfg.beta = 1.2;
  const auto d = grid_candidates(10.0, cfg);
  EXPECT_NE(std::find(d.begin(), d.end(), 10.0), d.end());
  EXPECT_TRUE(std::is_sorted(d.begin(), d.end()));
}

TEST(GridCandidates, ReciprocalSweep) {
  SearchConfig cfg;
  cfg.T = 4;
  cfg.reciprocal_sweep = true;
  const auto c = grid_candidates(12.0, cfg);
  // 12/4/i for i = 1..3, ascending
  ASSERT_EQ(c.size(), 3u);
  EXPECT_DOUBLE_EQ(c[0], 1.0);
  EXPECT_DOUBLE_EQ(c[1], 1.5);
  EXPECT_DOUBLE_EQ(c[2], 3.0);
}

TEST(GridSearch, OutlierIsClipped) {
  // 4-bit levels over +-8 are coarse enough that a large body outweighs
  // clipping one outlier
  Rng rng(4);
  std::vector<double> x;
  for (int i = 0; i < 10000; ++i) x.push_back(rng.normal());
  x.push_back(8.0);
  SearchConfig cfg;
  cfg.T = 100;
  const auto r = grid_search_scale<double>(x, 4, cfg);
  EXPECT_LT(r.threshold, 8.0);
  const double mm = quant_sse<double>(x, scale_from_range(-8.0, 8.0, 4));
  EXPECT_LT(r.sse, mm);
  EXPECT_EQ(r.index, grid_oracle(x, 4, r.candidates));
}

TEST(GridSearch, SingleOutlierKeptWhenBodyIsSmall) {
  std::vector<double> x{0.3, -0.2, 0.1, 100.0};
  const auto r = grid_search_scale<double>(x, 8, SearchConfig{});
  EXPECT_GE(r.threshold, 100.0);
}

TEST(GridSearch, SymmetricPairMatchesOracle) {
  for (int T : {1, 2, 10, 100}) {
    const std::vector<double> x{-2.5, 2.5};
    SearchConfig cfg;
    cfg.T = T;
    const auto r = grid_search_scale<double>(x, 8, cfg);
    EXPECT_EQ(r.index, grid_oracle(x, 8, r.candidates)) << "T " << T;
  }
}

TEST(GridSearch, AllZeroIsDegenerate) {
  const std::vector<double> x(10, 0.0);
  const auto r = grid_search_scale<double>(x, 8, SearchConfig{});
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.params.scale, kDegenerateScale);
}

TEST(GridSearch, MatchesExhaustiveArgminOnRandomTensors) {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 50 + static_cast<int>(rng.below(400));
    std::vector<double> x(n);
    const double spread = rng.uniform(0.1, 10.0);
    for (auto& v : x) v = rng.uniform() < 0.3 ? 0.0 : rng.normal(0.0, spread);
    if (rng.uniform() < 0.5) x[rng.below(n)] = spread * rng.uniform(10, 50);
    SearchConfig cfg;
    cfg.T = 1 + static_cast<int>(rng.below(150));
    const int bits = rng.uniform() < 0.5 ? 4 : 8;
    const auto r = grid_search_scale<double>(x, bits, cfg);
    const int want = grid_oracle(x, bits, r.candidates);
    EXPECT_EQ(r.index, want) << "trial " << trial;
    EXPECT_EQ(r.threshold, r.candidates[want]);
  }
}

TEST(GridSearch, LargeInputsAreStrided) {
  Rng rng(6);
  std::vector<float> x(5000);
  for (auto& v : x) v = static_cast<float>(rng.normal());
  SearchConfig full, capped;
  full.max_samples = 0;
  capped.max_samples = 1000;
  const auto a = grid_search_scale<float>(x, 8, full);
  const auto b = grid_search_scale<float>(x, 8, capped);
  // candidates come from the full range; errors from every fifth value
  EXPECT_EQ(a.candidates, b.candidates);
  std::vector<float> every5;
  for (std::size_t i = 0; i < x.size(); i += 5) every5.push_back(x[i]);
  EXPECT_EQ(b.sse, quant_sse<float>(every5, b.params));
  for (double t : b.candidates) {
    EXPECT_GE(quant_sse<float>(every5, scale_from_range(-t, t, 8)), b.sse);
  }
}

TEST(CalibrateLayer, MaxMinWeights) {
  const Tensor<double> w({2, 1, 1, 1}, std::vector<double>{-2.0, 1.0});
  const std::vector<Tensor<double>> acts{Tensor<double>({1, 1, 1, 2}, std::vector<double>{0.5, 1.0})};
  const auto lc = calibrate_layer<double>(acts, w, CalibMethod::maxmin, 8, SearchConfig{});
  EXPECT_DOUBLE_EQ(lc.w.scale, 4.0 / 255.0);
  EXPECT_DOUBLE_EQ(lc.a.scale, 2.0 / 255.0);
}

TEST(CalibrateLayer, GridNeverWorseThanMaxMin) {
  Rng rng(12);
  const Tensor<double> w({4, 2, 3, 3}, std::vector<double>(72, 0.1));
  std::vector<Tensor<double>> acts;
  for (int b = 0; b < 3; ++b) {
    Tensor<double> a({1, 2, 8, 8});
    for (auto& v : a.vec()) v = std::max(0.0, rng.normal(0.0, 1.0));
    a[5] = 30.0 * (b + 1);
    acts.push_back(a);
  }
  const auto g = calibrate_layer<double>(acts, w, CalibMethod::maxmin_grid, 8, SearchConfig{});
  EXPECT_LE(g.a_sse, g.a_sse_maxmin);
}

TEST(CalibrateLayer, EntropyRangeInsideMaxMin) {
  Rng rng(13);
  const Tensor<double> w({1, 1, 1, 1}, std::vector<double>{1.0});
  Tensor<double> a({1, 1, 100, 100});
  for (auto& v : a.vec()) v = rng.uniform(-1, 1);
  const std::vector<Tensor<double>> acts{a};
  const auto e = calibrate_layer<double>(acts, w, CalibMethod::entropy, 8, SearchConfig{});
  const auto m = calibrate_layer<double>(acts, w, CalibMethod::maxmin, 8, SearchConfig{});
  EXPECT_LE(e.a.scale, m.a.scale);
  EXPECT_THROW(calibrate_layer<double>(std::span<const Tensor<double>>{}, w, CalibMethod::maxmin, 8,
                                       SearchConfig{}),
               ParamError);
}

}  // namespace
}  // namespace lptq
