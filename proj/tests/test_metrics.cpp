#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "dynseg/metrics.hpp"
#include "dynseg/rng.hpp"
#include "metric_oracles.hpp"

using namespace dynseg;
using namespace dynseg::eval;
using dynseg::testing::BruteForce;
using dynseg::testing::random_mask;

TEST(RegionMasks, Examples) {
  std::vector<std::uint8_t> zeros(8, 0);
  auto r = region_masks(zeros);
  EXPECT_EQ(std::count(r.wt.begin(), r.wt.end(), 1), 0);
  std::vector<std::uint8_t> one{0, 0, 4, 0};
  r = region_masks(one);
  EXPECT_EQ(r.et[2], 1);
  EXPECT_EQ(r.tc[2], 1);
  EXPECT_EQ(r.wt[2], 1);
  std::vector<std::uint8_t> l12{1, 2, 0, 1};
  r = region_masks(l12);
  EXPECT_EQ(r.et, (Mask{0, 0, 0, 0}));
  EXPECT_EQ(r.tc, (Mask{1, 0, 0, 1}));
  EXPECT_EQ(r.wt, (Mask{1, 1, 0, 1}));
  std::vector<std::uint8_t> bad{0, 3};
  EXPECT_THROW(region_masks(bad), std::invalid_argument);
}

TEST(RegionMasks, NestingOnRandomLabels) {
  Rng rng(0);
  const std::uint8_t values[] = {0, 1, 2, 4};
  std::vector<std::uint8_t> labels(500);
  for (auto& l : labels) l = values[rng.below(4)];
  auto r = region_masks(labels);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    EXPECT_LE(r.et[i], r.tc[i]);
    EXPECT_LE(r.tc[i], r.wt[i]);
  }
}

TEST(Dice, Examples) {
  Mask a{1, 1, 0, 0}, b{0, 0, 1, 1};
  EXPECT_EQ(dice_score(a, a), 1.0);
  EXPECT_EQ(dice_score(a, b), 0.0);
  EXPECT_NEAR(dice_score(Mask{1, 0, 0}, Mask{1, 1, 0}), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(dice_score(Mask{0, 0}, Mask{0, 0}), 1.0);
  EXPECT_EQ(dice_score(Mask{1, 0, 1}, Mask{1, 1, 0}), dice_score(Mask{1, 1, 0}, Mask{1, 0, 1}));
  EXPECT_THROW(dice_score(Mask{1}, Mask{1, 0}), ShapeError);
}

TEST(Hd95, Examples) {
  const Dims d{8, 8, 4};
  Mask a(d.size(), 0), b(d.size(), 0);
  a[(2 * 8 + 2) * 4 + 1] = 1;
  b[(5 * 8 + 2) * 4 + 1] = 1;
  EXPECT_EQ(hd95(a, a, d, {}), 0.0);
  EXPECT_EQ(hd95(a, b, d, {}), 3.0);
  EXPECT_EQ(hd95(a, b, d, {1.0, 2.0, 1.0}), 6.0);
  Mask empty(d.size(), 0);
  EXPECT_EQ(hd95(empty, b, d, {}), kHd95Sentinel);
  EXPECT_EQ(hd95(a, empty, d, {}), kHd95Sentinel);
  EXPECT_EQ(hd95(empty, empty, d, {}), 0.0);
}

TEST(Hd95, NearestRankPercentile) {
  std::vector<double> v(20);
  for (int i = 0; i < 20; ++i) v[std::size_t(i)] = 20 - i;
  EXPECT_EQ(nearest_rank_percentile(v, 95), 19.0);
  EXPECT_EQ(nearest_rank_percentile({7.0}, 95), 7.0);
  EXPECT_EQ(nearest_rank_percentile({1.0, 2.0}, 50), 1.0);
  EXPECT_THROW(nearest_rank_percentile({}, 95), std::invalid_argument);
}

TEST(Hd95, SurfaceIsSixConnectedBoundary) {
  const Dims d{5, 5, 5};
  Mask cube(d.size(), 0);
  for (Index y = 1; y < 4; ++y)
    for (Index x = 1; x < 4; ++x)
      for (Index z = 1; z < 4; ++z) cube[std::size_t((y * 5 + x) * 5 + z)] = 1;
  auto s = surface(cube, d);
  EXPECT_EQ(std::count(s.begin(), s.end(), 1), 26);
  EXPECT_EQ(s[(2 * 5 + 2) * 5 + 2], 0);
  Mask full(d.size(), 1);
  auto sf = surface(full, d);
  EXPECT_EQ(std::count(sf.begin(), sf.end(), 1), 125 - 27);
}

TEST(Hd95, MatchesBruteForceOnRandomMasks) {
  const Dims d{8, 8, 4};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    auto a = random_mask(d, rng, rng.uniform(0.05, 0.6));
    auto b = random_mask(d, rng, rng.uniform(0.05, 0.6));
    if (std::count(a.begin(), a.end(), 1) == 0) a[0] = 1;
    if (std::count(b.begin(), b.end(), 1) == 0) b[d.size() - 1] = 1;
    BruteForce bf{d, {}};
    EXPECT_EQ(hd95(a, b, d, {}), bf.hd(a, b)) << "seed " << seed;
    EXPECT_EQ(dice_score(a, b), bf.dice(a, b)) << "seed " << seed;
    EXPECT_EQ(hd95(a, b, d, {}), hd95(b, a, d, {}));
    const data::Spacing aniso{0.8, 1.3, 2.5};
    BruteForce bfa{d, aniso};
    EXPECT_NEAR(hd95(a, b, d, aniso), bfa.hd(a, b), 1e-12) << "seed " << seed;
  }
}

TEST(Hd95, GrowsWhenSeparatedMaskMovesAway) {
  const Dims d{8, 16, 4};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Mask g(d.size(), 0);
    for (Index y = 0; y < 8; ++y)
      for (Index x = 0; x < 5; ++x)
        for (Index z = 0; z < 4; ++z) g[std::size_t((y * 16 + x) * 4 + z)] = rng.bernoulli(0.5);
    g[0] = 1;
    std::vector<std::array<Index, 3>> pts;
    for (int i = 0; i < 6; ++i) pts.push_back({Index(rng.below(8)), Index(6 + rng.below(3)), Index(rng.below(4))});
    double previous = 0.0;
    for (Index shift = 0; shift < 6; ++shift) {
      Mask p(d.size(), 0);
      for (const auto& q : pts) p[std::size_t((q[0] * 16 + q[1] + shift) * 4 + q[2])] = 1;
      const double h = hd95(p, g, d, {});
      EXPECT_GT(h, previous);
      previous = h;
    }
  }
}

TEST(EvaluateCase, PerfectAndEmptyPredictions) {
  const Dims d{8, 8, 4};
  std::vector<std::uint8_t> gt(d.size(), 0);
  gt[(3 * 8 + 3) * 4 + 1] = 4;
  gt[(3 * 8 + 4) * 4 + 1] = 1;
  gt[(4 * 8 + 4) * 4 + 1] = 2;
  auto perfect = evaluate_case("c", gt, gt, d, {}, nullptr);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(perfect.dice[i], 1.0);
    EXPECT_EQ(perfect.hd95[i], 0.0);
  }
  std::vector<std::uint8_t> zeros(d.size(), 0);
  auto empty = evaluate_case("c", zeros, gt, d, {}, nullptr);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(empty.dice[i], 0.0);
    EXPECT_EQ(empty.hd95[i], kHd95Sentinel);
  }
  EXPECT_THROW(evaluate_case("c", zeros, gt, Dims{8, 8, 3}, {}, nullptr), ShapeError);
}

TEST(EvaluateCase, LedgerHistogramsIgnoreSliceOrder) {
  const Dims d{4, 4, 3};
  std::vector<std::uint8_t> gt(d.size(), 0);
  gt[5] = 2;
  FlopsLedger a("c"), b("c");
  const char* decisions[] = {"skip", "crop32", "whole"};
  for (int s = 0; s < 3; ++s) {
    a.begin_slice(s, decisions[s]);
    a.add(CostSource::Policy, -1, 1e6, 32);
    if (s > 0) a.add(CostSource::Stage, 0, 1e8, s == 1 ? 8 : 16);
  }
  for (int s = 2; s >= 0; --s) {
    b.begin_slice(s, decisions[s]);
    b.add(CostSource::Policy, -1, 1e6, 32);
    if (s > 0) b.add(CostSource::Stage, 0, 1e8, s == 1 ? 8 : 16);
  }
  auto ra = evaluate_case("c", gt, gt, d, {}, &a), rb = evaluate_case("c", gt, gt, d, {}, &b);
  EXPECT_EQ(ra.to_json(), rb.to_json());
  EXPECT_EQ(ra.decisions.at("skip"), 1u);
  EXPECT_EQ(ra.decisions.at("crop"), 1u);
  EXPECT_EQ(ra.bits_per_stage.at(0).at(8), 1u);
  EXPECT_NEAR(ra.gflops_per_case, 0.003 + 0.025 + 0.05, 1e-12);
}

TEST(EvaluateSplit, MeansAndReportFiles) {
  CaseReport a, b;
  a.case_id = "a";
  b.case_id = "b";
  a.dice = {1.0, 0.8, 0.6};
  b.dice = {0.0, 0.6, 0.4};
  a.hd95 = {0.0, 2.0, 4.0};
  b.hd95 = {kHd95Sentinel, 4.0, 6.0};
  a.gflops_per_case = 2.0;
  b.gflops_per_case = 4.0;
  auto s = evaluate_split({a, b});
  EXPECT_DOUBLE_EQ(s.mean_dice[WT], 0.7);
  EXPECT_DOUBLE_EQ(s.mean_hd95[TC], 5.0);
  EXPECT_DOUBLE_EQ(s.mean_gflops_per_case, 3.0);
  const auto text = s.to_text();
  EXPECT_NE(text.find("Dice_ET  Dice_WT  Dice_TC  HD95_ET  HD95_WT  HD95_TC  GFLOPs/case  GFLOPs/slice"),
            std::string::npos)
      << text;
  EXPECT_NE(text.find("mean"), std::string::npos);
  auto dir = std::filesystem::temp_directory_path() / "dynseg_test_report";
  write_report(s, dir);
  nlohmann::json j;
  std::ifstream(dir / "report.json") >> j;
  EXPECT_DOUBLE_EQ(j.at("aggregate").at("dice").at("WT").get<double>(), 0.7);
  EXPECT_EQ(j.at("cases").size(), 2u);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.txt"));
}
