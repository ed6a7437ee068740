#include <gtest/gtest.h>

#include <cmath>

#include "dynseg/ops.hpp"
#include "dynseg/quantization.hpp"
#include "gradcheck.hpp"

using namespace dynseg;
using namespace dynseg::quant;
using dynseg::testing::grad_check;
using dynseg::testing::random_projection;
using dynseg::testing::random_tensor;

TEST(CandidateSet, Validation) {
  EXPECT_EQ(BitCandidateSet().bits(), (std::vector<int>{8, 16}));
  EXPECT_THROW(BitCandidateSet(std::vector<int>{}), std::invalid_argument);
  EXPECT_THROW(BitCandidateSet({16, 8}), std::invalid_argument);
  EXPECT_THROW(BitCandidateSet({8, 8}), std::invalid_argument);
  EXPECT_THROW(BitCandidateSet({1, 8}), std::invalid_argument);
  EXPECT_EQ(BitCandidateSet::parse("8,12,16").bits(), (std::vector<int>{8, 12, 16}));
  EXPECT_THROW(BitCandidateSet::parse("8,x"), std::invalid_argument);
}

TEST(Quantize, Examples) {
  EXPECT_DOUBLE_EQ(quantize(Tensor64({1}, {0.3}), 8, 1.0).item(), 0.296875);
  EXPECT_DOUBLE_EQ(quantize(Tensor64({1}, {2.5}), 8, 1.0).item(), 1.0);
  for (double a : {0.37, 1.0, 5.5}) {
    for (int bit : {2, 4, 8, 16}) {
      auto q = quantize(Tensor64({3}, {-a, 0.0, a}), bit, a);
      EXPECT_EQ(q.at(0), -a);
      EXPECT_EQ(q.at(1), 0.0);
      EXPECT_EQ(q.at(2), a);
    }
  }
}

TEST(Quantize, RoundsHalfAwayFromZero) {
  // 0.5 / (a/r) = 0.5 grid steps at r=2 (bit 2), a=1: 0.25 -> 0.5 * ... steps of 0.5
  auto q = quantize(Tensor64({2}, {0.25, -0.25}), 2, 1.0);
  EXPECT_DOUBLE_EQ(q.at(0), 0.5);
  EXPECT_DOUBLE_EQ(q.at(1), -0.5);
}

TEST(Quantize, DegenerateAndInvalidScale) {
  auto z = quantize(Tensor64({2}, {0.0, 0.0}), 8, 0.0);
  EXPECT_EQ(z.at(0), 0.0);
  EXPECT_THROW(quantize(Tensor64({1}, {0.1}), 8, -1.0), std::invalid_argument);
  EXPECT_THROW(quantize(Tensor64({1}, {0.1}), 1, 1.0), std::invalid_argument);
}

TEST(Quantize, AlgebraicInvariantsOnRandomTensors) {
  Rng rng(2024);
  auto t = random_tensor({2000}, rng, -3.0, 3.0, false);
  const double a = 1.7;
  for (int bit : {2, 4, 8, 16}) {
    const double r = grid_half_range(bit);
    auto q = quantize(t, bit, a);
    auto qq = quantize(q, bit, a);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double clipped = std::clamp(t.at(i), -a, a);
      EXPECT_LE(std::abs(q.at(i) - clipped), a / (2 * r) * (1 + 1e-12));
      EXPECT_EQ(qq.at(i), q.at(i));
    }
  }
  auto q8 = quantize(t, 8, a), q16 = quantize(t, 16, a);
  auto q8in16 = quantize(q8, 16, a);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double clipped = std::clamp(t.at(i), -a, a);
    EXPECT_LE(std::abs(q16.at(i) - clipped), std::abs(q8.at(i) - clipped));
    EXPECT_EQ(q8in16.at(i), q8.at(i));
  }
}

TEST(Quantize, GradientIsStraightThroughInsideClip) {
  Tensor64 t({3}, {-2.0, 0.3, 0.9}, true);
  ops::sum(ops::scale(quantize(t, 4, 1.0), 2.0)).backward();
  EXPECT_EQ(t.grad()[0], 0.0);
  EXPECT_EQ(t.grad()[1], 2.0);
  EXPECT_EQ(t.grad()[2], 2.0);
}

TEST(FeatureStats, Examples) {
  auto c = compute_feature_stats(Tensor64::full({1, 3, 4, 4}, 2.5));
  EXPECT_EQ(c.spatial_grad_mean, 0.0);
  EXPECT_EQ(c.channel_std_mean, 0.0);

  auto s = compute_feature_stats(Tensor64({1, 1, 2, 2}, {0, 1, 2, 3}));
  EXPECT_DOUBLE_EQ(s.spatial_grad_mean, 1.5);
  EXPECT_EQ(s.channel_std_mean, 0.0);

  // Two channels differing by 2 everywhere: std across channels = 1.
  Tensor64 two({1, 2, 2, 2}, {0, 0, 0, 0, 2, 2, 2, 2});
  EXPECT_DOUBLE_EQ(compute_feature_stats(two).channel_std_mean, 1.0);
  EXPECT_THROW(compute_feature_stats(Tensor64::zeros({1, 1, 1, 4})), ShapeError);
}

TEST(FeatureStats, ShiftInvariant) {
  Rng rng(4);
  auto x = random_tensor({2, 3, 5, 4}, rng, -1, 1, false);
  auto shifted = ops::add_scalar(x, 3.25);
  auto a = compute_feature_stats(x), b = compute_feature_stats(shifted);
  EXPECT_NEAR(a.spatial_grad_mean, b.spatial_grad_mean, 1e-12);
  EXPECT_NEAR(a.channel_std_mean, b.channel_std_mean, 1e-12);
  EXPECT_GE(a.spatial_grad_mean, 0.0);
  EXPECT_GE(a.channel_std_mean, 0.0);
}

TEST(BitSelector, UniformAtInitAndHighTemperature) {
  BitSelector<double> sel(2, 1);
  auto p = sel.forward(FeatureStats{0.4, 1.3});
  EXPECT_DOUBLE_EQ(p.at(0), 0.5);
  EXPECT_DOUBLE_EQ(p.at(1), 0.5);

  Rng rng(6);
  for (auto& [_, t] : sel.params().entries()) {
    auto d = t.mutable_data();
    for (auto& v : d) v = rng.uniform(-2, 2);
  }
  auto sharp = sel.forward(FeatureStats{0.4, 1.3}, 1.0);
  EXPECT_GT(std::abs(sharp.at(0) - 0.5), 1e-3);
  auto flat = sel.forward(FeatureStats{0.4, 1.3}, 1e6);
  EXPECT_LT(std::abs(flat.at(0) - 0.5), 1e-4);
  EXPECT_NEAR(flat.at(0) + flat.at(1), 1.0, 1e-12);
}

TEST(BitSelector, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    BitSelector<double> sel(3, seed);
    Rng rng(seed + 10);
    for (auto& [_, t] : sel.params().entries()) {
      for (auto& v : t.mutable_data()) v = rng.uniform(-1, 1);
    }
    std::vector<Tensor64> inputs;
    for (auto& [_, t] : sel.params().entries()) inputs.push_back(t);
    auto stats = random_tensor({2}, rng, 0.1, 2.0);
    inputs.push_back(stats);
    auto r = grad_check(
        [&](const std::vector<Tensor64>& in) { return random_projection(sel.forward(in.back(), 0.7), seed); },
        inputs);
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

TEST(SteSelect, Examples) {
  BitCandidateSet cands;
  auto c1 = ste_select(Tensor64({2}, {0.9, 0.1}), cands);
  EXPECT_EQ(c1.chosen_bit, 8);
  EXPECT_NEAR(c1.soft_bit.item(), 8.8, 1e-12);

  auto c2 = ste_select(Tensor64({2}, {0.5, 0.5}), cands);
  EXPECT_EQ(c2.chosen_bit, 8);
  EXPECT_DOUBLE_EQ(c2.soft_bit.item(), 12.0);

  Tensor64 probs({2}, {0.3, 0.7}, true);
  auto c3 = ste_select(probs, cands, 4);
  EXPECT_EQ(c3.chosen_bit, 16);
  EXPECT_EQ(c3.stage_index, 4);
  c3.soft_bit.backward();
  EXPECT_EQ(probs.grad()[0], 8.0);
  EXPECT_EQ(probs.grad()[1], 16.0);

  EXPECT_THROW(ste_select(Tensor64({3}, {0.2, 0.3, 0.5}), cands), ShapeError);
}

TEST(QuantizedConv, FineGridMatchesPlainConv) {
  Rng rng(3);
  auto x = random_tensor({1, 3, 6, 6}, rng, -1, 1, false);
  auto w = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5, false);
  auto b = random_tensor({4}, rng, -0.1, 0.1, false);
  auto ref = ops::conv2d(x, w, b, 1, 1);
  auto q = quantized_conv2d(x, w, b, 24, 1, 1);
  for (std::size_t i = 0; i < ref.numel(); ++i) {
    EXPECT_NEAR(q.at(i), ref.at(i), 1e-4 * std::max(1.0, std::abs(ref.at(i))));
  }
  auto fp = quantized_conv2d(x, w, b, kFullPrecisionBits, 1, 1);
  for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_EQ(fp.at(i), ref.at(i));
}

TEST(QuantizedConv, GridPointsAreExact) {
  Rng rng(9);
  const double aw = 0.75, ax = 2.0;
  std::vector<double> wv(2 * 2 * 3 * 3), xv(2 * 5 * 5);
  for (auto& v : wv) v = static_cast<double>(static_cast<int>(rng.below(257)) - 128) * aw / 128.0;
  for (auto& v : xv) v = static_cast<double>(static_cast<int>(rng.below(257)) - 128) * ax / 128.0;
  wv[0] = aw;   // pins max|w| = aw
  xv[3] = -ax;  // pins max|x| = ax
  Tensor64 w({2, 2, 3, 3}, wv), x({1, 2, 5, 5}, xv);
  auto ref = ops::conv2d(x, w, Tensor64{}, 1, 1);
  auto q = quantized_conv2d(x, w, Tensor64{}, 8, 1, 1);
  for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_EQ(q.at(i), ref.at(i));
}

TEST(QuantizedConv, SteWeightGradientEqualsConvGradientOnQuantizedInput) {
  Rng rng(3);
  auto x = random_tensor({1, 2, 5, 5}, rng, -1, 1, false);
  auto w = random_tensor({3, 2, 3, 3}, rng, -1, 1, true);
  random_projection(quantized_conv2d(x, w, Tensor64{}, 8, 1, 1), 17).backward();
  std::vector<double> ste(w.grad().begin(), w.grad().end());

  auto xq = quantize(x, 8, max_abs(x));
  auto w_ref = Tensor64(w.shape(), std::vector<double>(w.data().begin(), w.data().end()), true);
  random_projection(ops::conv2d(xq, w_ref, Tensor64{}, 1, 1), 17).backward();
  const double a = max_abs(w);
  for (std::size_t i = 0; i < ste.size(); ++i) {
    if (std::abs(w.at(i)) < a) EXPECT_DOUBLE_EQ(ste[i], w_ref.grad()[i]);
  }
}
