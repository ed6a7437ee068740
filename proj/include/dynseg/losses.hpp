#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dynseg/flops.hpp"
#include "dynseg/quantization.hpp"
#include "dynseg/tensor.hpp"
#include "dynseg/unet.hpp"

namespace dynseg::loss {

inline constexpr double kGiga = 1e9;

// Sum over foreground channels c >= 1 of
//   1 - (2 * sum(p_c * g_c) + smooth) / (sum(p_c) + sum(g_c) + smooth).
template <typename T>
BasicTensor<T> dice_loss(const BasicTensor<T>& probs, const BasicTensor<T>& onehot, T smooth = T(1e-5));

// Pixel-averaged cross-entropy of softmax(logits) over the channel axis.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& onehot);

// Raw labels {0,1,2,4} of an H x W slice to a [1, classes, H, W] one-hot.
template <typename T>
BasicTensor<T> onehot_from_labels(std::span<const std::uint8_t> labels, Index height, Index width,
                                  Index num_classes = 4);

template <typename T>
struct StageCost {
  double nominal_flops = 0.0;
  int bit = quant::kFullPrecisionBits;  // used when bit_probs is undefined
  BasicTensor<T> bit_probs;             // [K] over the candidate set
};

// Cost of one routing action: always-executed networks plus its stages.
template <typename T>
struct BranchCost {
  double fixed_flops = 0.0;
  std::vector<StageCost<T>> stages;
};

template <typename T>
BranchCost<T> branch_cost(double fixed_flops, const std::vector<seg::StageRecord<T>>& records);

// Expected cost in GFLOPs:
//   sum_d P(d) * (fixed_d + sum_stages sum_k P(b_k) * nominal * cost_factor(b_k)).
// `policy_probs` has one entry per branch.
template <typename T>
BasicTensor<T> gflops_loss(const BasicTensor<T>& policy_probs, const std::vector<BranchCost<T>>& branches,
                           const quant::BitCandidateSet& candidates,
                           flops::CostModel model = flops::CostModel::Linear);

struct LossBreakdown {
  double dice = 0.0;
  double gflops = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

template <typename T>
BasicTensor<T> total_loss(const BasicTensor<T>& dice, const BasicTensor<T>& gflops, double lambda);

LossBreakdown breakdown(double dice, double gflops, double lambda);

}  // namespace dynseg::loss
