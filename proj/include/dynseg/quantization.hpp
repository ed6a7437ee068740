#pragma once

#include <string>
#include <vector>

#include "dynseg/params.hpp"
#include "dynseg/rng.hpp"
#include "dynseg/tensor.hpp"

namespace dynseg::quant {

// A bit-width at or above this value runs the layer unquantized.
inline constexpr int kFullPrecisionBits = 32;

class BitCandidateSet {
 public:
  BitCandidateSet() : bits_{8, 16} {}
  // Throws std::invalid_argument unless non-empty, strictly increasing, all >= 2.
  explicit BitCandidateSet(std::vector<int> bits);

  const std::vector<int>& bits() const { return bits_; }
  std::size_t size() const { return bits_.size(); }
  int min() const { return bits_.front(); }
  int max() const { return bits_.back(); }
  std::string to_string() const;  // "8,16"
  static BitCandidateSet parse(const std::string& text);

 private:
  std::vector<int> bits_;
};

// r(b) = 2^(b-1)
double grid_half_range(int bit);

// round(clip(t, -a, a) * r/a) * a/r with half-away-from-zero rounding. Backward
// treats rounding as identity and passes gradient only where |t| <= a.
// a == 0 yields zeros; a < 0 or bit < 2 is rejected.
template <typename T>
BasicTensor<T> quantize(const BasicTensor<T>& t, int bit, T a);

struct FeatureStats {
  double spatial_grad_mean = 0.0;
  double channel_std_mean = 0.0;
};

// Mean absolute neighbour difference over H and W (averaged per sample and
// channel) and the spatial mean of the per-position standard deviation across
// channels. Requires H, W >= 2.
template <typename T>
FeatureStats compute_feature_stats(const BasicTensor<T>& x);

// Two statistics in, K bit-width probabilities out: 2 -> 16 -> K with a leaky
// ReLU hidden layer. The output layer starts at zero so the first decisions
// are uniform.
template <typename T>
class BitSelector {
 public:
  static constexpr Index kHidden = 16;

  BitSelector(std::size_t num_candidates, std::uint64_t seed);

  // Returns softmax(logits / temperature) as a [K] tensor.
  BasicTensor<T> forward(const BasicTensor<T>& stats, T temperature = T(1)) const;
  BasicTensor<T> forward(const FeatureStats& stats, T temperature = T(1)) const;

  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  std::size_t num_candidates() const { return num_candidates_; }

 private:
  std::size_t num_candidates_;
  ParamSet<T> params_;
  BasicTensor<T> w1_, b1_, w2_, b2_;
};

template <typename T>
struct BitChoice {
  int stage_index = 0;
  BasicTensor<T> probs;     // [K]
  int chosen_bit = 0;       // forward value: argmax, ties to the lower bit
  BasicTensor<T> soft_bit;  // sum_k b_k * P_k, carries the backward path
};

template <typename T>
BitChoice<T> ste_select(const BasicTensor<T>& probs, const BitCandidateSet& candidates,
                        int stage_index = 0);

// conv2d on quantized input and weight, scales a = max|.| recomputed per call.
// bit >= kFullPrecisionBits is the plain convolution.
template <typename T>
BasicTensor<T> quantized_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                const BasicTensor<T>& bias, int bit, Index stride, Index pad);

template <typename T>
BasicTensor<T> quantized_linear(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                const BasicTensor<T>& bias, int bit);

template <typename T>
T max_abs(const BasicTensor<T>& t);

}  // namespace dynseg::quant
