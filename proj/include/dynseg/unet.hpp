#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dynseg/params.hpp"
#include "dynseg/quantization.hpp"
#include "dynseg/spatial_policy.hpp"
#include "dynseg/tensor.hpp"

namespace dynseg::seg {

struct UNetConfig {
  Index in_channels = 4;
  Index num_classes = 4;  // background + three tumour labels
  Index base_channels = 16;
  Index depth = 4;  // number of 2x downsamplings

  void validate() const;
  // Input H and W must be divisible by 2^depth.
  void validate_input(Index height, Index width) const;
  Index divisor() const { return Index{1} << depth; }
};

enum class StageKind { Encoder, Bottleneck, Decoder, Final };

struct ConvSpec {
  std::string name;  // parameter prefix, e.g. "enc1.conv2"
  Index c_in = 0;
  Index c_out = 0;
  Index kernel = 3;
};

// One quantization stage. Quantized stages come first in execution order
// (encoder levels, bottleneck, decoder levels depth-1..1); the last entry is
// the full-precision final stage (decoder level 0 plus the 1x1 head).
struct StageSpec {
  int index = 0;
  std::string name;
  StageKind kind = StageKind::Encoder;
  int level = 0;  // convolutions run at input size / 2^level
  bool quantized = true;
  std::vector<ConvSpec> convs;
};

std::vector<StageSpec> stage_iter(const UNetConfig& cfg);
std::size_t num_quantized_stages(const UNetConfig& cfg);

// Nominal FLOPs of every stage (quantized stages then final) for an input of
// the given size.
std::vector<double> stage_nominal_flops(const UNetConfig& cfg, Index height, Index width);

// Raw label values {0,1,2,4} <-> contiguous channels {0,1,2,3}.
int label_to_channel(int label);
int channel_to_label(int channel);

inline constexpr double kSkipLogit = 10.0;

template <typename T>
struct StageBits {
  int bit = quant::kFullPrecisionBits;
  BasicTensor<T> probs;  // selector output [K]; undefined when the bit was forced
};

// Called once per quantized stage with that stage's input features.
template <typename T>
using BitsFn = std::function<StageBits<T>(int stage, const BasicTensor<T>& stage_input)>;

template <typename T>
BitsFn<T> fixed_bits(int bit);

// One selector per quantized stage, fed with the detached statistics of the
// stage input; the hard bit is the STE argmax. `selectors` must outlive the
// returned function.
template <typename T>
BitsFn<T> selector_bits(const std::vector<quant::BitSelector<T>>& selectors,
                        const quant::BitCandidateSet& candidates, T temperature = T(1));

template <typename T>
struct StageRecord {
  int stage = 0;
  int bit = quant::kFullPrecisionBits;
  double nominal_flops = 0.0;
  BasicTensor<T> probs;
};

template <typename T>
struct SegOutput {
  BasicTensor<T> logits;  // [1, classes, H, W] at the original slice size
  std::vector<StageRecord<T>> stages;  // empty for Skip
};

template <typename T>
class UNet {
 public:
  UNet(UNetConfig cfg, std::uint64_t seed);

  const UNetConfig& config() const { return cfg_; }
  const std::vector<StageSpec>& stages() const { return stages_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  // Skip emits constant background logits; Whole runs every stage on the
  // slice; Crop runs the quantized stages on the window around `center`
  // (a [2] tensor (x, y), differentiable), pastes the features back and runs
  // the final stage at full size. `center` is ignored unless cropping.
  SegOutput<T> forward_routed(const BasicTensor<T>& slice, const policy::PolicyEntry& decision,
                              const BasicTensor<T>& center, const BitsFn<T>& bits) const;

  SegOutput<T> forward(const BasicTensor<T>& slice, const BitsFn<T>& bits) const {
    return forward_routed(slice, policy::PolicyEntry{policy::Action::Whole, 0}, {}, bits);
  }

 private:
  struct Conv {
    BasicTensor<T> w, b, gamma, beta;
  };
  BasicTensor<T> run_block(const std::vector<Conv>& convs, BasicTensor<T> x, int bit) const;

  UNetConfig cfg_;
  std::vector<StageSpec> stages_;
  ParamSet<T> params_;
  std::vector<std::vector<Conv>> blocks_;  // aligned with stages_
  BasicTensor<T> head_w_, head_b_;
};

}  // namespace dynseg::seg
