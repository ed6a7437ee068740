#include "dynseg/unet.hpp"

#include <cmath>
#include <stdexcept>

#include "dynseg/flops.hpp"
#include "dynseg/init.hpp"
#include "dynseg/ops.hpp"

namespace dynseg::seg {

void UNetConfig::validate() const {
  if (depth < 2) throw std::invalid_argument("UNetConfig: depth must be >= 2");
  if (depth > 8) throw std::invalid_argument("UNetConfig: depth must be <= 8");
  if (in_channels < 1 || num_classes < 2 || base_channels < 1) {
    throw std::invalid_argument("UNetConfig: channel counts must be positive and classes >= 2");
  }
}

void UNetConfig::validate_input(Index height, Index width) const {
  const Index d = divisor();
  if (height < d || width < d || height % d != 0 || width % d != 0) {
    throw ShapeError("input " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by 2^depth = " + std::to_string(d));
  }
}

std::vector<StageSpec> stage_iter(const UNetConfig& cfg) {
  cfg.validate();
  const auto width = [&](Index level) { return cfg.base_channels << level; };
  const auto double_conv = [](const std::string& name, Index c_in, Index c_out) {
    return std::vector<ConvSpec>{{name + ".conv1", c_in, c_out, 3}, {name + ".conv2", c_out, c_out, 3}};
  };
  std::vector<StageSpec> out;
  Index c_in = cfg.in_channels;
  for (Index l = 0; l < cfg.depth; ++l) {
    const std::string name = "enc" + std::to_string(l);
    out.push_back({0, name, StageKind::Encoder, static_cast<int>(l), true, double_conv(name, c_in, width(l))});
    c_in = width(l);
  }
  out.push_back({0, "bottleneck", StageKind::Bottleneck, static_cast<int>(cfg.depth), true,
                 double_conv("bottleneck", c_in, width(cfg.depth))});
  for (Index l = cfg.depth - 1; l >= 1; --l) {
    const std::string name = "dec" + std::to_string(l);
    out.push_back({0, name, StageKind::Decoder, static_cast<int>(l), true,
                   double_conv(name, width(l + 1) + width(l), width(l))});
  }
  StageSpec final{0, "final", StageKind::Final, 0, false, double_conv("final", width(1) + width(0), width(0))};
  final.convs.push_back({"final.head", width(0), cfg.num_classes, 1});
  out.push_back(std::move(final));
  for (std::size_t i = 0; i < out.size(); ++i) out[i].index = static_cast<int>(i);
  return out;
}

std::size_t num_quantized_stages(const UNetConfig& cfg) { return stage_iter(cfg).size() - 1; }

std::vector<double> stage_nominal_flops(const UNetConfig& cfg, Index height, Index width) {
  cfg.validate_input(height, width);
  std::vector<double> out;
  for (const auto& s : stage_iter(cfg)) {
    const Index h = height >> s.level, w = width >> s.level;
    double total = 0.0;
    for (const auto& c : s.convs) total += flops::conv_flops(c.c_in, c.c_out, c.kernel, c.kernel, h, w, true);
    out.push_back(total);
  }
  return out;
}

int label_to_channel(int label) {
  switch (label) {
    case 0: return 0;
    case 1: return 1;
    case 2: return 2;
    case 4: return 3;
    default: throw std::invalid_argument("label value " + std::to_string(label) + " not in {0,1,2,4}");
  }
}

int channel_to_label(int channel) {
  static constexpr int kLabels[] = {0, 1, 2, 4};
  if (channel < 0 || channel > 3) throw std::invalid_argument("class channel out of range");
  return kLabels[channel];
}

template <typename T>
BitsFn<T> fixed_bits(int bit) {
  if (bit < 2) throw std::invalid_argument("fixed_bits: bit must be >= 2");
  return [bit](int, const BasicTensor<T>&) { return StageBits<T>{bit, {}}; };
}

template <typename T>
BitsFn<T> selector_bits(const std::vector<quant::BitSelector<T>>& selectors,
                        const quant::BitCandidateSet& candidates, T temperature) {
  return [&selectors, candidates, temperature](int stage, const BasicTensor<T>& input) {
    if (stage < 0 || static_cast<std::size_t>(stage) >= selectors.size()) {
      throw std::out_of_range("no bit selector for stage " + std::to_string(stage));
    }
    const auto stats = quant::compute_feature_stats(input);
    auto probs = selectors[static_cast<std::size_t>(stage)].forward(stats, temperature);
    const auto choice = quant::ste_select(probs, candidates, stage);
    return StageBits<T>{choice.chosen_bit, probs};
  };
}

template <typename T>
UNet<T>::UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(cfg), stages_(stage_iter(cfg)) {
  Rng rng(seed);
  for (const auto& s : stages_) {
    std::vector<Conv> convs;
    for (const auto& c : s.convs) {
      const Index fan_in = c.c_in * c.kernel * c.kernel;
      if (s.kind == StageKind::Final && &c == &s.convs.back()) {
        head_w_ = params_.add(c.name + ".weight", he_normal<T>({c.c_out, c.c_in, 1, 1}, fan_in, rng));
        head_b_ = params_.add(c.name + ".bias", BasicTensor<T>::zeros({c.c_out}));
        continue;
      }
      Conv conv;
      conv.w = params_.add(c.name + ".weight", he_normal<T>({c.c_out, c.c_in, c.kernel, c.kernel}, fan_in, rng));
      conv.b = params_.add(c.name + ".bias", BasicTensor<T>::zeros({c.c_out}));
      const std::string norm = c.name.substr(0, c.name.size() - 5) + "norm" + c.name.back();
      conv.gamma = params_.add(norm + ".weight", BasicTensor<T>::full({c.c_out}, T(1)));
      conv.beta = params_.add(norm + ".bias", BasicTensor<T>::zeros({c.c_out}));
      convs.push_back(std::move(conv));
    }
    blocks_.push_back(std::move(convs));
  }
}

template <typename T>
BasicTensor<T> UNet<T>::run_block(const std::vector<Conv>& convs, BasicTensor<T> x, int bit) const {
  for (const auto& c : convs) {
    x = quant::quantized_conv2d(x, c.w, c.b, bit, 1, 1);
    x = ops::instance_norm(x, c.gamma, c.beta, T(1e-5));
    x = ops::leaky_relu(x, T(0.01));
  }
  return x;
}

template <typename T>
SegOutput<T> UNet<T>::forward_routed(const BasicTensor<T>& slice, const policy::PolicyEntry& decision,
                                     const BasicTensor<T>& center, const BitsFn<T>& bits) const {
  if (slice.rank() != 4 || slice.dim(0) != 1 || slice.dim(1) != cfg_.in_channels) {
    throw ShapeError("forward_routed: expected [1," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                     shape_str(slice.shape()));
  }
  const Index H = slice.dim(2), W = slice.dim(3);
  cfg_.validate_input(H, W);
  SegOutput<T> out;

  if (decision.action == policy::Action::Skip) {
    std::vector<T> v(static_cast<std::size_t>(cfg_.num_classes * H * W), static_cast<T>(-kSkipLogit));
    std::fill(v.begin(), v.begin() + H * W, static_cast<T>(kSkipLogit));
    out.logits = BasicTensor<T>({1, cfg_.num_classes, H, W}, std::move(v));
    return out;
  }

  const bool crop = decision.action == policy::Action::Crop;
  Index ph = H, pw = W;
  policy::Center c;
  BasicTensor<T> x = slice;
  if (crop) {
    const Index P = decision.crop_size;
    if (P <= 0 || P > std::min(H, W) || P % cfg_.divisor() != 0) {
      throw ShapeError("crop size " + std::to_string(P) + " is invalid for a " + std::to_string(H) + "x" +
                       std::to_string(W) + " slice (needs P <= min(H, W) and P divisible by " +
                       std::to_string(cfg_.divisor()) + ")");
    }
    if (!center.defined() || center.numel() != 2) {
      throw std::invalid_argument("forward_routed: crop decision needs a [2] center tensor");
    }
    c = {static_cast<double>(center.at(0)), static_cast<double>(center.at(1))};
    const auto clamped = policy::clamp_center(c, P, H, W);
    if (std::abs(clamped.x - c.x) > 1e-6 || std::abs(clamped.y - c.y) > 1e-6) {
      throw std::invalid_argument("forward_routed: crop center (" + std::to_string(c.x) + ", " +
                                  std::to_string(c.y) + ") is outside the valid range");
    }
    ph = pw = P;
    x = policy::extract_crop(slice, center, P);
  }

  const auto inner_flops = stage_nominal_flops(cfg_, ph, pw);
  const auto full_flops = crop ? stage_nominal_flops(cfg_, H, W) : inner_flops;

  const auto run_quantized = [&](int s, const BasicTensor<T>& in) {
    auto choice = bits(s, in);
    out.stages.push_back({s, choice.bit, inner_flops[static_cast<std::size_t>(s)], choice.probs});
    return run_block(blocks_[static_cast<std::size_t>(s)], in, choice.bit);
  };

  const auto depth = static_cast<std::size_t>(cfg_.depth);
  std::vector<BasicTensor<T>> skips(depth);
  int s = 0;
  for (std::size_t l = 0; l < depth; ++l, ++s) {
    skips[l] = run_quantized(s, x);
    x = ops::max_pool2d(skips[l], 2, 2);
  }
  x = run_quantized(s++, x);
  for (std::size_t l = depth - 1; l >= 1; --l, ++s) {
    auto up = ops::interpolate_bilinear(x, skips[l].dim(2), skips[l].dim(3));
    x = run_quantized(s, ops::concat<T>({up, skips[l]}, 1));
  }

  // Decoder features sit at half the window resolution; bring them to the
  // window's full-resolution footprint before the final stage.
  auto up = ops::interpolate_bilinear(x, ph, pw);
  auto skip0 = skips[0];
  if (crop) {
    up = policy::paste_translate(up, c, ph, H, W);
    skip0 = policy::paste_translate(skip0, c, ph, H, W);
  }
  auto h = run_block(blocks_.back(), ops::concat<T>({up, skip0}, 1), quant::kFullPrecisionBits);
  out.logits = ops::conv2d(h, head_w_, head_b_, 1, 0);
  out.stages.push_back({s, quant::kFullPrecisionBits, full_flops.back(), {}});
  return out;
}

template BitsFn<float> fixed_bits<float>(int);
template BitsFn<double> fixed_bits<double>(int);
template BitsFn<float> selector_bits(const std::vector<quant::BitSelector<float>>&,
                                     const quant::BitCandidateSet&, float);
template BitsFn<double> selector_bits(const std::vector<quant::BitSelector<double>>&,
                                      const quant::BitCandidateSet&, double);
template class UNet<float>;
template class UNet<double>;

}  // namespace dynseg::seg
