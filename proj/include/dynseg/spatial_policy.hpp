#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dynseg/params.hpp"
#include "dynseg/rng.hpp"
#include "dynseg/tensor.hpp"

namespace dynseg::policy {

enum class Action { Skip, Crop, Whole };

struct PolicyEntry {
  Action action = Action::Whole;
  Index crop_size = 0;  // only for Crop

  std::string label() const;  // "skip", "crop96", "whole"
  bool operator==(const PolicyEntry&) const = default;
};

// Ordered routing actions. Skip and Whole appear exactly once; crops are
// listed by increasing size between them.
class PolicySpace {
 public:
  PolicySpace() : PolicySpace(std::vector<Index>{96}) {}
  explicit PolicySpace(std::vector<Index> crop_sizes);

  // "skip,96,whole" or "96" (skip/whole implied).
  static PolicySpace parse(const std::string& text);
  std::string to_string() const;

  const std::vector<PolicyEntry>& entries() const { return entries_; }
  const PolicyEntry& operator[](std::size_t i) const { return entries_.at(i); }
  std::size_t size() const { return entries_.size(); }
  std::size_t skip_index() const { return 0; }
  std::size_t whole_index() const { return entries_.size() - 1; }
  std::vector<Index> crop_sizes() const;

  // Rejects crop sizes that are not strictly inside (0, min(H, W)).
  void validate_for(Index height, Index width) const;

 private:
  std::vector<PolicyEntry> entries_;
};

struct Center {
  double x = 0.0;
  double y = 0.0;
};

struct PolicyDecision {
  std::vector<double> probs;
  std::size_t chosen = 0;
  std::optional<Center> center;  // present iff the chosen entry is a crop
};

// x in [P/2, W - P/2], y in [P/2, H - P/2].
Center clamp_center(Center c, Index crop_size, Index height, Index width);

// Same bounds on a [2] tensor (x, y); gradient passes where the value is inside.
template <typename T>
BasicTensor<T> clamp_center(const BasicTensor<T>& center, Index crop_size, Index height, Index width);

// Four stride-2 blocks (conv4x4 -> instance norm -> leaky ReLU), 8/16/32/64
// channels, then global average pooling to a [1,64] descriptor.
template <typename T>
class ConvTrunk {
 public:
  static constexpr Index kWidth = 64;
  ConvTrunk(Index in_channels, ParamSet<T>& params, Rng& rng);
  BasicTensor<T> forward(const BasicTensor<T>& x) const;

 private:
  struct Block {
    BasicTensor<T> w, b, gamma, beta;
  };
  std::vector<Block> blocks_;
};

template <typename T>
class PolicyNet {
 public:
  PolicyNet(Index in_channels, std::size_t num_actions, std::uint64_t seed);
  // [1,C,H,W] -> logits [K]
  BasicTensor<T> forward(const BasicTensor<T>& slice) const;
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

 private:
  ParamSet<T> params_;
  std::optional<ConvTrunk<T>> trunk_;
  BasicTensor<T> head_w_, head_b_;
  std::size_t num_actions_;
};

template <typename T>
class CropPositionNet {
 public:
  CropPositionNet(Index in_channels, std::uint64_t seed);
  // Sigmoid head mapped to pixel units: [2] = (s_x * W, s_y * H), unclamped.
  BasicTensor<T> raw_center(const BasicTensor<T>& slice) const;
  // raw_center followed by clamp_center for a P x P window.
  BasicTensor<T> forward(const BasicTensor<T>& slice, Index crop_size) const;
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

 private:
  ParamSet<T> params_;
  std::optional<ConvTrunk<T>> trunk_;
  BasicTensor<T> head_w_, head_b_;
};

template <typename T>
struct GumbelSample {
  BasicTensor<T> probs;  // soft sample, or straight-through one-hot when hard
  std::size_t index = 0; // argmax of the soft sample
};

// softmax((logits + g) / temperature), g = -log(-log(u)). A null `noise`
// generator sets g = 0.
template <typename T>
GumbelSample<T> gumbel_softmax(const BasicTensor<T>& logits, T temperature, Rng* noise, bool hard);

// Samples image[c, y_c + i - P/2, x_c + j - P/2] bilinearly for i, j in [0, P).
// Differentiable with respect to the image and the [2] center tensor (x, y).
template <typename T>
BasicTensor<T> extract_crop(const BasicTensor<T>& image, const BasicTensor<T>& center, Index crop_size);

// Writes a [1,C,P,P] patch onto a zero H x W canvas so that it covers
// [center - P/2, center + P/2). Fractional centers splat bilinearly, the
// adjoint of extract_crop; integer centers place values exactly.
template <typename T>
BasicTensor<T> paste_translate(const BasicTensor<T>& features, Center center, Index crop_size,
                               Index height, Index width);

}  // namespace dynseg::policy
