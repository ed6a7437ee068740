#include "dynseg/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "dynseg/init.hpp"
#include "dynseg/ops.hpp"

namespace dynseg::quant {

BitCandidateSet::BitCandidateSet(std::vector<int> bits) : bits_(std::move(bits)) {
  if (bits_.empty()) throw std::invalid_argument("bit candidate set is empty");
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    if (bits_[i] < 2) throw std::invalid_argument("bit candidates must be >= 2");
    if (i > 0 && bits_[i] <= bits_[i - 1]) {
      throw std::invalid_argument("bit candidates must be strictly increasing: " + to_string());
    }
  }
}

std::string BitCandidateSet::to_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < bits_.size(); ++i) os << (i ? "," : "") << bits_[i];
  return os.str();
}

BitCandidateSet BitCandidateSet::parse(const std::string& text) {
  std::vector<int> bits;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      bits.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw std::invalid_argument("malformed bit candidate list: " + text);
    }
  }
  return BitCandidateSet(std::move(bits));
}

double grid_half_range(int bit) { return std::ldexp(1.0, bit - 1); }

template <typename T>
T max_abs(const BasicTensor<T>& t) {
  T m = 0;
  for (T v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
BasicTensor<T> quantize(const BasicTensor<T>& t, int bit, T a) {
  if (bit < 2) throw std::invalid_argument("quantize: bit must be >= 2");
  if (!(a >= T(0))) throw std::invalid_argument("quantize: scale a must be positive");
  std::vector<T> out(t.numel(), T(0));
  if (a > T(0)) {
    const T r = static_cast<T>(grid_half_range(bit));
    const T to_grid = r / a;
    const T step = a / r;
    const auto src = t.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      const T c = std::clamp(src[i], -a, a);
      out[i] = std::round(c * to_grid) * step;  // std::round: half away from zero
    }
  }
  return make_result<T>("quantize", t.shape(), std::move(out), {t}, [t, a](const TensorNode<T>& self) {
    auto& g = grad_of(t);
    const auto src = t.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (std::abs(src[i]) <= a) g[i] += self.grad[i];
    }
  });
}

template <typename T>
FeatureStats compute_feature_stats(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("compute_feature_stats: expected [N,C,H,W], got " + shape_str(x.shape()));
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < 2 || W < 2) throw ShapeError("compute_feature_stats: H and W must be >= 2");
  const auto d = x.data();
  FeatureStats stats;

  const double pairs = static_cast<double>((H - 1) * W + H * (W - 1));
  double grad_total = 0.0;
  for (Index p = 0; p < N * C; ++p) {
    const T* m = d.data() + p * H * W;
    double s = 0.0;
    for (Index i = 0; i < H; ++i) {
      for (Index j = 0; j < W; ++j) {
        if (i + 1 < H) s += std::abs(static_cast<double>(m[(i + 1) * W + j]) - m[i * W + j]);
        if (j + 1 < W) s += std::abs(static_cast<double>(m[i * W + j + 1]) - m[i * W + j]);
      }
    }
    grad_total += s / pairs;
  }
  stats.spatial_grad_mean = grad_total / static_cast<double>(N * C);

  double std_total = 0.0;
  const Index HW = H * W;
  for (Index n = 0; n < N; ++n) {
    for (Index pos = 0; pos < HW; ++pos) {
      double mu = 0.0;
      for (Index c = 0; c < C; ++c) mu += d[static_cast<std::size_t>((n * C + c) * HW + pos)];
      mu /= static_cast<double>(C);
      double var = 0.0;
      for (Index c = 0; c < C; ++c) {
        const double dv = d[static_cast<std::size_t>((n * C + c) * HW + pos)] - mu;
        var += dv * dv;
      }
      std_total += std::sqrt(var / static_cast<double>(C));
    }
  }
  stats.channel_std_mean = std_total / static_cast<double>(N * HW);
  return stats;
}

template <typename T>
BitSelector<T>::BitSelector(std::size_t num_candidates, std::uint64_t seed)
    : num_candidates_(num_candidates) {
  if (num_candidates == 0) throw std::invalid_argument("BitSelector: no candidates");
  Rng rng(seed);
  const Index K = static_cast<Index>(num_candidates);
  w1_ = params_.add("fc1.weight", he_normal<T>({kHidden, 2}, 2, rng));
  b1_ = params_.add("fc1.bias", BasicTensor<T>::zeros({kHidden}));
  w2_ = params_.add("fc2.weight", BasicTensor<T>::zeros({K, kHidden}));
  b2_ = params_.add("fc2.bias", BasicTensor<T>::zeros({K}));
}

template <typename T>
BasicTensor<T> BitSelector<T>::forward(const BasicTensor<T>& stats, T temperature) const {
  if (!(temperature > T(0))) throw std::invalid_argument("BitSelector: temperature must be > 0");
  auto in = ops::reshape(stats, {1, 2});
  auto h = ops::leaky_relu(ops::linear(in, w1_, b1_), T(0.01));
  auto logits = ops::linear(h, w2_, b2_);
  auto probs = ops::softmax(ops::scale(logits, T(1) / temperature), 1);
  return ops::reshape(probs, {static_cast<Index>(num_candidates_)});
}

template <typename T>
BasicTensor<T> BitSelector<T>::forward(const FeatureStats& stats, T temperature) const {
  BasicTensor<T> in({2}, {static_cast<T>(stats.spatial_grad_mean), static_cast<T>(stats.channel_std_mean)});
  return forward(in, temperature);
}

template <typename T>
BitChoice<T> ste_select(const BasicTensor<T>& probs, const BitCandidateSet& candidates, int stage_index) {
  const auto& bits = candidates.bits();
  if (probs.numel() != bits.size()) {
    throw ShapeError("ste_select: " + std::to_string(probs.numel()) + " probabilities for " +
                     std::to_string(bits.size()) + " candidates");
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < bits.size(); ++k) {
    if (probs.at(k) > probs.at(best)) best = k;  // strict: ties stay on the lower bit
  }
  std::vector<T> values(bits.begin(), bits.end());
  BasicTensor<T> bit_values(probs.shape(), std::move(values));
  BitChoice<T> choice;
  choice.stage_index = stage_index;
  choice.probs = probs;
  choice.chosen_bit = bits[best];
  choice.soft_bit = ops::sum(ops::mul(probs, bit_values));
  return choice;
}

template <typename T>
BasicTensor<T> quantized_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                const BasicTensor<T>& bias, int bit, Index stride, Index pad) {
  if (bit >= kFullPrecisionBits) return ops::conv2d(x, w, bias, stride, pad);
  auto xq = quantize(x, bit, max_abs(x));
  auto wq = quantize(w, bit, max_abs(w));
  return ops::conv2d(xq, wq, bias, stride, pad);
}

template <typename T>
BasicTensor<T> quantized_linear(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                const BasicTensor<T>& bias, int bit) {
  if (bit >= kFullPrecisionBits) return ops::linear(x, w, bias);
  return ops::linear(quantize(x, bit, max_abs(x)), quantize(w, bit, max_abs(w)), bias);
}

#define DYNSEG_INSTANTIATE_QUANT(T)                                                               \
  template T max_abs(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> quantize(const BasicTensor<T>&, int, T);                                \
  template FeatureStats compute_feature_stats(const BasicTensor<T>&);                             \
  template class BitSelector<T>;                                                                  \
  template BitChoice<T> ste_select(const BasicTensor<T>&, const BitCandidateSet&, int);           \
  template BasicTensor<T> quantized_conv2d(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                           const BasicTensor<T>&, int, Index, Index);             \
  template BasicTensor<T> quantized_linear(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                           const BasicTensor<T>&, int);

DYNSEG_INSTANTIATE_QUANT(float)
DYNSEG_INSTANTIATE_QUANT(double)

}  // namespace dynseg::quant
