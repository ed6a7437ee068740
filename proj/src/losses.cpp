#include "dynseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dynseg/ops.hpp"

namespace dynseg::loss {

template <typename T>
BasicTensor<T> dice_loss(const BasicTensor<T>& probs, const BasicTensor<T>& onehot, T smooth) {
  if (probs.shape() != onehot.shape()) {
    throw ShapeError("dice_loss: probs " + shape_str(probs.shape()) + " vs one-hot " +
                     shape_str(onehot.shape()));
  }
  if (probs.rank() != 4 || probs.dim(1) < 2) throw ShapeError("dice_loss: expected [N,C,H,W] with C >= 2");
  const Index N = probs.dim(0), C = probs.dim(1), M = probs.dim(2) * probs.dim(3);
  const T* p = probs.data().data();
  const T* g = onehot.data().data();
  // Per foreground channel: intersection and denominator over the whole batch.
  std::vector<T> inter(static_cast<std::size_t>(C), T(0)), denom(static_cast<std::size_t>(C), T(0));
  for (Index n = 0; n < N; ++n) {
    for (Index c = 1; c < C; ++c) {
      const Index off = (n * C + c) * M;
      for (Index i = 0; i < M; ++i) {
        inter[c] += p[off + i] * g[off + i];
        denom[c] += p[off + i] + g[off + i];
      }
    }
  }
  T value = 0;
  for (Index c = 1; c < C; ++c) value += T(1) - (T(2) * inter[c] + smooth) / (denom[c] + smooth);
  return make_result<T>("dice_loss", Shape{}, {value}, {probs},
                        [probs, onehot, inter, denom, smooth, N, C, M](const TensorNode<T>& self) {
                          auto& gp = grad_of(probs);
                          const T* g = onehot.data().data();
                          const T up = self.grad[0];
                          for (Index c = 1; c < C; ++c) {
                            const T d = denom[c] + smooth, num = T(2) * inter[c] + smooth;
                            const T a = T(2) / d, b = num / (d * d);
                            for (Index n = 0; n < N; ++n) {
                              const Index off = (n * C + c) * M;
                              for (Index i = 0; i < M; ++i) gp[off + i] += up * (b - a * g[off + i]);
                            }
                          }
                        });
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& onehot) {
  if (logits.shape() != onehot.shape()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs one-hot " +
                     shape_str(onehot.shape()));
  }
  if (logits.rank() != 4) throw ShapeError("cross_entropy: expected [N,C,H,W]");
  const Index N = logits.dim(0), C = logits.dim(1), M = logits.dim(2) * logits.dim(3);
  const T* z = logits.data().data();
  const T* g = onehot.data().data();
  std::vector<T> probs(logits.numel());
  T value = 0;
  for (Index n = 0; n < N; ++n) {
    for (Index i = 0; i < M; ++i) {
      T top = z[n * C * M + i];
      for (Index c = 1; c < C; ++c) top = std::max(top, z[(n * C + c) * M + i]);
      T denom = 0;
      for (Index c = 0; c < C; ++c) denom += std::exp(z[(n * C + c) * M + i] - top);
      const T log_denom = std::log(denom);
      for (Index c = 0; c < C; ++c) {
        const Index k = (n * C + c) * M + i;
        probs[static_cast<std::size_t>(k)] = std::exp(z[k] - top) / denom;
        value -= g[k] * (z[k] - top - log_denom);
      }
    }
  }
  const T inv = T(1) / static_cast<T>(N * M);
  return make_result<T>("cross_entropy", Shape{}, {value * inv}, {logits},
                        [logits, onehot, probs = std::move(probs), inv](const TensorNode<T>& self) {
                          auto& gz = grad_of(logits);
                          const T* g = onehot.data().data();
                          const T up = self.grad[0] * inv;
                          for (std::size_t k = 0; k < probs.size(); ++k) gz[k] += up * (probs[k] - g[k]);
                        });
}

template <typename T>
BasicTensor<T> onehot_from_labels(std::span<const std::uint8_t> labels, Index height, Index width,
                                  Index num_classes) {
  const Index M = height * width;
  if (static_cast<Index>(labels.size()) != M) throw ShapeError("onehot_from_labels: label count mismatch");
  std::vector<T> v(static_cast<std::size_t>(num_classes * M), T(0));
  for (Index i = 0; i < M; ++i) {
    const int c = seg::label_to_channel(labels[static_cast<std::size_t>(i)]);
    if (c >= num_classes) throw std::invalid_argument("onehot_from_labels: class exceeds channel count");
    v[static_cast<std::size_t>(c * M + i)] = T(1);
  }
  return BasicTensor<T>({1, num_classes, height, width}, std::move(v));
}

template <typename T>
BranchCost<T> branch_cost(double fixed_flops, const std::vector<seg::StageRecord<T>>& records) {
  BranchCost<T> out{fixed_flops, {}};
  for (const auto& r : records) out.stages.push_back({r.nominal_flops, r.bit, r.probs});
  return out;
}

template <typename T>
BasicTensor<T> gflops_loss(const BasicTensor<T>& policy_probs, const std::vector<BranchCost<T>>& branches,
                           const quant::BitCandidateSet& candidates, flops::CostModel model) {
  if (policy_probs.numel() != branches.size()) {
    throw ShapeError("gflops_loss: " + std::to_string(policy_probs.numel()) + " policy probabilities for " +
                     std::to_string(branches.size()) + " branches");
  }
  std::vector<T> factors;
  for (int b : candidates.bits()) factors.push_back(static_cast<T>(flops::cost_factor(b, model)));

  std::vector<BasicTensor<T>> branch_totals;
  for (const auto& br : branches) {
    double constant = br.fixed_flops / kGiga;
    std::vector<BasicTensor<T>> terms;
    for (const auto& s : br.stages) {
      if (!s.bit_probs.defined()) {
        constant += s.nominal_flops * flops::cost_factor(s.bit, model) / kGiga;
        continue;
      }
      if (s.bit_probs.numel() != factors.size()) {
        throw ShapeError("gflops_loss: bit probabilities do not match the candidate set");
      }
      const auto K = static_cast<Index>(factors.size());
      std::vector<T> w(factors.size());
      for (std::size_t k = 0; k < w.size(); ++k) w[k] = factors[k] * static_cast<T>(s.nominal_flops / kGiga);
      terms.push_back(ops::sum(ops::mul(ops::reshape(s.bit_probs, {K}), BasicTensor<T>({K}, std::move(w)))));
    }
    BasicTensor<T> total = BasicTensor<T>::scalar(static_cast<T>(constant));
    for (const auto& t : terms) total = ops::add(total, t);
    branch_totals.push_back(ops::reshape(total, {1}));
  }
  auto costs = ops::concat(branch_totals, 0);
  return ops::sum(ops::mul(ops::reshape(policy_probs, {static_cast<Index>(branches.size())}), costs));
}

template <typename T>
BasicTensor<T> total_loss(const BasicTensor<T>& dice, const BasicTensor<T>& gflops, double lambda) {
  if (lambda < 0) throw std::invalid_argument("total_loss: lambda must be >= 0");
  return ops::add(dice, ops::scale(gflops, static_cast<T>(lambda)));
}

LossBreakdown breakdown(double dice, double gflops, double lambda) {
  return {dice, gflops, lambda, dice + lambda * gflops};
}

#define DYNSEG_INSTANTIATE_LOSSES(T)                                                                       \
  template BasicTensor<T> dice_loss(const BasicTensor<T>&, const BasicTensor<T>&, T);                     \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> onehot_from_labels<T>(std::span<const std::uint8_t>, Index, Index, Index);      \
  template BranchCost<T> branch_cost(double, const std::vector<seg::StageRecord<T>>&);                    \
  template BasicTensor<T> gflops_loss(const BasicTensor<T>&, const std::vector<BranchCost<T>>&,           \
                                      const quant::BitCandidateSet&, flops::CostModel);                   \
  template BasicTensor<T> total_loss(const BasicTensor<T>&, const BasicTensor<T>&, double);

DYNSEG_INSTANTIATE_LOSSES(float)
DYNSEG_INSTANTIATE_LOSSES(double)

}  // namespace dynseg::loss
