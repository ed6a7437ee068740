#include "dynseg/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace dynseg {

template <typename T>
void adam_step(ParamSet<T>& params, OptimState<T>& state, double lr, const AdamHyper& hyper) {
  auto& entries = params.entries();
  if (state.moments.size() != entries.size()) {
    state.moments.resize(entries.size());
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(hyper.eps);

  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& t = entries[p].second;
    auto& mom = state.moments[p];
    if (mom.first.size() != t.numel()) {
      mom.first.assign(t.numel(), T(0));
      mom.second.assign(t.numel(), T(0));
    }
    if (!t.requires_grad() || !t.has_grad()) continue;
    auto g = t.grad();
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      mom.first[i] = b1 * mom.first[i] + (T(1) - b1) * g[i];
      mom.second[i] = b2 * mom.second[i] + (T(1) - b2) * g[i] * g[i];
      w[i] -= step_size * mom.first[i] / (std::sqrt(mom.second[i]) * inv_sqrt_bc2 + eps);
    }
  }
}

double poly_warmup_lr(std::int64_t iter, std::int64_t total_iters, std::int64_t warmup_iters,
                      double base_lr) {
  if (total_iters <= warmup_iters) {
    throw std::invalid_argument("poly_warmup_lr: total_iters must exceed warmup_iters");
  }
  if (iter < 0 || iter > total_iters) {
    throw std::invalid_argument("poly_warmup_lr: iter outside [0, total_iters]");
  }
  if (iter < warmup_iters) {
    return base_lr * static_cast<double>(iter) / static_cast<double>(warmup_iters);
  }
  const double progress = static_cast<double>(iter - warmup_iters) /
                          static_cast<double>(total_iters - warmup_iters);
  return base_lr * std::pow(1.0 - progress, 0.9);
}

template <typename T>
void append_optim_buffers(const ParamSet<T>& params, const OptimState<T>& state,
                          const std::string& prefix, std::vector<NamedBuffer>& out) {
  out.push_back({prefix + "step", Shape{1}, {static_cast<float>(state.step)}});
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& [name, t] = params.entries()[p];
    std::vector<float> m(t.numel(), 0.0f), v(t.numel(), 0.0f);
    if (p < state.moments.size() && state.moments[p].first.size() == t.numel()) {
      m.assign(state.moments[p].first.begin(), state.moments[p].first.end());
      v.assign(state.moments[p].second.begin(), state.moments[p].second.end());
    }
    out.push_back({prefix + "m/" + name, t.shape(), std::move(m)});
    out.push_back({prefix + "v/" + name, t.shape(), std::move(v)});
  }
}

template <typename T>
void restore_optim_buffers(const ParamSet<T>& params, OptimState<T>& state,
                           const std::string& prefix, const std::vector<NamedBuffer>& buffers) {
  std::unordered_map<std::string, const NamedBuffer*> index;
  for (const auto& b : buffers) index[b.name] = &b;
  auto find = [&](const std::string& key) -> const NamedBuffer& {
    auto it = index.find(key);
    if (it == index.end()) throw std::runtime_error("checkpoint is missing optimizer tensor " + key);
    return *it->second;
  };
  state.step = static_cast<std::int64_t>(find(prefix + "step").values.at(0));
  state.moments.assign(params.size(), {});
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& [name, t] = params.entries()[p];
    const auto& m = find(prefix + "m/" + name);
    const auto& v = find(prefix + "v/" + name);
    if (m.values.size() != t.numel() || v.values.size() != t.numel()) {
      throw ShapeError("optimizer moments for " + name + " do not match parameter shape");
    }
    state.moments[p].first.assign(m.values.begin(), m.values.end());
    state.moments[p].second.assign(v.values.begin(), v.values.end());
  }
}

template void adam_step(ParamSet<float>&, OptimState<float>&, double, const AdamHyper&);
template void adam_step(ParamSet<double>&, OptimState<double>&, double, const AdamHyper&);
template void append_optim_buffers(const ParamSet<float>&, const OptimState<float>&,
                                   const std::string&, std::vector<NamedBuffer>&);
template void restore_optim_buffers(const ParamSet<float>&, OptimState<float>&, const std::string&,
                                    const std::vector<NamedBuffer>&);

}  // namespace dynseg
