#pragma once

#include <cstdint>
#include <vector>

#include "dynseg/params.hpp"

namespace dynseg {

template <typename T>
struct OptimState {
  struct Moments {
    std::vector<T> first;
    std::vector<T> second;
  };
  std::vector<Moments> moments;  // aligned with ParamSet entry order
  std::int64_t step = 0;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update over every parameter that holds a gradient.
// Parameters without a gradient (frozen or unused this step) are left as-is.
template <typename T>
void adam_step(ParamSet<T>& params, OptimState<T>& state, double lr, const AdamHyper& hyper = {});

// Linear warm-up to base_lr, then poly decay with power 0.9.
double poly_warmup_lr(std::int64_t iter, std::int64_t total_iters, std::int64_t warmup_iters,
                      double base_lr);

template <typename T>
void append_optim_buffers(const ParamSet<T>& params, const OptimState<T>& state,
                          const std::string& prefix, std::vector<NamedBuffer>& out);
template <typename T>
void restore_optim_buffers(const ParamSet<T>& params, OptimState<T>& state,
                           const std::string& prefix, const std::vector<NamedBuffer>& buffers);

}  // namespace dynseg
