#pragma once

#include <vector>

#include "dynseg/tensor.hpp"

// Differentiable tensor operations. Layout is NCHW throughout. Binary
// elementwise ops accept exact-shape operands or a single-element operand.
namespace dynseg::ops {

// Cross-correlation: out[n,o,i,j] = bias[o] + sum_{c,u,v} w[o,c,u,v] * x[n,c,i*s-p+u, j*s-p+v].
// `bias` may be undefined.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                      Index stride = 1, Index pad = 0);

template <typename T> BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> leaky_relu(const BasicTensor<T>& x, T slope);
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& x);

template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& x, T c);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& x, T c);

template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x);

// Per-(sample, channel) normalization over H*W followed by a per-channel affine.
template <typename T>
BasicTensor<T> instance_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                             const BasicTensor<T>& beta, T eps = T(1e-5));

// Half-pixel (align-corners false) bilinear resize with edge clamping.
template <typename T>
BasicTensor<T> interpolate_bilinear(const BasicTensor<T>& x, Index out_h, Index out_w);

template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x, Index axis);
template <typename T> BasicTensor<T> max_pool2d(const BasicTensor<T>& x, Index kernel, Index stride);
// [N,C,H,W] -> [N,C]
template <typename T> BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);
// x [N,in], w [out,in], b [out] (may be undefined) -> [N,out]
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs, Index axis);
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape);

// Forward value `hard` (a constant), gradient routed unchanged to `soft`.
template <typename T>
BasicTensor<T> straight_through(const std::vector<T>& hard, const BasicTensor<T>& soft);

}  // namespace dynseg::ops
