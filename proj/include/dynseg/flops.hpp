#pragma once

#include <string>

#include "dynseg/tensor.hpp"

// Nominal FLOPs counts (2 per multiply-accumulate, plus one per bias add) and
// the bit-width cost model that turns them into effective FLOPs.
namespace dynseg::flops {

enum class CostModel {
  Linear,     // b / 32
  Quadratic,  // (b / 32)^2
};

CostModel parse_cost_model(const std::string& name);  // "linear" | "quadratic"
std::string to_string(CostModel model);

// 1.0 for bit >= 32 (full precision); rejects bit < 2.
double cost_factor(int bit, CostModel model = CostModel::Linear);

// Conv from an input shape [N,C,H,W] and weight [Cout,Cin,kh,kw].
double flops_conv(const Shape& in_shape, const Shape& weight_shape, Index stride, Index pad,
                  bool bias);
// Same count from already known output size.
double conv_flops(Index c_in, Index c_out, Index kh, Index kw, Index out_h, Index out_w, bool bias);
double flops_linear(Index in_features, Index out_features, bool bias);

// The always-executed decision networks on an H x W slice.
double policy_net_flops(Index in_channels, Index height, Index width, Index num_actions);
double crop_net_flops(Index in_channels, Index height, Index width);
double selector_flops(Index num_candidates);

}  // namespace dynseg::flops
