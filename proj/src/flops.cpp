#include "dynseg/flops.hpp"

#include <stdexcept>

#include "dynseg/quantization.hpp"
#include "dynseg/spatial_policy.hpp"

namespace dynseg::flops {

CostModel parse_cost_model(const std::string& name) {
  if (name == "linear") return CostModel::Linear;
  if (name == "quadratic") return CostModel::Quadratic;
  throw std::invalid_argument("unknown cost model '" + name + "' (expected linear or quadratic)");
}

std::string to_string(CostModel model) { return model == CostModel::Linear ? "linear" : "quadratic"; }

double cost_factor(int bit, CostModel model) {
  if (bit < 2) throw std::invalid_argument("cost_factor: bit must be >= 2");
  if (bit >= quant::kFullPrecisionBits) return 1.0;
  const double f = static_cast<double>(bit) / quant::kFullPrecisionBits;
  return model == CostModel::Linear ? f : f * f;
}

double conv_flops(Index c_in, Index c_out, Index kh, Index kw, Index out_h, Index out_w, bool bias) {
  const double outputs = static_cast<double>(out_h) * static_cast<double>(out_w) * static_cast<double>(c_out);
  const double macs = static_cast<double>(kh * kw * c_in) * outputs;
  return 2.0 * macs + (bias ? outputs : 0.0);
}

double flops_conv(const Shape& in_shape, const Shape& weight_shape, Index stride, Index pad, bool bias) {
  if (in_shape.size() != 4 || weight_shape.size() != 4 || in_shape[1] != weight_shape[1]) {
    throw ShapeError("flops_conv: incompatible shapes " + shape_str(in_shape) + " and " +
                     shape_str(weight_shape));
  }
  const Index oh = (in_shape[2] + 2 * pad - weight_shape[2]) / stride + 1;
  const Index ow = (in_shape[3] + 2 * pad - weight_shape[3]) / stride + 1;
  return static_cast<double>(in_shape[0]) *
         conv_flops(weight_shape[1], weight_shape[0], weight_shape[2], weight_shape[3], oh, ow, bias);
}

double flops_linear(Index in_features, Index out_features, bool bias) {
  return 2.0 * static_cast<double>(in_features * out_features) +
         (bias ? static_cast<double>(out_features) : 0.0);
}

namespace {

double trunk_flops(Index in_channels, Index height, Index width) {
  double total = 0.0;
  Index c = in_channels, h = height, w = width;
  for (Index c_out : {8, 16, 32, 64}) {
    h /= 2;
    w /= 2;
    total += conv_flops(c, c_out, 4, 4, h, w, true);
    c = c_out;
  }
  return total;
}

}  // namespace

double policy_net_flops(Index in_channels, Index height, Index width, Index num_actions) {
  return trunk_flops(in_channels, height, width) +
         flops_linear(policy::ConvTrunk<float>::kWidth, num_actions, true);
}

double crop_net_flops(Index in_channels, Index height, Index width) {
  return trunk_flops(in_channels, height, width) + flops_linear(policy::ConvTrunk<float>::kWidth, 2, true);
}

double selector_flops(Index num_candidates) {
  return flops_linear(2, quant::BitSelector<float>::kHidden, true) +
         flops_linear(quant::BitSelector<float>::kHidden, num_candidates, true);
}

}  // namespace dynseg::flops
