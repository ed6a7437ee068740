#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dynseg/config.hpp"
#include "dynseg/data.hpp"
#include "dynseg/ledger.hpp"
#include "dynseg/params.hpp"
#include "dynseg/quantization.hpp"
#include "dynseg/spatial_policy.hpp"
#include "dynseg/unet.hpp"

namespace dynseg {

struct ParamGroup {
  std::string prefix;  // checkpoint name prefix, e.g. "policy/"
  ParamSet<float>* params = nullptr;
};

// Policy network, crop-position network, segmentation U-Net and one bit
// selector per quantized stage, built from a RunConfig. Every sub-network
// draws its initial weights from a seed derived from cfg.seed.
class DynamicModel {
 public:
  explicit DynamicModel(const RunConfig& cfg);
  // Parameter tensors are shared handles, so a copy would alias the weights.
  DynamicModel(const DynamicModel&) = delete;
  DynamicModel& operator=(const DynamicModel&) = delete;
  DynamicModel(DynamicModel&&) = default;
  DynamicModel& operator=(DynamicModel&&) = default;

  const RunConfig& config() const { return cfg_; }
  policy::PolicyNet<float>& policy_net() { return policy_; }
  const policy::PolicyNet<float>& policy_net() const { return policy_; }
  policy::CropPositionNet<float>& crop_net() { return crop_; }
  const policy::CropPositionNet<float>& crop_net() const { return crop_; }
  seg::UNet<float>& unet() { return unet_; }
  const seg::UNet<float>& unet() const { return unet_; }
  std::vector<quant::BitSelector<float>>& selectors() { return selectors_; }
  const std::vector<quant::BitSelector<float>>& selectors() const { return selectors_; }

  // policy/, crop/, unet/, selector0/ ... in a fixed order.
  std::vector<ParamGroup> param_groups();

  // Nominal FLOPs of the networks that run outside the U-Net stages for one
  // slice of the configured size.
  double policy_flops() const;
  double crop_flops() const;
  double selector_flops() const;  // one selector

  // Hard bit choices for inference: the selectors when quantization is on,
  // full precision otherwise.
  seg::BitsFn<float> inference_bits() const;

 private:
  RunConfig cfg_;
  policy::PolicyNet<float> policy_;
  policy::CropPositionNet<float> crop_;
  seg::UNet<float> unet_;
  std::vector<quant::BitSelector<float>> selectors_;
};

void save_model(DynamicModel& model, const std::filesystem::path& dir);
// Restores parameters saved by save_model; the checkpoint must have been
// written for the same architecture.
void load_model(DynamicModel& model, const std::filesystem::path& dir);

struct InferOptions {
  // "skip", "whole", "crop" (smallest crop size) or an exact label such as "crop32".
  std::optional<std::string> force_policy;
  std::optional<int> force_bits;
};

// Resolves a force_policy string against the space; throws on a bad name.
std::size_t resolve_forced_policy(const policy::PolicySpace& space, const std::string& name);

struct SliceResult {
  std::vector<std::uint8_t> labels;  // H x W raw label values
  policy::PolicyDecision decision;
};

// Routed inference on one [1,4,H,W] slice: hard policy argmax (no noise),
// crop centre from the crop network, hard bit choices, argmax labels. FLOPs
// are appended to `ledger` under a new slice entry.
SliceResult infer_slice(const DynamicModel& model, const Tensor& image, int slice_index,
                        const InferOptions& options, FlopsLedger& ledger);

struct CaseResult {
  std::vector<std::uint8_t> labels;  // volume in VolumeCase voxel order
  FlopsLedger ledger;
};

// Rejects cases whose in-plane size differs from the model's configuration.
CaseResult infer_case(const DynamicModel& model, const data::VolumeCase& volume, const InferOptions& options = {});

// Maps a case to predicted labels plus ledger; eval accepts any predictor so
// that tests can substitute a ground-truth oracle.
using Predictor = std::function<CaseResult(const data::VolumeCase&)>;

}  // namespace dynseg
