#include "dynseg/model.hpp"

#include <cmath>
#include <stdexcept>

#include "dynseg/flops.hpp"
#include "dynseg/ops.hpp"
#include "dynseg/rng.hpp"

namespace dynseg {

namespace {

enum SeedTag : std::uint64_t { kPolicySeed = 1, kCropSeed = 2, kUNetSeed = 3, kSelectorSeed = 100 };

seg::UNetConfig unet_config(const RunConfig& cfg) {
  cfg.validate();
  return cfg.model;
}

}  // namespace

DynamicModel::DynamicModel(const RunConfig& cfg)
    : cfg_(cfg),
      policy_(cfg.model.in_channels, cfg.policy_space.size(), derive_seed(cfg.seed, kPolicySeed)),
      crop_(cfg.model.in_channels, derive_seed(cfg.seed, kCropSeed)),
      unet_(unet_config(cfg), derive_seed(cfg.seed, kUNetSeed)) {
  const auto n = seg::num_quantized_stages(cfg.model);
  selectors_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    selectors_.emplace_back(cfg.candidates.size(), derive_seed(cfg.seed, kSelectorSeed + i));
  }
}

std::vector<ParamGroup> DynamicModel::param_groups() {
  std::vector<ParamGroup> groups{{"policy/", &policy_.params()}, {"crop/", &crop_.params()}, {"unet/", &unet_.params()}};
  for (std::size_t i = 0; i < selectors_.size(); ++i) {
    groups.push_back({"selector" + std::to_string(i) + "/", &selectors_[i].params()});
  }
  return groups;
}

double DynamicModel::policy_flops() const {
  return flops::policy_net_flops(cfg_.model.in_channels, cfg_.data.height, cfg_.data.width,
                                 static_cast<Index>(cfg_.policy_space.size()));
}

double DynamicModel::crop_flops() const {
  return flops::crop_net_flops(cfg_.model.in_channels, cfg_.data.height, cfg_.data.width);
}

double DynamicModel::selector_flops() const {
  return flops::selector_flops(static_cast<Index>(cfg_.candidates.size()));
}

seg::BitsFn<float> DynamicModel::inference_bits() const {
  if (!cfg_.components.quantize) return seg::fixed_bits<float>(quant::kFullPrecisionBits);
  return seg::selector_bits<float>(selectors_, cfg_.candidates);
}

void save_model(DynamicModel& model, const std::filesystem::path& dir) {
  std::vector<NamedBuffer> buffers;
  for (const auto& g : model.param_groups()) append_buffers(*g.params, g.prefix, buffers);
  save_buffers(dir, buffers);
}

void load_model(DynamicModel& model, const std::filesystem::path& dir) {
  const auto buffers = load_buffers(dir);
  std::size_t expected = 0;
  for (const auto& g : model.param_groups()) {
    restore_buffers(*g.params, g.prefix, buffers);
    expected += g.params->size();
  }
  if (buffers.size() != expected) {
    throw std::runtime_error(dir.string() + ": checkpoint holds " + std::to_string(buffers.size()) +
                             " tensors, model has " + std::to_string(expected));
  }
}

std::size_t resolve_forced_policy(const policy::PolicySpace& space, const std::string& name) {
  if (name == "skip") return space.skip_index();
  if (name == "whole") return space.whole_index();
  for (std::size_t i = 0; i < space.size(); ++i) {
    const auto& e = space[i];
    if (e.action != policy::Action::Crop) continue;
    if (name == "crop" || name == e.label()) return i;
  }
  throw std::invalid_argument("forced policy '" + name + "' is not in the policy space " + space.to_string());
}

SliceResult infer_slice(const DynamicModel& model, const Tensor& image, int slice_index,
                        const InferOptions& options, FlopsLedger& ledger) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const auto& space = cfg.policy_space;
  const Index H = image.dim(2), W = image.dim(3);

  SliceResult result;
  auto& decision = result.decision;
  if (cfg.components.spatial) {
    const Tensor logits = model.policy_net().forward(image);
    decision.probs.assign(space.size(), 0.0);
    const Tensor probs = ops::softmax(logits, 0);
    for (std::size_t i = 0; i < space.size(); ++i) decision.probs[i] = probs.at(i);
    decision.chosen = policy::gumbel_softmax<float>(logits, 1.0f, nullptr, true).index;
  } else {
    decision.chosen = space.whole_index();
  }
  if (options.force_policy) decision.chosen = resolve_forced_policy(space, *options.force_policy);
  const auto& entry = space[decision.chosen];

  ledger.begin_slice(slice_index, entry.label());
  if (cfg.components.spatial) ledger.add(CostSource::Policy, -1, model.policy_flops(), quant::kFullPrecisionBits);

  Tensor center;
  if (entry.action == policy::Action::Crop) {
    center = model.crop_net().forward(image, entry.crop_size);
    decision.center = policy::Center{center.at(0), center.at(1)};
    ledger.add(CostSource::CropNet, -1, model.crop_flops(), quant::kFullPrecisionBits);
  }

  const bool selectors_run = !options.force_bits && cfg.components.quantize;
  const auto bits = options.force_bits ? seg::fixed_bits<float>(*options.force_bits) : model.inference_bits();
  const auto out = model.unet().forward_routed(image, entry, center, bits);
  for (const auto& rec : out.stages) {
    const bool quantized = static_cast<std::size_t>(rec.stage) < model.selectors().size();
    if (selectors_run && quantized) {
      ledger.add(CostSource::Selector, rec.stage, model.selector_flops(), quant::kFullPrecisionBits);
    }
    ledger.add(CostSource::Stage, rec.stage, rec.nominal_flops, rec.bit);
  }

  const Index C = out.logits.dim(1);
  const auto logits = out.logits.data();
  result.labels.assign(static_cast<std::size_t>(H * W), 0);
  for (Index p = 0; p < H * W; ++p) {
    Index best = 0;
    for (Index c = 1; c < C; ++c) {
      if (logits[c * H * W + p] > logits[best * H * W + p]) best = c;
    }
    result.labels[p] = static_cast<std::uint8_t>(seg::channel_to_label(static_cast<int>(best)));
  }
  return result;
}

CaseResult infer_case(const DynamicModel& model, const data::VolumeCase& volume, const InferOptions& options) {
  const auto& cfg = model.config();
  if (volume.height != cfg.data.height || volume.width != cfg.data.width) {
    throw std::invalid_argument("case " + volume.case_id + " is " + std::to_string(volume.height) + "x" +
                                std::to_string(volume.width) + " but the checkpoint was built for " +
                                std::to_string(cfg.data.height) + "x" + std::to_string(cfg.data.width));
  }
  CaseResult result{std::vector<std::uint8_t>(volume.labels.size(), 0), FlopsLedger(volume.case_id, cfg.cost_model)};
  for (Index z = 0; z < volume.depth; ++z) {
    const auto slice = data::extract_slice(volume, z);
    const auto r = infer_slice(model, slice.image, static_cast<int>(z), options, result.ledger);
    for (Index y = 0; y < volume.height; ++y) {
      for (Index x = 0; x < volume.width; ++x) {
        result.labels[volume.voxel(y, x, z)] = r.labels[static_cast<std::size_t>(y * volume.width + x)];
      }
    }
  }
  return result;
}

}  // namespace dynseg
