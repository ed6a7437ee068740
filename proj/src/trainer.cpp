#include "dynseg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "dynseg/losses.hpp"
#include "dynseg/ops.hpp"

namespace dynseg {

namespace {

// Stream tags for derive_seed; each (phase, epoch) pair gets its own family.
enum : std::uint64_t { kShuffleTag = 1, kAugmentTag = 2, kNoiseTag = 3 };

// Segmenter Dice is per slice, where most foreground classes are absent. With
// a near-zero smoothing term an absent class sits at a loss of 1 with almost
// no gradient; a smoothing of one pixel pulls its probabilities toward zero.
constexpr float kDiceSmooth = 1.0f;
constexpr double kSpreadFloor = 0.05;

std::uint64_t epoch_seed(std::uint64_t seed, int phase, int epoch, std::uint64_t tag) {
  return derive_seed(derive_seed(derive_seed(seed, 0x7A11 + static_cast<std::uint64_t>(phase)),
                                 static_cast<std::uint64_t>(epoch)),
                     tag);
}

Tensor onehot_vector(std::size_t n, std::size_t index) {
  Tensor t = Tensor::zeros({static_cast<Index>(n)});
  t.mutable_data()[index] = 1.0f;
  return t;
}

// Dice loss of the argmax segmentation: the reward the policy compares
// branches by. It is a constant with respect to every parameter.
Tensor hard_dice(const Tensor& logits, const Tensor& onehot) {
  const Index C = logits.dim(1), M = logits.dim(2) * logits.dim(3);
  const float* z = logits.data().data();
  std::vector<float> hard(logits.numel(), 0.0f);
  for (Index i = 0; i < M; ++i) {
    Index best = 0;
    for (Index c = 1; c < C; ++c) {
      if (z[c * M + i] > z[best * M + i]) best = c;
    }
    hard[static_cast<std::size_t>(best * M + i)] = 1.0f;
  }
  return loss::dice_loss(Tensor(logits.shape(), std::move(hard)), onehot);
}

// Range of the per-branch objective Dice_d + lambda * GFLOPs_d on one slice.
// The policy term of each slice is divided by it (plus a floor), so a slice
// whose branches differ by a few hundredths steers the policy as firmly as
// one where a wrong choice costs a whole class; the best branch per slice is
// unchanged.
double branch_spread(const std::vector<Tensor>& branch_losses, const std::vector<loss::BranchCost<float>>& costs,
                     const RunConfig& cfg) {
  NoGradGuard no_grad;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t d = 0; d < costs.size(); ++d) {
    const double g =
        loss::gflops_loss(onehot_vector(1, 0), {costs[d]}, cfg.candidates, cfg.cost_model).item();
    const double r = branch_losses[d].item() + cfg.lambda * g;
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  return hi - lo;
}

std::string loss_diagnostic(int phase, int epoch, const data::SliceSample& sample, double dice, double gflops,
                            double lambda, const std::string& detail) {
  std::ostringstream os;
  os << "non-finite loss in phase " << phase << " epoch " << epoch << " at slice " << sample.case_id << ":"
     << sample.slice_index << " (dice=" << dice << ", gflops=" << gflops << ", lambda=" << lambda << ")";
  if (!detail.empty()) os << ": " << detail;
  return os.str();
}

std::size_t argmax(std::span<const float> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

nlohmann::json EpochStats::to_json() const {
  return {{"phase", phase}, {"epoch", epoch},   {"steps", steps},         {"lr", lr},
          {"tau", tau},     {"slices", slices}, {"loss", loss},           {"dice", dice},
          {"gflops", gflops}, {"mean_bits", mean_bits}, {"decisions", decisions}, {"seconds", seconds}};
}

PhasePlan phase_plan(int phase, const Components& c) {
  switch (phase) {
    case 1: return {c.spatial, false, true, false};
    case 2: return {false, c.spatial, true, c.quantize};
    case 3: return {c.spatial, c.spatial, true, c.quantize};
    default: throw std::invalid_argument("phase must be 1, 2 or 3");
  }
}

TrainState::TrainState(const RunConfig& config) : cfg(config), model(config) {
  optim.resize(model.param_groups().size());
}

void save_checkpoint(TrainState& state, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_model(state.model, dir / "model");
  std::vector<NamedBuffer> buffers;
  const auto groups = state.model.param_groups();
  for (std::size_t i = 0; i < groups.size(); ++i) {
    append_optim_buffers(*groups[i].params, state.optim[i], groups[i].prefix, buffers);
  }
  save_buffers(dir / "optim", buffers);
  std::ofstream(dir / "config.txt") << state.cfg.to_text();
  const nlohmann::json meta{{"phase", state.phase},
                            {"epoch", state.epoch},
                            {"rng", {{"scheme", "derive_seed(seed, phase, epoch)"}, {"seed", state.cfg.seed}}}};
  std::ofstream(dir / "state.json") << meta.dump(2) << '\n';
}

namespace {

RunConfig checkpoint_config(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "config.txt")) {
    throw std::runtime_error(dir.string() + " is not a checkpoint (no config.txt)");
  }
  return RunConfig::from_file(dir / "config.txt");
}

}  // namespace

TrainState load_checkpoint(const std::filesystem::path& dir) {
  TrainState state(checkpoint_config(dir));
  load_model(state.model, dir / "model");
  const auto buffers = load_buffers(dir / "optim");
  const auto groups = state.model.param_groups();
  for (std::size_t i = 0; i < groups.size(); ++i) {
    restore_optim_buffers(*groups[i].params, state.optim[i], groups[i].prefix, buffers);
  }
  std::ifstream in(dir / "state.json");
  if (!in) throw std::runtime_error("missing " + (dir / "state.json").string());
  nlohmann::json meta;
  in >> meta;
  state.phase = meta.at("phase").get<int>();
  state.epoch = meta.at("epoch").get<int>();
  return state;
}

DynamicModel load_checkpoint_model(const std::filesystem::path& dir) {
  DynamicModel model(checkpoint_config(dir));
  load_model(model, dir / "model");
  return model;
}

Trainer::Trainer(TrainState& state, std::vector<data::SliceSample> slices)
    : state_(state), slices_(std::move(slices)) {
  if (slices_.empty()) throw std::invalid_argument("no training slices");
  for (const auto& s : slices_) {
    if (s.image.dim(2) != state_.cfg.data.height || s.image.dim(3) != state_.cfg.data.width) {
      throw std::invalid_argument("training slice " + s.case_id + ":" + std::to_string(s.slice_index) +
                                  " does not match the configured size");
    }
  }
}

std::int64_t Trainer::steps_per_epoch() const {
  const auto& cfg = state_.cfg;
  const std::size_t n = cfg.max_train_slices > 0
                            ? std::min(slices_.size(), static_cast<std::size_t>(cfg.max_train_slices))
                            : slices_.size();
  return static_cast<std::int64_t>((n + cfg.batch_size - 1) / cfg.batch_size);
}

double Trainer::phase_tau(int phase, int epoch) const {
  const auto& cfg = state_.cfg;
  if (phase < 3) return cfg.tau_start;
  const int n = cfg.epochs[2];
  if (n <= 1) return cfg.tau_end;
  const double t = static_cast<double>(epoch) / (n - 1);
  return cfg.tau_start * std::pow(cfg.tau_end / cfg.tau_start, t);
}

bool Trainer::policy_updates(int phase, int epoch) const {
  const auto& cfg = state_.cfg;
  return phase_plan(phase, cfg.components).policy && !(phase == 1 && epoch < cfg.policy_warmup);
}

void Trainer::set_trainable(int phase, int epoch) {
  auto& m = state_.model;
  const auto plan = phase_plan(phase, state_.cfg.components);
  m.policy_net().params().set_requires_grad(policy_updates(phase, epoch));
  m.crop_net().params().set_requires_grad(plan.crop);
  m.unet().params().set_requires_grad(plan.unet);
  for (auto& s : m.selectors()) s.params().set_requires_grad(plan.selectors);
}

SliceLoss Trainer::train_slice(const data::SliceSample& sample, int phase, double tau, Rng* noise,
                               double grad_scale) {
  try {
    return slice_step(sample, phase, tau, noise, grad_scale);
  } catch (const NumericError& e) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    throw TrainingError(loss_diagnostic(phase, state_.epoch, sample, nan, nan, state_.cfg.lambda, e.what()));
  }
}

SliceLoss Trainer::slice_step(const data::SliceSample& sample, int phase, double tau, Rng* noise,
                              double grad_scale) {
  const auto& cfg = state_.cfg;
  auto& model = state_.model;
  const auto plan = phase_plan(phase, cfg.components);
  const Index H = sample.image.dim(2), W = sample.image.dim(3);
  const Tensor onehot = loss::onehot_from_labels<float>(sample.labels, H, W, cfg.model.num_classes);

  // Candidate branches: the whole policy space, or Whole alone without the
  // spatial component.
  std::vector<policy::PolicyEntry> branches;
  if (cfg.components.spatial) {
    branches = cfg.policy_space.entries();
  } else {
    branches.push_back({policy::Action::Whole, 0});
  }
  const std::size_t D = branches.size();

  Tensor weights;  // forward value one-hot, gradient of the soft sample
  Tensor cost_probs;
  std::size_t chosen = D - 1;
  if (cfg.components.spatial) {
    const Tensor logits = model.policy_net().forward(sample.image);
    if (plan.policy) {
      const auto g = policy::gumbel_softmax<float>(logits, static_cast<float>(tau), noise, false);
      chosen = g.index;
      std::vector<float> hard(D, 0.0f);
      hard[chosen] = 1.0f;
      weights = ops::straight_through(hard, g.probs);
      cost_probs = g.probs;
    } else {
      chosen = argmax(logits.data());
      weights = onehot_vector(D, chosen);
      cost_probs = weights;
    }
  } else {
    weights = onehot_vector(1, 0);
    cost_probs = weights;
  }

  const bool quantized_phase = phase >= 2 && cfg.components.quantize;
  const double selectors_flops =
      quantized_phase ? model.selector_flops() * static_cast<double>(model.selectors().size()) : 0.0;
  const double policy_flops = cfg.components.spatial ? model.policy_flops() : 0.0;

  std::vector<Tensor> branch_losses(D);
  std::vector<loss::BranchCost<float>> costs(D);
  SliceLoss result;
  result.chosen = chosen;
  // With a trainable policy every branch runs: the policy compares the Dice
  // losses of their argmax segmentations, and the segmenter learns Dice plus
  // cross-entropy on each non-skip branch so that a branch the policy
  // currently avoids does not stop improving. A frozen policy runs only its
  // chosen branch, whose Dice trains the segmenter directly.
  std::vector<Tensor> seg_losses;
  for (std::size_t d = 0; d < D; ++d) {
    if (d != chosen && !plan.policy) {
      branch_losses[d] = Tensor::scalar(0.0f);
      continue;
    }
    const auto& entry = branches[d];
    Tensor center;
    double fixed = policy_flops;
    if (entry.action == policy::Action::Crop) {
      fixed += model.crop_flops();
      if (phase == 1) {
        center = policy::clamp_center(Tensor({2}, {static_cast<float>(W) / 2, static_cast<float>(H) / 2}),
                                      entry.crop_size, H, W);
      } else {
        center = model.crop_net().forward(sample.image, entry.crop_size);
      }
    }
    const auto bits = quantized_phase ? seg::selector_bits<float>(model.selectors(), cfg.candidates)
                                      : seg::fixed_bits<float>(quant::kFullPrecisionBits);
    const auto out = model.unet().forward_routed(sample.image, entry, center, bits);
    if (entry.action != policy::Action::Skip) fixed += selectors_flops;
    const Tensor branch_dice = loss::dice_loss(ops::softmax(out.logits, 1), onehot, kDiceSmooth);
    branch_losses[d] = plan.policy ? hard_dice(out.logits, onehot) : branch_dice;
    if (entry.action != policy::Action::Skip) {
      const Tensor ce = loss::cross_entropy(out.logits, onehot);
      seg_losses.push_back(plan.policy ? ops::add(branch_dice, ce) : ce);
    }
    costs[d] = loss::branch_cost(fixed, out.stages);
    if (d == chosen) {
      for (const auto& rec : out.stages) {
        if (static_cast<std::size_t>(rec.stage) < model.selectors().size()) result.bits.push_back(rec.bit);
      }
    }
  }

  std::vector<Tensor> flat;
  for (const auto& l : branch_losses) flat.push_back(ops::reshape(l, {1}));
  const Tensor dice = ops::sum(ops::mul(weights, ops::concat(flat, 0)));
  const Tensor gflops = loss::gflops_loss(cost_probs, costs, cfg.candidates, cfg.cost_model);
  const Tensor objective = loss::total_loss(dice, gflops, cfg.lambda);
  Tensor total = objective;
  if (plan.policy && D > 1) {
    total = ops::scale(objective, static_cast<float>(1.0 / (branch_spread(branch_losses, costs, cfg) + kSpreadFloor)));
  }
  if (!seg_losses.empty()) {
    std::vector<Tensor> flat_seg;
    for (const auto& l : seg_losses) flat_seg.push_back(ops::reshape(l, {1}));
    const Tensor seg = ops::scale(ops::sum(ops::concat(flat_seg, 0)), 1.0f / static_cast<float>(seg_losses.size()));
    total = ops::add(total, seg);
    result.segmentation = seg.item();
  }

  result.dice = dice.item();
  result.gflops = gflops.item();
  result.total = objective.item() + result.segmentation;
  if (!std::isfinite(result.total)) {
    throw TrainingError(loss_diagnostic(phase, state_.epoch, sample, result.dice, result.gflops, cfg.lambda, ""));
  }
  if (total.requires_grad()) ops::scale(total, static_cast<float>(grad_scale)).backward();
  return result;
}

EpochStats Trainer::run_epoch() {
  if (state_.finished()) throw std::logic_error("training schedule already complete");
  const auto& cfg = state_.cfg;
  const int phase = state_.phase;
  const int epoch = state_.epoch;
  set_trainable(phase, epoch);
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<std::size_t> order(slices_.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle(epoch_seed(cfg.seed, phase, epoch, kShuffleTag));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
  if (cfg.max_train_slices > 0 && order.size() > static_cast<std::size_t>(cfg.max_train_slices)) {
    order.resize(static_cast<std::size_t>(cfg.max_train_slices));
  }
  Rng noise(epoch_seed(cfg.seed, phase, epoch, kNoiseTag));
  const std::uint64_t augment_seed = epoch_seed(cfg.seed, phase, epoch, kAugmentTag);

  const std::int64_t steps = steps_per_epoch();
  const std::int64_t total_steps = steps * cfg.epochs[static_cast<std::size_t>(phase - 1)];
  const auto warmup = static_cast<std::int64_t>(std::llround(cfg.warmup_fraction * static_cast<double>(total_steps)));

  EpochStats stats;
  stats.phase = phase;
  stats.epoch = epoch;
  stats.tau = phase_tau(phase, epoch);
  double bit_sum = 0.0;
  std::size_t bit_count = 0;
  auto groups = state_.model.param_groups();
  const auto plan = phase_plan(phase, cfg.components);
  const auto trains = [&](const std::string& prefix) {
    if (prefix == "policy/") return policy_updates(phase, epoch);
    if (prefix == "crop/") return plan.crop;
    if (prefix == "unet/") return plan.unet;
    return plan.selectors;
  };

  for (std::int64_t step = 0; step < steps; ++step) {
    const std::size_t begin = static_cast<std::size_t>(step) * cfg.batch_size;
    const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
    const double scale = 1.0 / static_cast<double>(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      const auto& raw = slices_[order[i]];
      const auto sample = cfg.augment ? data::augment(raw, derive_seed(augment_seed, i)) : raw;
      const auto r = train_slice(sample, phase, stats.tau, &noise, scale);
      stats.loss += r.total;
      stats.dice += r.dice;
      stats.gflops += r.gflops;
      ++stats.decisions[cfg.components.spatial ? cfg.policy_space[r.chosen].label() : "whole"];
      for (int b : r.bits) bit_sum += b;
      bit_count += r.bits.size();
    }
    const std::int64_t phase_step = static_cast<std::int64_t>(epoch) * steps + step;
    stats.lr = poly_warmup_lr(phase_step, total_steps, warmup, cfg.base_lr);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (!trains(groups[g].prefix)) continue;
      const double scale = groups[g].prefix == "policy/" ? cfg.policy_lr_scale : 1.0;
      adam_step(*groups[g].params, state_.optim[g], stats.lr * scale);
      groups[g].params->zero_grad();
    }
    ++stats.steps;
  }
  stats.slices = order.size();
  const double n = static_cast<double>(std::max<std::size_t>(1, stats.slices));
  stats.loss /= n;
  stats.dice /= n;
  stats.gflops /= n;
  stats.mean_bits = bit_count ? bit_sum / static_cast<double>(bit_count) : 0.0;
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (++state_.epoch >= cfg.epochs[static_cast<std::size_t>(phase - 1)]) {
    ++state_.phase;
    state_.epoch = 0;
  }
  return stats;
}

std::filesystem::path train_fold(const RunConfig& cfg, const std::vector<data::SliceSample>& slices,
                                 const TrainOptions& options) {
  cfg.validate();
  if (cfg.data.fold < 0) throw ConfigError("train_fold needs a single held-out fold");
  std::filesystem::create_directories(options.out_dir / "checkpoints");
  std::ofstream(options.out_dir / "config.txt") << cfg.to_text();

  TrainState state = options.resume_from ? load_checkpoint(*options.resume_from) : TrainState(cfg);
  if (options.resume_from) {
    if (state.cfg.to_text() != cfg.to_text()) {
      // Only the output location may differ on resume.
      RunConfig a = state.cfg, b = cfg;
      a.out_dir = b.out_dir = "";
      if (a.to_text() != b.to_text()) {
        throw ConfigError("checkpoint " + options.resume_from->string() + " was written with a different config");
      }
      state.cfg.out_dir = cfg.out_dir;
    }
  }

  Trainer trainer(state, slices);
  std::ofstream log(options.out_dir / "train_log.jsonl", options.resume_from ? std::ios::app : std::ios::trunc);
  std::filesystem::path last;
  while (!state.finished()) {
    const int phase = state.phase;
    const auto stats = trainer.run_epoch();
    log << stats.to_json().dump() << '\n';
    log.flush();
    if (options.on_epoch) options.on_epoch(stats);
    if (state.phase != phase) {
      last = options.out_dir / "checkpoints" / ("phase" + std::to_string(phase));
      save_checkpoint(state, last);
    }
  }
  if (last.empty()) last = *options.resume_from;
  return last;
}

}  // namespace dynseg
