#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynseg/config.hpp"
#include "dynseg/data.hpp"
#include "dynseg/model.hpp"
#include "dynseg/optim.hpp"
#include "dynseg/rng.hpp"

namespace dynseg {

// Raised when a training step produces a NaN or infinite loss.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochStats {
  int phase = 1;
  int epoch = 0;  // within the phase
  std::int64_t steps = 0;
  double lr = 0.0;  // at the last step
  double tau = 0.0;
  std::size_t slices = 0;
  double loss = 0.0;  // means over slices
  double dice = 0.0;
  double gflops = 0.0;
  double mean_bits = 0.0;  // over quantized stages that ran
  std::map<std::string, std::size_t> decisions;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

struct SliceLoss {
  double total = 0.0;
  double dice = 0.0;          // policy-weighted branch Dice
  double segmentation = 0.0;  // segmenter term over the non-skip branches that ran
  double gflops = 0.0;
  std::size_t chosen = 0;
  std::vector<int> bits;  // hard bits of the chosen branch's quantized stages
};

// Which sub-networks receive updates in a phase:
//   1: policy + U-Net, bits forced to full precision, crops at the midpoint;
//   2: crop network + selectors + U-Net, policy frozen at its argmax;
//   3: everything.
struct PhasePlan {
  bool policy = false;
  bool crop = false;
  bool unet = true;
  bool selectors = false;
};
PhasePlan phase_plan(int phase, const Components& components);

// Everything needed to continue training exactly: parameters, Adam moments and
// step counts, and the position in the schedule. Per-epoch randomness
// (shuffling, augmentation, Gumbel noise) is drawn from generators seeded by
// (seed, phase, epoch), so the schedule position fixes the RNG state.
struct TrainState {
  explicit TrainState(const RunConfig& cfg);

  RunConfig cfg;
  DynamicModel model;
  std::vector<OptimState<float>> optim;  // aligned with model.param_groups()
  int phase = 1;  // phase of the next epoch
  int epoch = 0;  // epochs already completed within `phase`

  bool finished() const { return phase > 3; }
};

// Checkpoint directory: config.txt, state.json, model/ and optim/ (both in
// the save_buffers layout).
void save_checkpoint(TrainState& state, const std::filesystem::path& dir);
TrainState load_checkpoint(const std::filesystem::path& dir);
// Model-only load for inference; the config comes from the checkpoint.
DynamicModel load_checkpoint_model(const std::filesystem::path& dir);

class Trainer {
 public:
  Trainer(TrainState& state, std::vector<data::SliceSample> slices);

  // Loss, backward pass and gradient accumulation for one slice. `noise`
  // drives the Gumbel sample (null for noise-free decisions).
  SliceLoss train_slice(const data::SliceSample& sample, int phase, double tau, Rng* noise, double grad_scale);

  // Runs the next epoch of the schedule and advances the state.
  EpochStats run_epoch();

  double phase_tau(int phase, int epoch) const;
  std::int64_t steps_per_epoch() const;

 private:
  // During the phase-1 warm-up the policy still samples branches (so every
  // branch trains the segmenter) but its weights stay fixed.
  bool policy_updates(int phase, int epoch) const;
  void set_trainable(int phase, int epoch);
  SliceLoss slice_step(const data::SliceSample& sample, int phase, double tau, Rng* noise, double grad_scale);

  TrainState& state_;
  std::vector<data::SliceSample> slices_;
};

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const EpochStats&)> on_epoch;
};

// Trains one fold (cfg.data.fold >= 0) into out_dir: config.txt,
// train_log.jsonl and checkpoints/phase{1,2,3}. Returns the final
// checkpoint directory.
std::filesystem::path train_fold(const RunConfig& cfg, const std::vector<data::SliceSample>& slices,
                                 const TrainOptions& options);

}  // namespace dynseg
