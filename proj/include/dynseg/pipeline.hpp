#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dynseg/config.hpp"
#include "dynseg/data.hpp"
#include "dynseg/metrics.hpp"
#include "dynseg/model.hpp"
#include "dynseg/trainer.hpp"

namespace dynseg {

// Loads <data.dir>/dataset.json, generating the dataset from the config's
// seeds when the directory holds none. An existing dataset must match the
// configured dims, case count and fold count.
data::DatasetManifest prepare_dataset(const RunConfig& cfg);

// Cases inside (in_fold) or outside the given fold.
std::vector<data::VolumeCase> load_cases(const data::DatasetManifest& manifest, const std::filesystem::path& dir,
                                         int fold, bool in_fold);

std::vector<data::SliceSample> training_slices(const std::vector<data::VolumeCase>& cases);

// Trains the configured fold, or every fold into <out_dir>/fold_<k> when
// data.fold is "all". Returns the final checkpoint of each trained fold.
std::vector<std::filesystem::path> train(const RunConfig& cfg, const TrainOptions& options = {});

// A checkpoint directory itself, <dir>/checkpoints/phase3, or for a
// cross-validation run <dir>/fold_<fold>/checkpoints/phase3.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& path, int fold);

// Per-case reports for the held-out cases of `fold`.
eval::SplitReport evaluate_fold(const RunConfig& cfg, int fold, const Predictor& predict);

Predictor model_predictor(const DynamicModel& model, InferOptions options = {});

// Full-precision Whole path with no decision networks: the reference cost.
Predictor plain_predictor(const DynamicModel& model);

// Evaluates one fold (fold >= 0) or all folds of a cross-validation run
// (fold == -1) and writes report.json / report.txt under out_dir.
eval::SplitReport run_eval(const std::filesystem::path& checkpoint, int fold, const std::filesystem::path& out_dir,
                           const std::vector<std::string>& overrides = {});

// Table with a "full-precision" row (plain predictor) and a "dynamic" row
// (routed inference), in the report.txt column layout.
struct FlopsReport {
  eval::SplitReport baseline;
  eval::SplitReport dynamic;
  std::string to_text() const;
};
FlopsReport flops_report(const std::filesystem::path& checkpoint, int fold,
                         const std::vector<std::string>& overrides = {});

// Axis name -> (row name, config assignment) list.
const std::vector<std::string>& ablation_axes();
std::vector<std::pair<std::string, std::string>> ablation_variants(const std::string& axis, const RunConfig& cfg);

struct AblationRow {
  std::string name;
  eval::SplitReport report;
};
struct AblationResult {
  std::string axis;
  std::vector<AblationRow> rows;
  std::string to_text() const;
  nlohmann::json to_json() const;
};
// Trains and evaluates one run per variant under <cfg.out_dir>/<axis>/<k>.
AblationResult ablate(const RunConfig& cfg, const std::string& axis, const TrainOptions& options = {});

}  // namespace dynseg
