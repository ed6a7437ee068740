#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynseg/flops.hpp"
#include "dynseg/quantization.hpp"
#include "dynseg/spatial_policy.hpp"
#include "dynseg/unet.hpp"

namespace dynseg {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string dir = "data";  // dataset root holding dataset.json; generated when absent
  int cases = 16;
  Index height = 64;
  Index width = 64;
  Index depth = 32;
  std::uint64_t seed = 0;
  int folds = 5;
  int fold = 0;  // held-out fold; -1 trains every fold in turn
};

// Which dynamic parts are active. With spatial off every slice takes the
// Whole path and no policy or crop network runs; with quantize off every
// stage runs at full precision and no selector runs.
struct Components {
  bool spatial = true;
  bool quantize = true;

  std::string to_string() const;  // "baseline", "S", "Q", "S+Q"
  static Components parse(const std::string& text);
};

struct RunConfig {
  DataConfig data;
  seg::UNetConfig model;
  policy::PolicySpace policy_space{std::vector<Index>{32}};
  quant::BitCandidateSet candidates;
  flops::CostModel cost_model = flops::CostModel::Linear;
  Components components;
  double lambda = 0.06;
  std::array<int, 3> epochs{20, 10, 5};
  double base_lr = 2e-4;
  double warmup_fraction = 0.05;
  int batch_size = 16;
  double tau_start = 5.0;  // phase 1 and the start of the phase-3 anneal
  double tau_end = 0.5;
  std::uint64_t seed = 0;
  bool augment = true;
  int max_train_slices = 0;  // 0 uses every training slice each epoch
  int policy_warmup = 0;  // phase-1 epochs in which the policy samples but is not updated
  double policy_lr_scale = 1.0;  // policy learning rate relative to base_lr
  std::string out_dir = "runs/default";

  // Flat `key = value` access; unknown keys and malformed values throw
  // ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  // "key=value" as given on the command line.
  void apply_override(const std::string& assignment);

  // Throws ConfigError on the first violated invariant.
  void validate() const;

  // Every key in keys() order; parse_text(to_text()) reproduces the config.
  std::string to_text() const;
  static RunConfig parse_text(const std::string& text, const std::string& origin = "<text>");
  static RunConfig from_file(const std::filesystem::path& path);
};

}  // namespace dynseg
