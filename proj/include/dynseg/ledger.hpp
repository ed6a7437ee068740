#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dynseg/flops.hpp"

namespace dynseg {

enum class CostSource { Policy, CropNet, Stage, Selector };
std::string to_string(CostSource source);

struct LedgerEntry {
  CostSource source = CostSource::Stage;
  int stage = -1;  // stage index for Stage/Selector entries
  double nominal_flops = 0.0;
  int bit = 32;
  double effective_flops = 0.0;  // nominal_flops * cost_factor(bit)
};

struct SliceLedger {
  int slice = 0;
  std::string decision;  // "skip", "crop32", "whole"
  std::vector<LedgerEntry> entries;

  double effective_flops() const;
  double nominal_flops() const;
  double gflops() const { return effective_flops() / 1e9; }
  // Bits of the Stage entries in stage order.
  std::vector<int> stage_bits() const;
  std::size_t stage_entry_count() const;
};

class FlopsLedger {
 public:
  explicit FlopsLedger(std::string case_id = "", flops::CostModel model = flops::CostModel::Linear)
      : case_id_(std::move(case_id)), model_(model) {}

  const std::string& case_id() const { return case_id_; }
  flops::CostModel cost_model() const { return model_; }

  SliceLedger& begin_slice(int slice, std::string decision);
  // Appends to the most recent slice; effective FLOPs follow the cost model.
  void add(CostSource source, int stage, double nominal_flops, int bit);

  const std::vector<SliceLedger>& slices() const { return slices_; }
  double per_case_gflops() const;
  double per_slice_mean_gflops() const;

  // {case_id, cost_model, per_slice: [{slice, decision, bits, gflops}],
  //  per_case_gflops, per_slice_mean_gflops}
  nlohmann::json to_json() const;

 private:
  std::string case_id_;
  flops::CostModel model_;
  std::vector<SliceLedger> slices_;
};

}  // namespace dynseg
