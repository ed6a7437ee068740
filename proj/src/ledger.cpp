#include "dynseg/ledger.hpp"

#include <stdexcept>

namespace dynseg {

std::string to_string(CostSource source) {
  switch (source) {
    case CostSource::Policy: return "policy";
    case CostSource::CropNet: return "crop-net";
    case CostSource::Stage: return "stage";
    case CostSource::Selector: return "selector";
  }
  return "?";
}

double SliceLedger::effective_flops() const {
  double total = 0.0;
  for (const auto& e : entries) total += e.effective_flops;
  return total;
}

double SliceLedger::nominal_flops() const {
  double total = 0.0;
  for (const auto& e : entries) total += e.nominal_flops;
  return total;
}

std::vector<int> SliceLedger::stage_bits() const {
  std::vector<int> bits;
  for (const auto& e : entries) {
    if (e.source == CostSource::Stage) bits.push_back(e.bit);
  }
  return bits;
}

std::size_t SliceLedger::stage_entry_count() const { return stage_bits().size(); }

SliceLedger& FlopsLedger::begin_slice(int slice, std::string decision) {
  slices_.push_back({slice, std::move(decision), {}});
  return slices_.back();
}

void FlopsLedger::add(CostSource source, int stage, double nominal_flops, int bit) {
  if (slices_.empty()) throw std::logic_error("FlopsLedger::add before begin_slice");
  slices_.back().entries.push_back(
      {source, stage, nominal_flops, bit, nominal_flops * flops::cost_factor(bit, model_)});
}

double FlopsLedger::per_case_gflops() const {
  double total = 0.0;
  for (const auto& s : slices_) total += s.gflops();
  return total;
}

double FlopsLedger::per_slice_mean_gflops() const {
  return slices_.empty() ? 0.0 : per_case_gflops() / static_cast<double>(slices_.size());
}

nlohmann::json FlopsLedger::to_json() const {
  nlohmann::json per_slice = nlohmann::json::array();
  for (const auto& s : slices_) {
    per_slice.push_back({{"slice", s.slice}, {"decision", s.decision}, {"bits", s.stage_bits()},
                         {"gflops", s.gflops()}});
  }
  return {{"case_id", case_id_},
          {"cost_model", flops::to_string(model_)},
          {"per_slice", per_slice},
          {"per_case_gflops", per_case_gflops()},
          {"per_slice_mean_gflops", per_slice_mean_gflops()}};
}

}  // namespace dynseg
