#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynseg/data.hpp"
#include "dynseg/ledger.hpp"

namespace dynseg::eval {

// HD95 when exactly one of the two masks is empty.
inline constexpr double kHd95Sentinel = 373.13;

struct Dims {
  Index height = 0, width = 0, depth = 0;
  std::size_t size() const { return static_cast<std::size_t>(height * width * depth); }
};

using Mask = std::vector<std::uint8_t>;  // 0/1 over [H, W, D]

struct RegionMasks {
  Mask et, tc, wt;
};

// ET = {4}, TC = {1, 4}, WT = {1, 2, 4}; other label values are rejected.
RegionMasks region_masks(std::span<const std::uint8_t> labels);

// 2|P & G| / (|P| + |G|); 1.0 when both are empty.
double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

// Surface voxels: mask voxels with a 6-neighbour outside the mask (voxels
// beyond the volume edge count as outside).
Mask surface(std::span<const std::uint8_t> mask, const Dims& dims);

// Distance from every surface voxel of `from` to the nearest surface voxel of
// `to`, in mm, unsorted. Both surfaces must be non-empty.
std::vector<double> directed_surface_distances(std::span<const std::uint8_t> from,
                                               std::span<const std::uint8_t> to, const Dims& dims,
                                               const data::Spacing& spacing);

// Nearest-rank percentile: the ceil(q/100 * n)-th smallest value.
double nearest_rank_percentile(std::vector<double> values, double q);

// max of the two directed 95th percentiles; 0 when both masks are empty,
// kHd95Sentinel when exactly one is.
double hd95(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, const Dims& dims,
            const data::Spacing& spacing);

enum Region { ET = 0, WT = 1, TC = 2 };
inline constexpr std::array<const char*, 3> kRegionNames{"ET", "WT", "TC"};

struct CaseReport {
  std::string case_id;
  std::array<double, 3> dice{};  // indexed by Region
  std::array<double, 3> hd95{};
  double gflops_per_case = 0.0;
  double gflops_per_slice = 0.0;
  std::size_t slices = 0;
  std::map<std::string, std::size_t> decisions;             // skip / crop / whole
  std::vector<std::map<int, std::size_t>> bits_per_stage;  // stage -> bit -> count

  nlohmann::json to_json() const;
};

CaseReport evaluate_case(const std::string& case_id, std::span<const std::uint8_t> pred_labels,
                         std::span<const std::uint8_t> gt_labels, const Dims& dims,
                         const data::Spacing& spacing, const FlopsLedger* ledger);

struct TableRow {
  std::string name;
  std::array<double, 3> dice{};
  std::array<double, 3> hd95{};
  double gflops_per_case = 0.0;
  double gflops_per_slice = 0.0;
};

// The report.txt layout: a name column, then Dice ET/WT/TC, HD95 ET/WT/TC and
// GFLOPs per case / per slice.
std::string format_table(const std::string& first_header, const std::vector<TableRow>& rows);

struct SplitReport {
  std::vector<CaseReport> cases;
  std::array<double, 3> mean_dice{};
  std::array<double, 3> mean_hd95{};
  double mean_gflops_per_case = 0.0;
  double mean_gflops_per_slice = 0.0;
  std::map<std::string, std::size_t> decisions;

  nlohmann::json to_json() const;
  // Aligned table: case, Dice ET/WT/TC, HD95 ET/WT/TC, GFLOPs per case / per slice.
  std::string to_text() const;
  TableRow summary_row(std::string name) const;
};

// Unweighted means over cases.
SplitReport evaluate_split(std::vector<CaseReport> cases);

// Writes report.json and report.txt into `dir`.
void write_report(const SplitReport& report, const std::filesystem::path& dir);

// Decision label ("skip", "crop96", "whole") to its histogram bucket.
std::string decision_bucket(const std::string& label);

}  // namespace dynseg::eval
