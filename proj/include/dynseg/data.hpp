#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynseg/tensor.hpp"

namespace dynseg::data {

inline constexpr Index kModalities = 4;  // T1, T1c, T2, FLAIR analogues
inline constexpr std::array<int, 4> kLabelValues{0, 1, 2, 4};

// Load/validation failure; the message names the file and the field.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Spacing {
  double x = 1.0, y = 1.0, z = 1.0;
  bool operator==(const Spacing&) const = default;
};

struct VolumeCase {
  std::string case_id;
  Index height = 0, width = 0, depth = 0;
  Spacing spacing;
  std::vector<float> intensities;    // [4, H, W, D] row-major
  std::vector<std::uint8_t> labels;  // [H, W, D] raw values {0,1,2,4}

  std::size_t voxel(Index y, Index x, Index z) const {
    return static_cast<std::size_t>((y * width + x) * depth + z);
  }
  float intensity(Index m, Index y, Index x, Index z) const {
    return intensities[static_cast<std::size_t>(m * height * width * depth) + voxel(y, x, z)];
  }
  bool operator==(const VolumeCase&) const = default;
};

struct GenerateOptions {
  // Fraction of the depth axis covered by the band holding every tumour.
  double min_band = 0.3;
  double max_band = 0.6;
  int min_tumors = 1;
  int max_tumors = 2;
  double noise = 0.15;
};

// Deterministic in (seed, dims, options). Rejects dims that are not
// positive multiples of `divisor` in-plane or a depth below 8.
VolumeCase generate_case(std::uint64_t seed, Index height, Index width, Index depth,
                         const GenerateOptions& options = {}, Index divisor = 16);

struct SliceSample {
  Tensor image;                      // [1, 4, H, W]
  std::vector<std::uint8_t> labels;  // [H, W] raw values
  std::string case_id;
  Index slice_index = 0;

  bool has_foreground() const;
};

std::vector<SliceSample> slice_iter(const VolumeCase& c);
SliceSample extract_slice(const VolumeCase& c, Index z);

struct AugmentParams {
  bool flip_horizontal = false;  // mirror along W
  bool flip_vertical = false;    // mirror along H
  double shift = 0.0;
  double scale = 1.0;
};

// Flips with p = 0.5 each, shift in [-0.1, 0.1], scale in [0.9, 1.1].
AugmentParams draw_augment(std::uint64_t seed);
// Flips apply to image and labels; shift/scale to the image only.
SliceSample augment(const SliceSample& s, const AugmentParams& params);
SliceSample augment(const SliceSample& s, std::uint64_t seed);

// Seeded partition into k folds whose sizes differ by at most one.
std::vector<std::vector<std::string>> kfold_split(const std::vector<std::string>& case_ids, int k,
                                                  std::uint64_t seed);

// <dir>/header.json, <dir>/intensities.bin (f32 LE, modality-major),
// <dir>/labels.bin (uint8).
void save_case(const VolumeCase& c, const std::filesystem::path& dir);
VolumeCase load_case(const std::filesystem::path& dir);

struct DatasetEntry {
  std::string case_id;
  std::string path;  // relative to the manifest directory
  int fold = 0;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  Index height = 0, width = 0, depth = 0;
  int folds = 5;
  std::vector<DatasetEntry> cases;

  std::vector<std::string> case_ids(int fold, bool in_fold) const;
};

inline constexpr const char* kManifestName = "dataset.json";

// Generates `num_cases` cases under `dir` (case_000, ...) with per-case seeds
// derived from `seed`, assigns folds and writes dataset.json.
DatasetManifest generate_dataset(const std::filesystem::path& dir, int num_cases, std::uint64_t seed,
                                 Index height, Index width, Index depth, int folds,
                                 const GenerateOptions& options = {});
void save_manifest(const DatasetManifest& m, const std::filesystem::path& dir);
DatasetManifest load_manifest(const std::filesystem::path& dir);

}  // namespace dynseg::data
