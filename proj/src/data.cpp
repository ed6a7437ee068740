#include "dynseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <set>

#include "dynseg/io.hpp"
#include "dynseg/rng.hpp"

namespace dynseg::data {

namespace {

struct Ellipsoid {
  double cy, cx, cz, ry, rx, rz;
  bool contains(double y, double x, double z) const {
    const double a = (y - cy) / ry, b = (x - cx) / rx, c = (z - cz) / rz;
    return a * a + b * b + c * c <= 1.0;
  }
};

struct Tumor {
  Ellipsoid wt, tc, et;
};

// Low-frequency texture: a few random plane waves.
struct SmoothField {
  struct Wave {
    double ky, kx, kz, phase, amp;
  };
  std::vector<Wave> waves;

  SmoothField(Rng& rng, Index H, Index W, Index D, double amplitude) {
    for (int i = 0; i < 3; ++i) {
      const double two_pi = 2.0 * std::numbers::pi;
      waves.push_back({two_pi * rng.uniform(0.5, 2.5) / double(H), two_pi * rng.uniform(0.5, 2.5) / double(W),
                       two_pi * rng.uniform(0.2, 1.5) / double(D), two_pi * rng.uniform(), amplitude / 3.0});
    }
  }
  double operator()(double y, double x, double z) const {
    double v = 0.0;
    for (const auto& w : waves) v += w.amp * std::sin(w.ky * y + w.kx * x + w.kz * z + w.phase);
    return v;
  }
};

// Additive contrast per label (rows: label 2, 1, 4) and modality.
constexpr double kContrast[3][4] = {
    {-0.3, 0.0, 0.9, 1.2},   // edema
    {-0.6, -0.4, 1.2, 0.5},  // necrotic / non-enhancing core
    {-0.2, 1.5, 0.6, 0.8},   // enhancing tumour
};

int contrast_row(std::uint8_t label) { return label == 2 ? 0 : label == 1 ? 1 : 2; }

DataError field_error(const std::filesystem::path& file, const std::string& field, const std::string& what) {
  return DataError(file.string() + ": field '" + field + "' " + what);
}

}  // namespace

VolumeCase generate_case(std::uint64_t seed, Index height, Index width, Index depth,
                         const GenerateOptions& options, Index divisor) {
  if (height <= 0 || width <= 0 || divisor <= 0 || height % divisor != 0 || width % divisor != 0) {
    throw std::invalid_argument("generate_case: H and W must be positive multiples of " +
                                std::to_string(divisor) + ", got " + std::to_string(height) + "x" +
                                std::to_string(width));
  }
  if (depth < 8) throw std::invalid_argument("generate_case: depth must be >= 8");
  if (!(0.0 < options.min_band && options.min_band <= options.max_band && options.max_band <= 1.0) ||
      options.min_tumors < 1 || options.max_tumors < options.min_tumors) {
    throw std::invalid_argument("generate_case: invalid generator options");
  }
  const double H = double(height), W = double(width), D = double(depth);
  Rng rng(seed);

  VolumeCase c;
  c.case_id = "synth_" + std::to_string(seed);
  c.height = height;
  c.width = width;
  c.depth = depth;

  const Ellipsoid brain{H / 2 + rng.uniform(-0.03, 0.03) * H, W / 2 + rng.uniform(-0.03, 0.03) * W,
                        (D - 1) / 2, rng.uniform(0.36, 0.42) * H, rng.uniform(0.36, 0.42) * W,
                        rng.uniform(0.55, 0.65) * D};

  // Every tumour lives inside one z-band; slices outside it are tumour-free.
  const Index band = std::clamp<Index>(Index(std::lround(rng.uniform(options.min_band, options.max_band) * D)), 1,
                                       depth);
  const Index z0 = Index(rng.below(std::uint64_t(depth - band + 1)));
  const int num_tumors = options.min_tumors + int(rng.below(std::uint64_t(options.max_tumors - options.min_tumors + 1)));

  std::vector<Tumor> tumors;
  for (int t = 0; t < num_tumors; ++t) {
    double cz, rz;
    if (t == 0) {
      cz = double(z0) + double(band - 1) / 2;
      rz = double(band) / 2;  // covers every slice of the band
    } else {
      rz = std::max(1.0, rng.uniform(0.3, 0.5) * double(band) / 2);
      cz = rng.uniform(double(z0) + rz - 0.5, double(z0 + band) - rz + 0.5);
      cz = std::clamp(cz, double(z0), double(z0 + band - 1));
    }
    const double ry = rng.uniform(0.09, 0.16) * H, rx = rng.uniform(0.09, 0.16) * W;
    const double angle = 2.0 * std::numbers::pi * rng.uniform();
    const double off = rng.uniform(0.15, 0.4);
    const double cy = brain.cy + off * (brain.ry - ry) * std::sin(angle);
    const double cx = brain.cx + off * (brain.rx - rx) * std::cos(angle);
    const double tc = rng.uniform(0.5, 0.7), et = rng.uniform(0.4, 0.6);
    Tumor tu;
    tu.wt = {cy, cx, cz, ry, rx, rz};
    tu.tc = {cy, cx, cz, ry * tc, rx * tc, rz * tc};
    tu.et = {cy, cx, cz, ry * tc * et, rx * tc * et, rz * tc * et};
    tumors.push_back(tu);
  }

  const std::size_t N = std::size_t(height * width * depth);
  c.labels.assign(N, 0);
  std::vector<char> in_brain(N, 0);
  // Priority when tumours overlap: 4 over 1 over 2.
  const auto rank = [](std::uint8_t l) { return l == 4 ? 3 : l == 1 ? 2 : l == 2 ? 1 : 0; };
  for (Index y = 0; y < height; ++y)
    for (Index x = 0; x < width; ++x)
      for (Index z = 0; z < depth; ++z) {
        const std::size_t v = c.voxel(y, x, z);
        in_brain[v] = brain.contains(double(y), double(x), double(z));
        std::uint8_t l = 0;
        for (const auto& tu : tumors) {
          std::uint8_t here = 0;
          if (tu.et.contains(double(y), double(x), double(z))) {
            here = 4;
          } else if (tu.tc.contains(double(y), double(x), double(z))) {
            here = 1;
          } else if (tu.wt.contains(double(y), double(x), double(z))) {
            here = 2;
          }
          if (rank(here) > rank(l)) l = here;
        }
        c.labels[v] = l;
        if (l != 0) in_brain[v] = 1;
      }

  c.intensities.assign(std::size_t(kModalities) * N, 0.0f);
  for (Index m = 0; m < kModalities; ++m) {
    SmoothField field(rng, height, width, depth, 0.3);
    float* out = c.intensities.data() + std::size_t(m) * N;
    double sum = 0.0, sum2 = 0.0;
    std::size_t count = 0;
    for (Index y = 0; y < height; ++y)
      for (Index x = 0; x < width; ++x)
        for (Index z = 0; z < depth; ++z) {
          const std::size_t v = c.voxel(y, x, z);
          const double noise = rng.normal() * options.noise;
          if (!in_brain[v]) continue;
          double val = 1.0 + field(double(y), double(x), double(z)) + noise;
          if (c.labels[v] != 0) val += kContrast[contrast_row(c.labels[v])][m];
          out[v] = float(val);
          sum += val;
          sum2 += val * val;
          ++count;
        }
    const double mean = sum / double(count);
    const double sd = std::sqrt(std::max(sum2 / double(count) - mean * mean, 1e-12));
    for (std::size_t v = 0; v < N; ++v) {
      if (in_brain[v]) out[v] = float((double(out[v]) - mean) / sd);
    }
  }
  return c;
}

bool SliceSample::has_foreground() const {
  return std::any_of(labels.begin(), labels.end(), [](std::uint8_t l) { return l != 0; });
}

SliceSample extract_slice(const VolumeCase& c, Index z) {
  if (z < 0 || z >= c.depth) throw std::out_of_range("slice index out of range");
  const Index H = c.height, W = c.width;
  std::vector<float> img(std::size_t(kModalities * H * W));
  SliceSample s;
  s.labels.resize(std::size_t(H * W));
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      for (Index m = 0; m < kModalities; ++m) img[std::size_t((m * H + y) * W + x)] = c.intensity(m, y, x, z);
      s.labels[std::size_t(y * W + x)] = c.labels[c.voxel(y, x, z)];
    }
  s.image = Tensor({1, kModalities, H, W}, std::move(img));
  s.case_id = c.case_id;
  s.slice_index = z;
  return s;
}

std::vector<SliceSample> slice_iter(const VolumeCase& c) {
  std::vector<SliceSample> out;
  out.reserve(std::size_t(c.depth));
  for (Index z = 0; z < c.depth; ++z) out.push_back(extract_slice(c, z));
  return out;
}

AugmentParams draw_augment(std::uint64_t seed) {
  Rng rng(seed);
  AugmentParams p;
  p.flip_horizontal = rng.bernoulli(0.5);
  p.flip_vertical = rng.bernoulli(0.5);
  p.shift = rng.uniform(-0.1, 0.1);
  p.scale = rng.uniform(0.9, 1.1);
  return p;
}

SliceSample augment(const SliceSample& s, const AugmentParams& p) {
  const Index C = s.image.dim(1), H = s.image.dim(2), W = s.image.dim(3);
  SliceSample out = s;
  std::vector<float> img(s.image.numel());
  const auto src = s.image.data();
  for (Index y = 0; y < H; ++y) {
    const Index sy = p.flip_vertical ? H - 1 - y : y;
    for (Index x = 0; x < W; ++x) {
      const Index sx = p.flip_horizontal ? W - 1 - x : x;
      for (Index c = 0; c < C; ++c) {
        const float v = src[std::size_t((c * H + sy) * W + sx)];
        img[std::size_t((c * H + y) * W + x)] = float(double(v) * p.scale + p.shift);
      }
      out.labels[std::size_t(y * W + x)] = s.labels[std::size_t(sy * W + sx)];
    }
  }
  out.image = Tensor(s.image.shape(), std::move(img));
  return out;
}

SliceSample augment(const SliceSample& s, std::uint64_t seed) { return augment(s, draw_augment(seed)); }

std::vector<std::vector<std::string>> kfold_split(const std::vector<std::string>& case_ids, int k,
                                                  std::uint64_t seed) {
  if (k < 2 || std::size_t(k) > case_ids.size()) {
    throw std::invalid_argument("kfold_split: need 2 <= k <= " + std::to_string(case_ids.size()) + ", got " +
                                std::to_string(k));
  }
  std::vector<std::string> ids = case_ids;
  Rng rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
  std::vector<std::vector<std::string>> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < ids.size(); ++i) folds[i % std::size_t(k)].push_back(ids[i]);
  return folds;
}

void save_case(const VolumeCase& c, const std::filesystem::path& dir) {
  const std::size_t N = std::size_t(c.height * c.width * c.depth);
  if (c.labels.size() != N || c.intensities.size() != std::size_t(kModalities) * N) {
    throw std::invalid_argument("save_case: buffers do not match dims of " + c.case_id);
  }
  std::filesystem::create_directories(dir);
  nlohmann::json header{{"case_id", c.case_id},
                        {"dims", {c.height, c.width, c.depth}},
                        {"modalities", kModalities},
                        {"spacing", {c.spacing.x, c.spacing.y, c.spacing.z}},
                        {"dtype", "f32-le"},
                        {"label_values", kLabelValues}};
  std::ofstream(dir / "header.json") << header.dump(2) << '\n';
  std::ofstream bin(dir / "intensities.bin", std::ios::binary);
  if (!bin) throw DataError("cannot write " + (dir / "intensities.bin").string());
  io::write_f32_le(bin, c.intensities);
  std::ofstream lab(dir / "labels.bin", std::ios::binary);
  lab.write(reinterpret_cast<const char*>(c.labels.data()), std::streamsize(c.labels.size()));
  if (!bin || !lab) throw DataError("failed writing case " + c.case_id + " to " + dir.string());
}

VolumeCase load_case(const std::filesystem::path& dir) {
  const auto header_path = dir / "header.json";
  std::ifstream hf(header_path);
  if (!hf) throw DataError(header_path.string() + ": file missing");
  nlohmann::json h;
  try {
    hf >> h;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(header_path.string() + ": malformed JSON (" + e.what() + ")");
  }
  const auto require = [&](const char* field) -> const nlohmann::json& {
    if (!h.contains(field)) throw field_error(header_path, field, "is missing");
    return h.at(field);
  };

  VolumeCase c;
  try {
    c.case_id = require("case_id").get<std::string>();
    const auto dims = require("dims").get<std::vector<Index>>();
    if (dims.size() != 3 || std::any_of(dims.begin(), dims.end(), [](Index d) { return d <= 0; })) {
      throw field_error(header_path, "dims", "must be three positive integers [H, W, D]");
    }
    c.height = dims[0];
    c.width = dims[1];
    c.depth = dims[2];
    if (h.contains("modalities") && h.at("modalities").get<Index>() != kModalities) {
      throw field_error(header_path, "modalities", "must be 4");
    }
    const auto spacing = require("spacing").get<std::vector<double>>();
    if (spacing.size() != 3 || std::any_of(spacing.begin(), spacing.end(), [](double v) { return !(v > 0); })) {
      throw field_error(header_path, "spacing", "must be three positive numbers");
    }
    c.spacing = {spacing[0], spacing[1], spacing[2]};
    if (require("dtype").get<std::string>() != "f32-le") {
      throw field_error(header_path, "dtype", "must be \"f32-le\"");
    }
    const auto labels = require("label_values").get<std::vector<int>>();
    if (labels != std::vector<int>(kLabelValues.begin(), kLabelValues.end())) {
      throw field_error(header_path, "label_values", "must be [0, 1, 2, 4] (invalid label set)");
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(header_path.string() + ": wrong field type (" + e.what() + ")");
  }

  const std::size_t N = std::size_t(c.height * c.width * c.depth);
  const auto ipath = dir / "intensities.bin";
  if (!std::filesystem::exists(ipath)) throw DataError(ipath.string() + ": file missing");
  const auto ibytes = io::read_file(ipath);
  const std::size_t expect_i = std::size_t(kModalities) * N * 4;
  if (ibytes.size() != expect_i) {
    throw DataError(ipath.string() + ": expected " + std::to_string(expect_i) + " bytes for dims [" +
                    std::to_string(c.height) + "," + std::to_string(c.width) + "," + std::to_string(c.depth) +
                    "], found " + std::to_string(ibytes.size()));
  }
  io::read_f32_le(ibytes.data(), std::size_t(kModalities) * N, c.intensities);
  for (float v : c.intensities) {
    if (!std::isfinite(v)) throw DataError(ipath.string() + ": non-finite intensity value");
  }

  const auto lpath = dir / "labels.bin";
  if (!std::filesystem::exists(lpath)) throw DataError(lpath.string() + ": file missing");
  const auto lbytes = io::read_file(lpath);
  if (lbytes.size() != N) {
    throw DataError(lpath.string() + ": expected " + std::to_string(N) + " bytes, found " +
                    std::to_string(lbytes.size()));
  }
  c.labels.assign(lbytes.begin(), lbytes.end());
  for (std::uint8_t l : c.labels) {
    if (std::find(kLabelValues.begin(), kLabelValues.end(), int(l)) == kLabelValues.end()) {
      throw DataError(lpath.string() + ": label value " + std::to_string(int(l)) + " not in label_values");
    }
  }
  return c;
}

std::vector<std::string> DatasetManifest::case_ids(int fold, bool in_fold) const {
  std::vector<std::string> out;
  for (const auto& e : cases) {
    if ((e.fold == fold) == in_fold) out.push_back(e.case_id);
  }
  return out;
}

DatasetManifest generate_dataset(const std::filesystem::path& dir, int num_cases, std::uint64_t seed,
                                 Index height, Index width, Index depth, int folds,
                                 const GenerateOptions& options) {
  if (num_cases < folds) throw std::invalid_argument("generate_dataset: fewer cases than folds");
  DatasetManifest m;
  m.seed = seed;
  m.height = height;
  m.width = width;
  m.depth = depth;
  m.folds = folds;
  std::vector<std::string> ids;
  for (int i = 0; i < num_cases; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "case_%03d", i);
    ids.emplace_back(name);
  }
  const auto split = kfold_split(ids, folds, derive_seed(seed, 0xF01D));
  for (int i = 0; i < num_cases; ++i) {
    auto c = generate_case(derive_seed(seed, std::uint64_t(i)), height, width, depth, options);
    c.case_id = ids[std::size_t(i)];
    save_case(c, dir / c.case_id);
    int fold = 0;
    for (std::size_t f = 0; f < split.size(); ++f)
      if (std::find(split[f].begin(), split[f].end(), c.case_id) != split[f].end()) fold = int(f);
    m.cases.push_back({c.case_id, c.case_id, fold});
  }
  save_manifest(m, dir);
  return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& e : m.cases) cases.push_back({{"case_id", e.case_id}, {"path", e.path}, {"fold", e.fold}});
  nlohmann::json j{{"seed", m.seed}, {"dims", {m.height, m.width, m.depth}}, {"folds", m.folds}, {"cases", cases}};
  std::ofstream(dir / kManifestName) << j.dump(2) << '\n';
}

DatasetManifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / kManifestName;
  std::ifstream f(path);
  if (!f) throw DataError(path.string() + ": file missing");
  DatasetManifest m;
  try {
    nlohmann::json j;
    f >> j;
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto dims = j.at("dims").get<std::vector<Index>>();
    if (dims.size() != 3) throw field_error(path, "dims", "must have three entries");
    m.height = dims[0];
    m.width = dims[1];
    m.depth = dims[2];
    m.folds = j.at("folds").get<int>();
    for (const auto& e : j.at("cases")) {
      m.cases.push_back({e.at("case_id").get<std::string>(), e.at("path").get<std::string>(), e.at("fold").get<int>()});
      if (m.cases.back().fold < 0 || m.cases.back().fold >= m.folds) {
        throw field_error(path, "fold", "out of range for case " + m.cases.back().case_id);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace dynseg::data
