#include "dynseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace dynseg::eval {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_size(std::size_t a, std::size_t b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": masks differ in size");
}

// Lower envelope of parabolas w^2 (p - q)^2 + f(q) over the finite samples
// (Felzenszwalb & Huttenlocher); writes squared distances into `out`.
void distance_1d(const std::vector<double>& f, std::vector<double>& out, double w, std::vector<Index>& v,
                 std::vector<double>& z) {
  const Index n = static_cast<Index>(f.size());
  const double w2 = w * w;
  Index k = -1;
  for (Index q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double fq = f[q] + w2 * double(q) * double(q);
    double s = -kInf;
    while (k >= 0) {
      const Index r = v[k];
      s = (fq - (f[r] + w2 * double(r) * double(r))) / (2.0 * w2 * double(q - r));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInf : s;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(out.begin(), out.end(), kInf);
    return;
  }
  Index j = 0;
  for (Index p = 0; p < n; ++p) {
    while (z[j + 1] < double(p)) ++j;
    const double d = double(p - v[j]);
    out[p] = w2 * d * d + f[v[j]];
  }
}

// Squared Euclidean distance (mm^2) from every voxel to the nearest set voxel.
std::vector<double> squared_distance_transform(const Mask& sites, const Dims& dims, const data::Spacing& sp) {
  const Index H = dims.height, W = dims.width, D = dims.depth;
  std::vector<double> g(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) g[i] = sites[i] ? 0.0 : kInf;
  const Index longest = std::max({H, W, D});
  std::vector<double> f, out;
  std::vector<Index> v(static_cast<std::size_t>(longest));
  std::vector<double> z(static_cast<std::size_t>(longest) + 1);
  const auto pass = [&](Index n, Index count, auto index_of, double w) {
    f.resize(std::size_t(n));
    out.resize(std::size_t(n));
    for (Index line = 0; line < count; ++line) {
      for (Index i = 0; i < n; ++i) f[std::size_t(i)] = g[index_of(line, i)];
      distance_1d(f, out, w, v, z);
      for (Index i = 0; i < n; ++i) g[index_of(line, i)] = out[std::size_t(i)];
    }
  };
  pass(D, H * W, [&](Index line, Index i) { return std::size_t(line * D + i); }, sp.z);
  pass(W, H * D, [&](Index line, Index i) { return std::size_t(((line / D) * W + i) * D + line % D); }, sp.x);
  pass(H, W * D, [&](Index line, Index i) { return std::size_t((i * W + line / D) * D + line % D); }, sp.y);
  return g;
}

bool any(std::span<const std::uint8_t> m) {
  return std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; });
}

}  // namespace

RegionMasks region_masks(std::span<const std::uint8_t> labels) {
  RegionMasks r;
  r.et.resize(labels.size());
  r.tc.resize(labels.size());
  r.wt.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto l = labels[i];
    if (l != 0 && l != 1 && l != 2 && l != 4) {
      throw std::invalid_argument("region_masks: label value " + std::to_string(int(l)) + " at voxel " +
                                  std::to_string(i) + " is not in {0,1,2,4}");
    }
    r.et[i] = l == 4;
    r.tc[i] = l == 1 || l == 4;
    r.wt[i] = l != 0;
  }
  return r;
}

double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  require_same_size(pred.size(), gt.size(), "dice_score");
  std::size_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    inter += a && b;
    p += a;
    g += b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * double(inter) / double(p + g);
}

Mask surface(std::span<const std::uint8_t> mask, const Dims& dims) {
  require_same_size(mask.size(), dims.size(), "surface");
  const Index H = dims.height, W = dims.width, D = dims.depth;
  Mask out(mask.size(), 0);
  const auto at = [&](Index y, Index x, Index z) {
    if (y < 0 || x < 0 || z < 0 || y >= H || x >= W || z >= D) return false;
    return mask[std::size_t((y * W + x) * D + z)] != 0;
  };
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      for (Index z = 0; z < D; ++z) {
        if (!at(y, x, z)) continue;
        out[std::size_t((y * W + x) * D + z)] = !(at(y - 1, x, z) && at(y + 1, x, z) && at(y, x - 1, z) &&
                                                  at(y, x + 1, z) && at(y, x, z - 1) && at(y, x, z + 1));
      }
  return out;
}

std::vector<double> directed_surface_distances(std::span<const std::uint8_t> from,
                                               std::span<const std::uint8_t> to, const Dims& dims,
                                               const data::Spacing& spacing) {
  require_same_size(from.size(), to.size(), "directed_surface_distances");
  const auto sa = surface(from, dims), sb = surface(to, dims);
  if (!any(sa) || !any(sb)) throw std::invalid_argument("directed_surface_distances: empty surface");
  const auto dt = squared_distance_transform(sb, dims, spacing);
  std::vector<double> out;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i]) out.push_back(std::sqrt(dt[i]));
  }
  return out;
}

double nearest_rank_percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("nearest_rank_percentile: no values");
  if (!(q > 0 && q <= 100)) throw std::invalid_argument("nearest_rank_percentile: q must be in (0, 100]");
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * double(values.size())));
  return values[std::max<std::size_t>(rank, 1) - 1];
}

double hd95(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, const Dims& dims,
            const data::Spacing& spacing) {
  require_same_size(pred.size(), gt.size(), "hd95");
  const bool p = any(pred), g = any(gt);
  if (!p && !g) return 0.0;
  if (p != g) return kHd95Sentinel;
  return std::max(nearest_rank_percentile(directed_surface_distances(pred, gt, dims, spacing), 95.0),
                  nearest_rank_percentile(directed_surface_distances(gt, pred, dims, spacing), 95.0));
}

std::string decision_bucket(const std::string& label) {
  if (label.rfind("crop", 0) == 0) return "crop";
  return label;
}

CaseReport evaluate_case(const std::string& case_id, std::span<const std::uint8_t> pred_labels,
                         std::span<const std::uint8_t> gt_labels, const Dims& dims,
                         const data::Spacing& spacing, const FlopsLedger* ledger) {
  require_same_size(pred_labels.size(), gt_labels.size(), "evaluate_case");
  require_same_size(pred_labels.size(), dims.size(), "evaluate_case");
  const auto p = region_masks(pred_labels), g = region_masks(gt_labels);
  CaseReport r;
  r.case_id = case_id;
  const Mask* pm[3] = {&p.et, &p.wt, &p.tc};
  const Mask* gm[3] = {&g.et, &g.wt, &g.tc};
  for (int i = 0; i < 3; ++i) {
    r.dice[i] = dice_score(*pm[i], *gm[i]);
    r.hd95[i] = hd95(*pm[i], *gm[i], dims, spacing);
  }
  r.slices = std::size_t(dims.depth);
  if (ledger) {
    r.gflops_per_case = ledger->per_case_gflops();
    r.gflops_per_slice = ledger->per_slice_mean_gflops();
    for (const auto& s : ledger->slices()) {
      ++r.decisions[decision_bucket(s.decision)];
      for (const auto& e : s.entries) {
        if (e.source != CostSource::Stage) continue;
        if (r.bits_per_stage.size() <= std::size_t(e.stage)) r.bits_per_stage.resize(std::size_t(e.stage) + 1);
        ++r.bits_per_stage[std::size_t(e.stage)][e.bit];
      }
    }
  }
  return r;
}

nlohmann::json CaseReport::to_json() const {
  nlohmann::json j{{"case_id", case_id}, {"slices", slices}, {"gflops_per_case", gflops_per_case},
                   {"gflops_per_slice", gflops_per_slice}, {"decisions", decisions}};
  for (int i = 0; i < 3; ++i) {
    j["dice"][kRegionNames[i]] = dice[i];
    j["hd95"][kRegionNames[i]] = hd95[i];
  }
  nlohmann::json bits = nlohmann::json::array();
  for (const auto& stage : bits_per_stage) {
    nlohmann::json h = nlohmann::json::object();
    for (const auto& [b, n] : stage) h[std::to_string(b)] = n;
    bits.push_back(h);
  }
  j["bits_per_stage"] = bits;
  return j;
}

SplitReport evaluate_split(std::vector<CaseReport> cases) {
  SplitReport s;
  s.cases = std::move(cases);
  if (s.cases.empty()) return s;
  const double n = double(s.cases.size());
  for (const auto& c : s.cases) {
    for (int i = 0; i < 3; ++i) {
      s.mean_dice[i] += c.dice[i] / n;
      s.mean_hd95[i] += c.hd95[i] / n;
    }
    s.mean_gflops_per_case += c.gflops_per_case / n;
    s.mean_gflops_per_slice += c.gflops_per_slice / n;
    for (const auto& [k, v] : c.decisions) s.decisions[k] += v;
  }
  return s;
}

nlohmann::json SplitReport::to_json() const {
  nlohmann::json j;
  j["cases"] = nlohmann::json::array();
  for (const auto& c : cases) j["cases"].push_back(c.to_json());
  auto& a = j["aggregate"];
  a["num_cases"] = cases.size();
  for (int i = 0; i < 3; ++i) {
    a["dice"][kRegionNames[i]] = mean_dice[i];
    a["hd95"][kRegionNames[i]] = mean_hd95[i];
  }
  a["gflops_per_case"] = mean_gflops_per_case;
  a["gflops_per_slice"] = mean_gflops_per_slice;
  a["decisions"] = decisions;
  return j;
}

std::string format_table(const std::string& first_header, const std::vector<TableRow>& rows) {
  std::size_t name_width = std::max<std::size_t>(12, first_header.size() + 2);
  for (const auto& r : rows) name_width = std::max(name_width, r.name.size() + 2);
  const int nw = static_cast<int>(name_width);
  std::ostringstream os;
  os << std::left << std::setw(nw) << first_header << std::right;
  for (const char* h : {"Dice_ET", "Dice_WT", "Dice_TC", "HD95_ET", "HD95_WT", "HD95_TC"}) os << std::setw(9) << h;
  os << std::setw(13) << "GFLOPs/case" << std::setw(14) << "GFLOPs/slice" << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(nw) << r.name << std::right << std::fixed;
    for (double v : r.dice) os << std::setw(9) << std::setprecision(4) << v;
    for (double v : r.hd95) os << std::setw(9) << std::setprecision(2) << v;
    os << std::setw(13) << std::setprecision(3) << r.gflops_per_case << std::setw(14) << std::setprecision(4)
       << r.gflops_per_slice << '\n';
  }
  return os.str();
}

TableRow SplitReport::summary_row(std::string name) const {
  return {std::move(name), mean_dice, mean_hd95, mean_gflops_per_case, mean_gflops_per_slice};
}

std::string SplitReport::to_text() const {
  std::vector<TableRow> rows;
  for (const auto& c : cases) rows.push_back({c.case_id, c.dice, c.hd95, c.gflops_per_case, c.gflops_per_slice});
  rows.push_back(summary_row("mean"));
  return format_table("case", rows);
}

void write_report(const SplitReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "report.json") << report.to_json().dump(2) << '\n';
  std::ofstream(dir / "report.txt") << report.to_text();
}

}  // namespace dynseg::eval
