#include "dynseg/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace dynseg {

namespace fs = std::filesystem;

data::DatasetManifest prepare_dataset(const RunConfig& cfg) {
  const fs::path dir = cfg.data.dir;
  if (!fs::exists(dir / data::kManifestName)) {
    return data::generate_dataset(dir, cfg.data.cases, cfg.data.seed, cfg.data.height, cfg.data.width,
                                  cfg.data.depth, cfg.data.folds);
  }
  auto m = data::load_manifest(dir);
  if (m.height != cfg.data.height || m.width != cfg.data.width || m.depth != cfg.data.depth) {
    throw ConfigError("dataset " + dir.string() + " is " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                      "x" + std::to_string(m.depth) + ", config expects " + std::to_string(cfg.data.height) + "x" +
                      std::to_string(cfg.data.width) + "x" + std::to_string(cfg.data.depth));
  }
  if (static_cast<int>(m.cases.size()) != cfg.data.cases || m.folds != cfg.data.folds) {
    throw ConfigError("dataset " + dir.string() + " has " + std::to_string(m.cases.size()) + " cases in " +
                      std::to_string(m.folds) + " folds, config expects " + std::to_string(cfg.data.cases) +
                      " in " + std::to_string(cfg.data.folds));
  }
  return m;
}

std::vector<data::VolumeCase> load_cases(const data::DatasetManifest& manifest, const fs::path& dir, int fold,
                                         bool in_fold) {
  std::vector<data::VolumeCase> out;
  for (const auto& e : manifest.cases) {
    if ((e.fold == fold) == in_fold) out.push_back(data::load_case(dir / e.path));
  }
  return out;
}

std::vector<data::SliceSample> training_slices(const std::vector<data::VolumeCase>& cases) {
  std::vector<data::SliceSample> out;
  for (const auto& c : cases) {
    auto s = data::slice_iter(c);
    std::move(s.begin(), s.end(), std::back_inserter(out));
  }
  return out;
}

std::vector<fs::path> train(const RunConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  const auto manifest = prepare_dataset(cfg);
  const fs::path out = options.out_dir.empty() ? fs::path(cfg.out_dir) : options.out_dir;
  std::vector<int> folds;
  if (cfg.data.fold >= 0) {
    folds.push_back(cfg.data.fold);
  } else {
    for (int k = 0; k < cfg.data.folds; ++k) folds.push_back(k);
  }
  std::vector<fs::path> finals;
  for (int k : folds) {
    RunConfig fold_cfg = cfg;
    fold_cfg.data.fold = k;
    TrainOptions fold_opts = options;
    fold_opts.out_dir = cfg.data.fold >= 0 ? out : out / ("fold_" + std::to_string(k));
    const auto slices = training_slices(load_cases(manifest, cfg.data.dir, k, false));
    finals.push_back(train_fold(fold_cfg, slices, fold_opts));
  }
  return finals;
}

fs::path resolve_checkpoint(const fs::path& path, int fold) {
  if (fs::exists(path / "state.json")) return path;
  if (fs::exists(path / "checkpoints" / "phase3" / "state.json")) return path / "checkpoints" / "phase3";
  const auto per_fold = path / ("fold_" + std::to_string(fold)) / "checkpoints" / "phase3";
  if (fold >= 0 && fs::exists(per_fold / "state.json")) return per_fold;
  throw std::runtime_error("no checkpoint for fold " + std::to_string(fold) + " under " + path.string());
}

eval::SplitReport evaluate_fold(const RunConfig& cfg, int fold, const Predictor& predict) {
  const auto manifest = prepare_dataset(cfg);
  std::vector<eval::CaseReport> reports;
  for (const auto& c : load_cases(manifest, cfg.data.dir, fold, true)) {
    const auto r = predict(c);
    const eval::Dims dims{c.height, c.width, c.depth};
    reports.push_back(eval::evaluate_case(c.case_id, r.labels, c.labels, dims, c.spacing, &r.ledger));
  }
  return eval::evaluate_split(std::move(reports));
}

Predictor model_predictor(const DynamicModel& model, InferOptions options) {
  return [&model, options](const data::VolumeCase& c) { return infer_case(model, c, options); };
}

Predictor plain_predictor(const DynamicModel& model) {
  return [&model](const data::VolumeCase& c) {
    NoGradGuard no_grad;
    CaseResult result{std::vector<std::uint8_t>(c.labels.size(), 0), FlopsLedger(c.case_id, model.config().cost_model)};
    const auto bits = seg::fixed_bits<float>(quant::kFullPrecisionBits);
    for (Index z = 0; z < c.depth; ++z) {
      const auto slice = data::extract_slice(c, z);
      const auto out = model.unet().forward(slice.image, bits);
      result.ledger.begin_slice(static_cast<int>(z), "whole");
      for (const auto& rec : out.stages) result.ledger.add(CostSource::Stage, rec.stage, rec.nominal_flops, rec.bit);
      const Index HW = c.height * c.width, C = out.logits.dim(1);
      const auto logits = out.logits.data();
      for (Index p = 0; p < HW; ++p) {
        Index best = 0;
        for (Index k = 1; k < C; ++k) {
          if (logits[k * HW + p] > logits[best * HW + p]) best = k;
        }
        result.labels[c.voxel(p / c.width, p % c.width, z)] =
            static_cast<std::uint8_t>(seg::channel_to_label(static_cast<int>(best)));
      }
    }
    return result;
  };
}

namespace {

RunConfig with_overrides(RunConfig cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) cfg.apply_override(o);
  cfg.validate();
  return cfg;
}

}  // namespace

eval::SplitReport run_eval(const fs::path& checkpoint, int fold, const fs::path& out_dir,
                           const std::vector<std::string>& overrides) {
  if (fold >= 0) {
    const auto model = load_checkpoint_model(resolve_checkpoint(checkpoint, fold));
    const auto cfg = with_overrides(model.config(), overrides);
    auto report = evaluate_fold(cfg, fold, model_predictor(model));
    eval::write_report(report, out_dir);
    return report;
  }
  std::vector<eval::CaseReport> all;
  const auto first = load_checkpoint_model(resolve_checkpoint(checkpoint, 0));
  const int folds = first.config().data.folds;
  for (int k = 0; k < folds; ++k) {
    const auto model = load_checkpoint_model(resolve_checkpoint(checkpoint, k));
    const auto cfg = with_overrides(model.config(), overrides);
    auto report = evaluate_fold(cfg, k, model_predictor(model));
    eval::write_report(report, out_dir / ("fold_" + std::to_string(k)));
    std::move(report.cases.begin(), report.cases.end(), std::back_inserter(all));
  }
  auto combined = eval::evaluate_split(std::move(all));
  eval::write_report(combined, out_dir);
  return combined;
}

std::string FlopsReport::to_text() const {
  return eval::format_table("model", {baseline.summary_row("full-precision"), dynamic.summary_row("dynamic")});
}

FlopsReport flops_report(const fs::path& checkpoint, int fold, const std::vector<std::string>& overrides) {
  const int k = std::max(fold, 0);
  const auto model = load_checkpoint_model(resolve_checkpoint(checkpoint, k));
  const auto cfg = with_overrides(model.config(), overrides);
  return {evaluate_fold(cfg, k, plain_predictor(model)), evaluate_fold(cfg, k, model_predictor(model))};
}

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"components", "lambda", "policy-space", "quant-space"};
  return axes;
}

std::vector<std::pair<std::string, std::string>> ablation_variants(const std::string& axis, const RunConfig& cfg) {
  if (axis == "components") {
    return {{"baseline", "components=baseline"}, {"S", "components=S"}, {"Q", "components=Q"}, {"S+Q", "components=S+Q"}};
  }
  if (axis == "lambda") {
    std::vector<std::pair<std::string, std::string>> v;
    for (const char* l : {"0.04", "0.06", "0.08", "0.1"}) v.emplace_back(std::string("lambda=") + l, std::string("lambda=") + l);
    return v;
  }
  if (axis == "policy-space") {
    // Crop sizes 32, 64, 96 where they fit the slice and the U-Net divisor,
    // each alone and all together, plus the crop-free space.
    std::vector<Index> sizes;
    for (Index p : {32, 64, 96}) {
      if (p < std::min(cfg.data.height, cfg.data.width) && p % cfg.model.divisor() == 0) sizes.push_back(p);
    }
    std::vector<std::string> spaces{"skip,whole"};
    for (Index p : sizes) spaces.push_back("skip," + std::to_string(p) + ",whole");
    if (sizes.size() > 1) {
      std::string all = "skip";
      for (Index p : sizes) all += "," + std::to_string(p);
      spaces.push_back(all + ",whole");
    }
    std::vector<std::pair<std::string, std::string>> v;
    for (const auto& s : spaces) v.emplace_back("{" + s + "}", "policy_space=" + s);
    return v;
  }
  if (axis == "quant-space") {
    std::vector<std::pair<std::string, std::string>> v;
    for (const char* q : {"8,12", "8,16", "12,16", "8,12,16"}) {
      v.emplace_back(std::string("{") + q + "}", std::string("quant.candidates=") + q);
    }
    return v;
  }
  std::string valid;
  for (const auto& a : ablation_axes()) valid += (valid.empty() ? "" : ", ") + a;
  throw ConfigError("unknown ablation axis '" + axis + "' (valid axes: " + valid + ")");
}

std::string AblationResult::to_text() const {
  std::vector<eval::TableRow> table;
  for (const auto& r : rows) table.push_back(r.report.summary_row(r.name));
  return eval::format_table(axis, table);
}

nlohmann::json AblationResult::to_json() const {
  nlohmann::json j{{"axis", axis}, {"rows", nlohmann::json::array()}};
  for (const auto& r : rows) j["rows"].push_back({{"name", r.name}, {"report", r.report.to_json()}});
  return j;
}

AblationResult ablate(const RunConfig& cfg, const std::string& axis, const TrainOptions& options) {
  const auto variants = ablation_variants(axis, cfg);
  const fs::path root = (options.out_dir.empty() ? fs::path(cfg.out_dir) : options.out_dir) / axis;
  AblationResult result{axis, {}};
  for (std::size_t i = 0; i < variants.size(); ++i) {
    RunConfig run = cfg;
    run.apply_override(variants[i].second);
    TrainOptions opts = options;
    opts.out_dir = root / std::to_string(i);
    run.out_dir = opts.out_dir.string();
    train(run, opts);
    result.rows.push_back({variants[i].first, run_eval(opts.out_dir, run.data.fold, opts.out_dir / "eval")});
  }
  fs::create_directories(root);
  std::ofstream(root / "ablation.txt") << result.to_text();
  std::ofstream(root / "ablation.json") << result.to_json().dump(2) << '\n';
  return result;
}

}  // namespace dynseg
