#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dynseg/config.hpp"
#include "dynseg/data.hpp"
#include "dynseg/model.hpp"
#include "dynseg/pipeline.hpp"
#include "dynseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace dynseg;

namespace {

int parse_fold(const std::string& text) {
  if (text == "all") return -1;
  try {
    std::size_t used = 0;
    const int f = std::stoi(text, &used);
    if (used == text.size() && f >= 0) return f;
  } catch (const std::exception&) {
  }
  throw CLI::ValidationError("--fold", "expected a fold index or 'all', got '" + text + "'");
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig{} : RunConfig::from_file(path);
  for (const auto& o : overrides) cfg.apply_override(o);
  cfg.validate();
  return cfg;
}

void print_epoch(const EpochStats& s) {
  std::fprintf(stderr, "phase %d epoch %d  loss %.4f  dice %.4f  gflops %.4f  bits %.2f  tau %.2f  %.1fs\n", s.phase,
               s.epoch, s.loss, s.dice, s.gflops, s.mean_bits, s.tau, s.seconds);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic slice routing and quantization for volumetric segmentation"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string resume;
  auto* train_cmd = app.add_subcommand("train", "Run the three-phase training schedule");
  train_cmd->add_option("--config", config_path, "Flat key = value config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--override", overrides, "key=value, may repeat");
  train_cmd->add_option("--resume", resume, "Continue from a phase checkpoint")->check(CLI::ExistingDirectory);

  std::string checkpoint, case_path, out_path, force_policy;
  std::optional<int> force_bits;
  auto* infer_cmd = app.add_subcommand("infer", "Segment one case and write labels plus a FLOPs ledger");
  infer_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingDirectory);
  infer_cmd->add_option("--case", case_path, "Case directory (header.json, intensities.bin)")
      ->required()
      ->check(CLI::ExistingDirectory);
  infer_cmd->add_option("--out", out_path)->required();
  infer_cmd->add_option("--force-policy", force_policy, "skip, whole, crop or a crop label such as crop32");
  infer_cmd->add_option("--force-bits", force_bits, "Run every quantized stage at this bit-width");

  std::string fold_text = "0";
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate held-out cases and write report.json / report.txt");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint or run directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--fold", fold_text, "Fold index or 'all'");
  eval_cmd->add_option("--out", out_path, "Report directory (default <checkpoint>/eval)");
  eval_cmd->add_option("--override", overrides, "key=value applied to the checkpoint config, e.g. data.dir=...");

  auto* report_cmd = app.add_subcommand("flops-report", "Full-precision vs dynamic summary table");
  report_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingDirectory);
  report_cmd->add_option("--fold", fold_text, "Fold index");
  report_cmd->add_option("--out", out_path, "Also write the table to this file");
  report_cmd->add_option("--override", overrides, "key=value applied to the checkpoint config");

  std::string axis;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate one run per value of an axis");
  ablate_cmd->add_option("--axis", axis, "components, lambda, policy-space or quant-space")->required();
  ablate_cmd->add_option("--config", config_path)->check(CLI::ExistingFile);
  ablate_cmd->add_option("--override", overrides, "key=value, may repeat");

  std::uint64_t seed = 0;
  int cases = 16, folds = 5;
  Index height = 64, width = 64, depth = 32;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic dataset with a fold manifest");
  gen_cmd->add_option("--seed", seed)->required();
  gen_cmd->add_option("--cases", cases)->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--out", out_path)->required();
  gen_cmd->add_option("--height", height);
  gen_cmd->add_option("--width", width);
  gen_cmd->add_option("--depth", depth);
  gen_cmd->add_option("--folds", folds);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      const auto cfg = load_config(config_path, overrides);
      TrainOptions opts;
      opts.on_epoch = print_epoch;
      if (!resume.empty()) opts.resume_from = fs::path(resume);
      for (const auto& p : train(cfg, opts)) std::cout << p.string() << '\n';
    } else if (*infer_cmd) {
      const auto ckpt = resolve_checkpoint(checkpoint, 0);
      const auto model = load_checkpoint_model(ckpt);
      InferOptions opts;
      if (!force_policy.empty()) opts.force_policy = force_policy;
      opts.force_bits = force_bits;
      const auto volume = data::load_case(case_path);
      const auto result = infer_case(model, volume, opts);
      fs::create_directories(out_path);
      std::ofstream(fs::path(out_path) / "labels.bin", std::ios::binary)
          .write(reinterpret_cast<const char*>(result.labels.data()), static_cast<std::streamsize>(result.labels.size()));
      const nlohmann::json header{{"case_id", volume.case_id},
                                  {"dims", {volume.height, volume.width, volume.depth}},
                                  {"dtype", "u8"},
                                  {"label_values", {0, 1, 2, 4}}};
      std::ofstream(fs::path(out_path) / "header.json") << header.dump(2) << '\n';
      std::ofstream(fs::path(out_path) / "ledger.json") << result.ledger.to_json().dump(2) << '\n';
      std::cout << volume.case_id << ": " << result.ledger.per_case_gflops() << " GFLOPs\n";
    } else if (*eval_cmd) {
      const int fold = parse_fold(fold_text);
      const fs::path out = out_path.empty() ? fs::path(checkpoint) / "eval" : fs::path(out_path);
      const auto report = run_eval(checkpoint, fold, out, overrides);
      std::cout << report.to_text();
    } else if (*report_cmd) {
      const auto table = flops_report(checkpoint, parse_fold(fold_text), overrides).to_text();
      std::cout << table;
      if (!out_path.empty()) std::ofstream(out_path) << table;
    } else if (*ablate_cmd) {
      const auto cfg = load_config(config_path, overrides);
      ablation_variants(axis, cfg);  // rejects unknown axes before any training
      TrainOptions opts;
      opts.on_epoch = print_epoch;
      std::cout << ablate(cfg, axis, opts).to_text();
    } else if (*gen_cmd) {
      const auto m = data::generate_dataset(out_path, cases, seed, height, width, depth, folds);
      std::cout << "wrote " << m.cases.size() << " cases to " << out_path << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
