// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,4,7] [--work DIR]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dynseg/config.hpp"
#include "dynseg/ledger.hpp"
#include "dynseg/losses.hpp"
#include "dynseg/metrics.hpp"
#include "dynseg/model.hpp"
#include "dynseg/ops.hpp"
#include "dynseg/pipeline.hpp"
#include "dynseg/quantization.hpp"
#include "dynseg/spatial_policy.hpp"
#include "dynseg/trainer.hpp"
#include "dynseg/unet.hpp"
#include "gradcheck.hpp"
#include "metric_oracles.hpp"

using namespace dynseg;
using dynseg::testing::grad_check;
using dynseg::testing::random_projection;
using dynseg::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects failures without stopping at the first one.
class Checker {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failures_++ < 5) notes_ += (notes_.empty() ? "" : "; ") + what;
  }
  void note(const std::string& s) { info_ += (info_.empty() ? "" : ", ") + s; }
  Outcome outcome() const {
    if (failures_ == 0) return {true, info_};
    return {false, std::to_string(failures_) + " failed check(s): " + notes_ + (info_.empty() ? "" : " | " + info_)};
  }

 private:
  int failures_ = 0;
  std::string notes_, info_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Every training-log record except its wall-clock duration.
std::vector<nlohmann::json> log_without_timing(const fs::path& p) {
  std::vector<nlohmann::json> records;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    auto j = nlohmann::json::parse(line);
    j.erase("seconds");
    records.push_back(std::move(j));
  }
  return records;
}

// 1. Finite-difference gradient suite over every differentiable op.
Outcome gradient_suite() {
  Checker c;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_op;
  std::size_t checks = 0;
  const auto run = [&](const std::string& op, const std::function<Tensor64(const std::vector<Tensor64>&)>& f,
                       std::vector<Tensor64> inputs) {
    const auto r = grad_check(f, std::move(inputs));
    ++checks;
    c.expect(r.max_rel_error < 1e-4, op + " rel err " + fmt("%.2e", r.max_rel_error));
    c.expect(r.max_abs_numeric > 1e-8, op + " has a vanishing gradient");
    if (r.max_rel_error > worst) worst = r.max_rel_error, worst_op = op;
  };

  struct ConvShape {
    Shape x, w;
    Index stride, pad;
  };
  const ConvShape convs[] = {{{1, 2, 6, 6}, {3, 2, 3, 3}, 1, 1}, {{2, 3, 8, 8}, {2, 3, 4, 4}, 2, 1}, {{1, 1, 5, 7}, {2, 1, 3, 3}, 1, 0}};
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(100 + s);
    const auto& cs = convs[s];
    run("conv2d", [&](const auto& in) { return random_projection(ops::conv2d(in[0], in[1], in[2], cs.stride, cs.pad), s); },
        {random_tensor(cs.x, rng), random_tensor(cs.w, rng), random_tensor({cs.w[0]}, rng)});
  }
  const Shape norm_shapes[] = {{1, 2, 4, 4}, {2, 3, 3, 5}, {1, 4, 6, 2}};
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(200 + s);
    const Shape& sh = norm_shapes[s];
    run("instance_norm", [&](const auto& in) { return random_projection(ops::instance_norm(in[0], in[1], in[2]), s); },
        {random_tensor(sh, rng), random_tensor({sh[1]}, rng, 0.5, 1.5), random_tensor({sh[1]}, rng)});
  }
  const std::array<Index, 4> interp[] = {{4, 4, 8, 8}, {6, 5, 3, 4}, {3, 7, 7, 3}};
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(300 + s);
    const auto [h, w, oh, ow] = interp[s];
    run("interpolate_bilinear",
        [&, oh = oh, ow = ow](const auto& in) { return random_projection(ops::interpolate_bilinear(in[0], oh, ow), s); },
        {random_tensor({1, 2, h, w}, rng)});
  }
  const Index crops[] = {4, 6, 8};
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(400 + s);
    const Index P = crops[s];
    const double lo = P / 2.0 + 0.2, hi = 12 - P / 2.0 - 0.2;
    Tensor64 center({2}, {rng.uniform(lo, hi), rng.uniform(lo, hi)}, true);
    run("extract_crop",
        [&](const auto& in) { return random_projection(policy::extract_crop(in[0], in[1], P), s); },
        {random_tensor({1, 2, 12, 12}, rng), center});
  }
  const std::pair<Shape, Index> soft[] = {{{5}, 0}, {{2, 4, 3}, 1}, {{1, 4, 3, 3}, 1}};
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(500 + s);
    const auto& [sh, axis] = soft[s];
    run("softmax", [&](const auto& in) { return random_projection(ops::softmax(in[0], axis), s); },
        {random_tensor(sh, rng, -2, 2)});
  }
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(600 + s);
    const Index h = 3 + static_cast<Index>(s), w = 4;
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(h * w));
    const std::uint8_t values[] = {0, 1, 2, 4};
    for (auto& l : labels) l = values[rng.below(4)];
    const auto onehot = loss::onehot_from_labels<double>(labels, h, w);
    run("dice_loss", [&](const auto& in) { return loss::dice_loss(ops::softmax(in[0], 1), onehot); },
        {random_tensor({1, 4, h, w}, rng, -2, 2)});
  }
  const double taus[] = {0.5, 1.0, 5.0};
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(700 + s);
    run("gumbel_softmax (soft)",
        [&](const auto& in) {
          Rng noise(42 + s);  // identical noise for every evaluation
          return random_projection(policy::gumbel_softmax<double>(in[0], taus[s], &noise, false).probs, s);
        },
        {random_tensor({static_cast<Index>(3 + s)}, rng, -1, 1)});
  }
  for (std::uint64_t s = 0; s < 3; ++s) {
    quant::BitSelector<double> sel(2 + s, s + 1);
    Rng rng(800 + s);
    for (auto& [_, t] : sel.params().entries()) {
      for (auto& v : t.mutable_data()) v = rng.uniform(-1, 1);
    }
    std::vector<Tensor64> inputs;
    for (auto& [_, t] : sel.params().entries()) inputs.push_back(t);
    inputs.push_back(random_tensor({2}, rng, 0.1, 2.0));
    run("bit selector MLP", [&](const auto& in) { return random_projection(sel.forward(in.back(), 0.8), s); },
        inputs);
  }
  const quant::BitCandidateSet ste_sets[] = {quant::BitCandidateSet({8, 16}), quant::BitCandidateSet({4, 8, 16}),
                                             quant::BitCandidateSet({2, 6, 12, 16})};
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(900 + s);
    const auto& cands = ste_sets[s];
    run("STE soft bit",
        [&](const auto& in) { return quant::ste_select(ops::softmax(in[0], 0), cands).soft_bit; },
        {random_tensor({static_cast<Index>(cands.size())}, rng, -1, 1)});
  }
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(1000 + s);
    const quant::BitCandidateSet cands({4, 8, 16});
    const auto model = s == 1 ? flops::CostModel::Quadratic : flops::CostModel::Linear;
    run("gflops_loss",
        [&](const auto& in) {
          std::vector<loss::BranchCost<double>> br{
              {1e6, {}},
              {2e6, {{3e8, 32, ops::softmax(in[1], 0)}, {5e8, 32, {}}}},
              {3e6, {{9e8, 32, ops::softmax(in[1], 0)}, {4e8, 32, ops::softmax(in[2], 0)}}},
          };
          return loss::gflops_loss(ops::softmax(in[0], 0), br, cands, model);
        },
        {random_tensor({3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
  }
  const double elapsed = seconds_since(t0);
  c.expect(elapsed < 120.0, "runtime " + fmt("%.1f s", elapsed) + " exceeds 2 min");
  c.note(std::to_string(checks) + " checks over 10 ops");
  c.note("worst rel err " + fmt("%.2e", worst) + " (" + worst_op + ")");
  c.note(fmt("%.1f s", elapsed));
  return c.outcome();
}

// 2. Quantizer algebra on a 1e4-point tensor.
Outcome quantizer_algebra() {
  Checker c;
  Rng rng(2024);
  std::vector<double> v(10000);
  for (auto& x : v) x = rng.normal() * 1.7;
  const Tensor64 t({10000}, v);
  const double a = quant::max_abs(t);
  const auto q8 = quant::quantize(t, 8, a);
  const auto q8_in_16 = quant::quantize(q8, 16, a);
  c.expect(std::equal(q8.data().begin(), q8.data().end(), q8_in_16.data().begin()), "8-bit grid not inside 16-bit grid");
  for (int b : {2, 4, 8, 16}) {
    const double r = quant::grid_half_range(b);
    const auto q = quant::quantize(t, b, a);
    const auto qq = quant::quantize(q, b, a);
    c.expect(std::equal(q.data().begin(), q.data().end(), qq.data().begin()), "idempotence fails at b=" + std::to_string(b));
    double worst = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      worst = std::max(worst, std::abs(q.at(i) - std::clamp(v[i], -a, a)));
    }
    c.expect(worst <= a / (2 * r) * (1 + 1e-12), "error bound fails at b=" + std::to_string(b));
    // Every grid point k * a / r, |k| <= r, is a fixed point.
    std::vector<double> grid;
    for (double k = -r; k <= r; k += 1) grid.push_back(k * a / r);
    const Tensor64 g({static_cast<Index>(grid.size())}, grid);
    const auto qg = quant::quantize(g, b, a);
    c.expect(std::equal(g.data().begin(), g.data().end(), qg.data().begin()), "grid points move at b=" + std::to_string(b));
  }
  c.note("b in {2,4,8,16}, 1e4 points, 65537 grid points at b=16");
  return c.outcome();
}

// 3. STE contract.
Outcome ste_contract() {
  Checker c;
  Rng rng(3);
  std::size_t draws = 0;
  for (const auto& cands : {quant::BitCandidateSet({8, 16}), quant::BitCandidateSet({4, 8, 16}),
                            quant::BitCandidateSet({2, 8, 12, 16})}) {
    const auto& bits = cands.bits();
    for (int trial = 0; trial < 500; ++trial, ++draws) {
      std::vector<double> p(bits.size());
      double sum = 0;
      for (auto& x : p) sum += (x = rng.uniform_open());
      for (auto& x : p) x /= sum;
      Tensor64 probs({static_cast<Index>(p.size())}, p, true);
      const auto choice = quant::ste_select(probs, cands);
      c.expect(std::find(bits.begin(), bits.end(), choice.chosen_bit) != bits.end(), "forward not a candidate");
      const auto best = std::max_element(p.begin(), p.end()) - p.begin();
      c.expect(choice.chosen_bit == bits[static_cast<std::size_t>(best)], "forward is not the argmax");
      choice.soft_bit.backward();
      for (std::size_t k = 0; k < bits.size(); ++k) {
        c.expect(probs.grad()[k] == static_cast<double>(bits[k]), "d soft_bit / d P_k != b_k");
      }
    }
    // Ties resolve to the lower bit.
    std::vector<double> tie(bits.size(), 0.0);
    tie.front() = tie.back() = 0.5;
    c.expect(quant::ste_select(Tensor64({static_cast<Index>(tie.size())}, tie), cands).chosen_bit == bits.front(),
             "tie did not pick the lower bit");
    std::fill(tie.begin(), tie.end(), 1.0 / static_cast<double>(bits.size()));
    c.expect(quant::ste_select(Tensor64({static_cast<Index>(tie.size())}, tie), cands).chosen_bit == bits.front(),
             "uniform tie did not pick the lowest bit");
  }
  c.note(std::to_string(draws) + " random probability vectors");
  return c.outcome();
}

// 4. Spatial and bit scaling of stage cost, read back from a ledger.
Outcome spatial_scaling() {
  Checker c;
  NoGradGuard no_grad;
  const seg::UNetConfig cfg;
  seg::UNet<float> net(cfg, 7);
  Rng rng(4);
  std::vector<float> px(4 * 240 * 240);
  for (auto& v : px) v = static_cast<float>(rng.normal());
  const Tensor image({1, 4, 240, 240}, px);
  const Tensor center({2}, {120.0f, 120.0f});
  const auto bits8 = seg::fixed_bits<float>(8);

  FlopsLedger ledger("scaling");
  for (const auto& [label, entry] : {std::pair{"crop96", policy::PolicyEntry{policy::Action::Crop, 96}},
                                     std::pair{"whole", policy::PolicyEntry{policy::Action::Whole, 0}}}) {
    const auto out = net.forward_routed(image, entry, center, bits8);
    ledger.begin_slice(0, label);
    for (const auto& rec : out.stages) ledger.add(CostSource::Stage, rec.stage, rec.nominal_flops, rec.bit);
  }
  const auto quantized_sum = [&](const SliceLedger& s, bool effective) {
    double total = 0.0;
    for (const auto& e : s.entries) {
      if (e.stage < static_cast<int>(seg::num_quantized_stages(cfg))) total += effective ? e.effective_flops : e.nominal_flops;
    }
    return total;
  };
  const auto& crop = ledger.slices()[0];
  const auto& whole = ledger.slices()[1];
  const double ratio = quantized_sum(crop, false) / quantized_sum(whole, false);
  c.expect(std::abs(ratio - 0.16) <= 1e-6, "crop/whole stage ratio " + fmt("%.9f", ratio));
  const double analytic = [&] {
    const auto a = seg::stage_nominal_flops(cfg, 96, 96), b = seg::stage_nominal_flops(cfg, 240, 240);
    double sa = 0, sb = 0;
    for (std::size_t i = 0; i + 1 < a.size(); ++i) sa += a[i], sb += b[i];
    return sa / sb;
  }();
  c.expect(std::abs(analytic - ratio) <= 1e-12, "ledger disagrees with analytic stage flops");
  for (const auto* s : {&crop, &whole}) {
    const double eff = quantized_sum(*s, true) / quantized_sum(*s, false);
    c.expect(eff == 0.25, "8-bit effective/nominal " + fmt("%.9f", eff) + " on " + s->decision);
  }
  c.note("crop96/whole on 240x240 = " + fmt("%.9f", ratio));
  c.note("8-bit effective/nominal = 0.25");
  return c.outcome();
}

// 5. Routing equivalences.
Outcome routing_equivalences() {
  Checker c;
  {
    NoGradGuard no_grad;
    seg::UNet<float> net(seg::UNetConfig{}, 5);
    for (std::uint64_t s = 0; s < 3; ++s) {
      Rng rng(50 + s);
      std::vector<float> px(4 * 64 * 64);
      for (auto& v : px) v = static_cast<float>(rng.normal());
      const Tensor image({1, 4, 64, 64}, px);
      const auto bits = seg::fixed_bits<float>(s == 0 ? 32 : 8);
      const auto whole = net.forward(image, bits).logits;
      const auto crop = net.forward_routed(image, {policy::Action::Crop, 64}, Tensor({2}, {32.0f, 32.0f}), bits).logits;
      double diff = 0.0;
      for (std::size_t i = 0; i < whole.numel(); ++i) diff = std::max(diff, double(std::abs(whole.at(i) - crop.at(i))));
      c.expect(diff <= 1e-4, "full-size crop differs from whole by " + fmt("%.2e", diff));
    }
  }
  RunConfig cfg;
  DynamicModel model(cfg);
  const auto volume = data::generate_case(77, 64, 64, 32);
  InferOptions skip;
  skip.force_policy = "skip";
  const auto skipped = infer_case(model, volume, skip);
  c.expect(std::all_of(skipped.labels.begin(), skipped.labels.end(), [](auto v) { return v == 0; }),
           "skip produced foreground");
  for (const auto& s : skipped.ledger.slices()) {
    c.expect(s.stage_entry_count() == 0, "skip ledger has segmentation entries");
    for (const auto& e : s.entries) c.expect(e.source != CostSource::Selector, "skip ledger has selector entries");
  }
  InferOptions fp;
  fp.force_policy = "whole";
  fp.force_bits = 32;
  const auto routed = infer_case(model, volume, fp);
  const auto plain = plain_predictor(model)(volume);
  c.expect(routed.labels == plain.labels, "whole + 32-bit differs from the plain U-Net");
  {
    NoGradGuard no_grad;
    const auto slice = data::extract_slice(volume, 12);
    const auto a = model.unet().forward(slice.image, seg::fixed_bits<float>(32)).logits;
    const auto b = model.unet()
                       .forward_routed(slice.image, {policy::Action::Whole, 0}, {}, seg::fixed_bits<float>(32))
                       .logits;
    c.expect(std::equal(a.data().begin(), a.data().end(), b.data().begin()), "whole logits not bit-identical");
  }
  c.note("crop(P=H=W) vs whole on 3 inputs, skip and whole+32 on a 64x64x32 case");
  return c.outcome();
}

// 6. Metric oracles and region nesting.
Outcome metric_oracles() {
  Checker c;
  const eval::Dims d{8, 8, 4};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(6000 + seed);
    auto a = dynseg::testing::random_mask(d, rng, rng.uniform(0.05, 0.6));
    auto b = dynseg::testing::random_mask(d, rng, rng.uniform(0.05, 0.6));
    if (std::count(a.begin(), a.end(), 1) == 0) a[0] = 1;
    if (std::count(b.begin(), b.end(), 1) == 0) b[d.size() - 1] = 1;
    const dynseg::testing::BruteForce bf{d, {}};
    c.expect(eval::dice_score(a, b) == bf.dice(a, b), "dice mismatch at seed " + std::to_string(seed));
    c.expect(eval::hd95(a, b, d, {}) == bf.hd(a, b), "hd95 mismatch at seed " + std::to_string(seed));
  }
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(7000 + seed);
    std::vector<std::uint8_t> labels(d.size());
    const std::uint8_t values[] = {0, 1, 2, 4};
    for (auto& l : labels) l = values[rng.below(4)];
    const auto r = eval::region_masks(labels);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      c.expect(!r.et[i] || r.tc[i], "ET not inside TC");
      c.expect(!r.tc[i] || r.wt[i], "TC not inside WT");
      c.expect(r.tc[i] == (labels[i] == 1 || labels[i] == 4), "TC is not labels 1 and 4");
    }
  }
  c.note("50 random 8x8x4 mask pairs, exact equality");
  return c.outcome();
}

struct DeskResult {
  double train_seconds = 0.0;
  double wt_dice = 0.0;
  double gflops_per_slice = 0.0;
  double gflops_ratio = 0.0;
  double skip_on_empty = 0.0;
  std::size_t empty_slices = 0;
};

DeskResult desk_run(const RunConfig& cfg) {
  DeskResult r;
  const auto t0 = std::chrono::steady_clock::now();
  const auto finals = train(cfg);
  r.train_seconds = seconds_since(t0);
  const auto model = load_checkpoint_model(finals.front());
  const auto dynamic = evaluate_fold(cfg, cfg.data.fold, model_predictor(model));
  const auto baseline = evaluate_fold(cfg, cfg.data.fold, plain_predictor(model));
  eval::write_report(dynamic, fs::path(cfg.out_dir) / "eval");
  r.wt_dice = dynamic.mean_dice[eval::WT];
  r.gflops_per_slice = dynamic.mean_gflops_per_slice;
  r.gflops_ratio = dynamic.mean_gflops_per_slice / baseline.mean_gflops_per_slice;

  std::size_t skipped = 0;
  const auto manifest = prepare_dataset(cfg);
  for (const auto& volume : load_cases(manifest, cfg.data.dir, cfg.data.fold, true)) {
    const auto result = infer_case(model, volume);
    for (const auto& s : result.ledger.slices()) {
      const auto slice = data::extract_slice(volume, s.slice);
      if (slice.has_foreground()) continue;
      ++r.empty_slices;
      skipped += s.decision == "skip";
    }
  }
  r.skip_on_empty = r.empty_slices ? static_cast<double>(skipped) / static_cast<double>(r.empty_slices) : 0.0;
  return r;
}

fs::path g_work = "acceptance_work";
std::optional<DeskResult> g_desk;  // criterion 7's run, reused by the sweep

RunConfig desk_config(const std::string& name) {
  auto cfg = RunConfig::from_file(fs::path(DYNSEG_SOURCE_DIR) / "configs" / "desk.conf");
  cfg.data.dir = (g_work / "data_desk").string();
  cfg.out_dir = (g_work / name).string();
  cfg.validate();
  return cfg;
}

// 7. End-to-end desk run.
Outcome desk_criterion() {
  Checker c;
  const auto cfg = desk_config("desk");
  const auto r = desk_run(cfg);
  g_desk = r;
  c.expect(r.train_seconds < 1800.0, "training took " + fmt("%.0f s", r.train_seconds));
  c.expect(r.wt_dice >= 0.80, "WT Dice " + fmt("%.4f", r.wt_dice) + " < 0.80");
  c.expect(r.gflops_ratio <= 0.45, "GFLOPs ratio " + fmt("%.4f", r.gflops_ratio) + " > 0.45");
  c.expect(r.skip_on_empty >= 0.60, "skip on empty slices " + fmt("%.3f", r.skip_on_empty) + " < 0.60");
  c.note("train " + fmt("%.0f s", r.train_seconds));
  c.note("WT Dice " + fmt("%.4f", r.wt_dice));
  c.note("GFLOPs/slice ratio " + fmt("%.4f", r.gflops_ratio));
  c.note("skip on " + fmt("%.3f", r.skip_on_empty) + " of " + std::to_string(r.empty_slices) + " empty slices");
  return c.outcome();
}

// 8. Lambda sweep trend on the desk configuration.
Outcome lambda_sweep() {
  Checker c;
  std::vector<double> gflops;
  std::string series;
  for (const char* lambda : {"0.04", "0.06", "0.08", "0.1"}) {
    auto cfg = desk_config(std::string("sweep_lambda_") + lambda);
    const bool same_as_desk = cfg.lambda == std::stod(lambda);
    cfg.apply_override(std::string("lambda=") + lambda);
    const auto r = same_as_desk && g_desk ? *g_desk : desk_run(cfg);
    gflops.push_back(r.gflops_per_slice);
    series += (series.empty() ? "" : " ") + std::string(lambda) + ":" + fmt("%.5f", r.gflops_per_slice);
  }
  int inversions = 0;
  bool small = true;
  for (std::size_t i = 1; i < gflops.size(); ++i) {
    if (gflops[i] > gflops[i - 1]) {
      ++inversions;
      small = small && gflops[i] <= gflops[i - 1] * 1.05;
    }
  }
  c.expect(inversions <= 1 && small,
           "GFLOPs/slice not non-increasing in lambda (" + std::to_string(inversions) + " inversions)");
  c.note("GFLOPs/slice " + series);
  return c.outcome();
}

// 9. Determinism across two identical runs.
Outcome determinism() {
  Checker c;
  std::vector<fs::path> runs;
  for (const char* name : {"determinism_a", "determinism_b"}) {
    auto cfg = desk_config(name);
    for (const char* kv : {"epochs.p1=2", "epochs.p2=1", "epochs.p3=1", "train.policy_warmup=1", "train.max_slices=48"}) {
      cfg.apply_override(kv);
    }
    const auto finals = train(cfg);
    const auto model = load_checkpoint_model(finals.front());
    const fs::path out = cfg.out_dir;
    eval::write_report(evaluate_fold(cfg, cfg.data.fold, model_predictor(model)), out / "eval");
    nlohmann::json ledgers = nlohmann::json::array();
    for (const auto& volume : load_cases(prepare_dataset(cfg), cfg.data.dir, cfg.data.fold, true)) {
      ledgers.push_back(infer_case(model, volume).ledger.to_json());
    }
    std::ofstream(out / "ledgers.json") << ledgers.dump(2);
    runs.push_back(out);
  }
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(runs[0])) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), runs[0]);
    // config.txt names the output directory.
    if (rel.filename() == "config.txt") continue;
    ++compared;
    if (rel == "train_log.jsonl") {
      c.expect(log_without_timing(entry.path()) == log_without_timing(runs[1] / rel), "training log differs");
    } else {
      c.expect(file_bytes(entry.path()) == file_bytes(runs[1] / rel), rel.string() + " differs");
    }
  }
  c.expect(compared >= 10, "too few artifacts compared");
  c.note(std::to_string(compared) + " checkpoint/report/ledger files bit-identical");
  return c.outcome();
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else if (arg == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      std::fprintf(stderr, "usage: %s [--only 1,2,...] [--work DIR]\n", argv[0]);
      return 2;
    }
  }
  fs::create_directories(g_work);

  const std::vector<std::pair<const char*, Outcome (*)()>> criteria{
      {"gradient suite", gradient_suite},     {"quantizer algebra", quantizer_algebra},
      {"STE contract", ste_contract},         {"spatial scaling", spatial_scaling},
      {"routing equivalences", routing_equivalences}, {"metric oracles", metric_oracles},
      {"desk run", desk_criterion},           {"lambda sweep", lambda_sweep},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d [%s]: %s  %s\n", id, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
