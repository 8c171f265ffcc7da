// Acceptance runner: prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails. `acceptance 1 3` runs a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "cases.hpp"
#include "dmae/checkpoint.hpp"
#include "dmae/config.hpp"
#include "dmae/ops.hpp"
#include "dmae/train.hpp"

using namespace dmae;
using dmae::testing::TestRng;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool passed = true;
  std::string detail;
};

// Collects individual checks; the first few failures end up in the detail.
class Ledger {
 public:
  void check(bool ok, const std::string& what) {
    ++checks_;
    if (ok) return;
    ++failures_;
    if (failures_ <= 3) failed_.push_back(what);
  }
  void note(const std::string& s) { notes_.push_back(s); }

  Outcome outcome() const {
    Outcome o;
    o.passed = failures_ == 0;
    std::ostringstream s;
    s << checks_ << " checks";
    if (failures_) {
      s << ", " << failures_ << " failed:";
      for (const auto& f : failed_) s << " [" << f << "]";
    }
    for (const auto& n : notes_) s << "; " << n;
    o.detail = s.str();
    return o;
  }

 private:
  std::size_t checks_ = 0, failures_ = 0;
  std::vector<std::string> failed_, notes_;
};

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient suite.

Outcome gradient_suite() {
  constexpr std::size_t kPoints = 20;
  Ledger ledger;
  const auto start = Clock::now();
  std::size_t coords = 0;
  for (const auto& c : dmae::testing::gradient_cases()) {
    for (std::size_t p = 0; p < kPoints; ++p) {
      const auto report = c.run(1000 + p);
      coords += report.checked;
      ledger.check(report.passed && report.checked > 0,
                   c.name + " seed " + std::to_string(1000 + p) + ": " + report.summary());
    }
  }
  const double elapsed = seconds_since(start);
  ledger.check(elapsed < 120.0, "runtime " + fixed(elapsed, 1) + " s exceeds 2 min");
  ledger.note(std::to_string(coords) + " coordinates in " + fixed(elapsed, 1) + " s");
  return ledger.outcome();
}

// ---------------------------------------------------------------------------
// Criterion 2: oracle equivalence.

Outcome oracle_suite() {
  Ledger ledger;
  TestRng rng(2);
  double worst = 0.0;
  for (std::size_t d : {1, 2, 4}) {
    for (std::size_t k : {2, 3, 5, 7}) {
      const auto x = dmae::testing::random_tensor({2, 3, 20}, rng);
      const auto w = dmae::testing::random_tensor({4, 3, k}, rng);
      Graph<double> g;
      const auto y = g.value(ops::causal_conv(g, g.constant(x), g.constant(w), d));
      const double err = dmae::testing::max_abs_diff(y, dmae::testing::direct_causal_conv(x, w, d));
      worst = std::max(worst, err);
      ledger.check(err <= 1e-10, "conv d=" + std::to_string(d) + " k=" + std::to_string(k) +
                                     " error " + std::to_string(err));
    }
  }
  ledger.note("worst conv error " + std::to_string(worst));

  // 1x2 masked-reconstruction example: only the artificially masked entry
  // contributes, with residual 2 over a unit mask norm, weighted by 1/1.5.
  {
    Graph<double> g;
    ReconstructionPair<double> pair;
    pair.full = g.constant(Tensor<double>({1, 1, 2}, {1.0, 2.0}));
    pair.masked = g.constant(Tensor<double>({1, 1, 2}, {1.0, 4.0}));
    pair.mask = Tensor<double>({1, 1, 2}, {1.0, 1.0});
    pair.submask = Tensor<double>({1, 1, 2}, {1.0, 0.0});
    const Tensor<double> x({1, 1, 2}, {1.0, 2.0});
    const double loss = g.value(dmae_loss(g, pair, x, 0.5))[0];
    const double expected = (1.0 / 1.5) * (2.0 / 1.0);
    ledger.check(std::abs(loss - expected) <= 1e-6, "loss " + std::to_string(loss));
    ledger.note("loss example " + fixed(loss, 6));
  }

  {
    const std::vector<double> target{1.0, 2.0, 3.0}, prediction{1.5, 2.0, 2.0};
    const double mae = horizon_mae(target, prediction);
    ledger.check(mae == 0.5, "horizon error " + std::to_string(mae));
  }
  return ledger.outcome();
}

// ---------------------------------------------------------------------------
// Criterion 3: invariants on random configurations.

Outcome invariant_suite() {
  constexpr std::size_t kConfigs = 100;
  Ledger ledger;
  const auto cases = dmae::testing::invariant_cases();
  for (const auto& c : cases) {
    for (std::size_t i = 0; i < kConfigs; ++i) {
      const std::uint64_t seed = 5000 + i;
      try {
        c.run(seed);
        ledger.check(true, c.name);
      } catch (const std::exception& e) {
        ledger.check(false, c.name + " seed " + std::to_string(seed) + ": " + e.what());
      }
    }
  }
  ledger.note(std::to_string(cases.size()) + " properties x " + std::to_string(kConfigs) +
              " configurations");
  return ledger.outcome();
}

// ---------------------------------------------------------------------------
// Criteria 4-8 share one desk-scale pretraining setup.

struct Run {
  PretrainResult result;
  std::string checkpoint_bytes;
  std::string metrics_csv;
  ImputationMetrics final_metrics;
  Checkpoint checkpoint;
  double seconds = 0.0;
  // Criterion 4 observations, one per epoch.
  std::vector<bool> uniform_attention;
  std::vector<bool> schedule_warm;
};

struct Desk {
  data::PreparedData data;
  ImputationMetrics baseline;
  std::optional<Run> full, repeat, without_rm;
};

constexpr std::size_t kEpochs = 16;
constexpr std::size_t kWarmupEpochs = 10;

data::PreparedData desk_data() {
  data::SyntheticSpec spec;
  spec.attributes = 5;
  spec.length = 64;
  spec.count = 2000;
  spec.classes = 3;
  spec.horizon = 5;
  spec.seed = 1;
  data::PrepareOptions options;
  options.missing_ratio = 0.2;
  options.pattern = data::MissingPattern::kPoint;
  options.seed = 1;
  return data::prepare_dataset(data::make_synthetic(spec), options);
}

TrainConfig desk_config(bool random_masking) {
  TrainConfig config;
  config.model.attributes = 5;
  config.model.length = 64;
  config.model.hidden = 64;
  config.model.kernel_sizes = {3, 5, 7};
  config.model.mask_ratio = 0.2;
  config.model.use_rm = random_masking;
  config.epochs = kEpochs;
  config.warmup_epochs = kWarmupEpochs;
  config.seed = 7;
  return config;
}

// True when every recorded attention vector is exactly uniform.
bool attention_uniform(const ForwardTrace<float>& trace) {
  for (const auto& [name, w] : trace.kernel_weights) {
    const float u = 1.0f / static_cast<float>(w.dim(1));
    for (float v : w.values()) {
      if (v != u) return false;
    }
  }
  for (const auto& [name, w] : trace.scale_weights) {
    for (float v : w.values()) {
      if (v != 1.0f / 3.0f) return false;
    }
  }
  return true;
}

Run pretrain_run(const data::PreparedData& data, const TrainConfig& config) {
  Run run;
  DmaeModel<float> model(config.model, config.seed);
  std::vector<std::size_t> probe_index(std::min<std::size_t>(8, data.validation.size()));
  for (std::size_t i = 0; i < probe_index.size(); ++i) probe_index[i] = i;
  const auto probe = make_batch<float>(data.validation, probe_index);

  const auto start = Clock::now();
  run.result = pretrain(model, data.train, data.validation, config, [&](const EpochRecord& r) {
    Graph<float> g;
    ForwardTrace<float> trace;
    ForwardContext<float> ctx{g, false, r.warmup, true, &trace};
    model.reconstruct(ctx, probe.x, probe.mask, probe.mask);
    run.uniform_attention.push_back(attention_uniform(trace));
    run.schedule_warm.push_back(r.warmup);
    spdlog::info("epoch {} train {:.5f} val_v {:.5f} val_m {:.5f} val_loss {:.5f} ({:.0f} s)",
                 r.epoch, r.train_loss, r.val_mse_v, r.val_mse_m, r.val_loss,
                 seconds_since(start));
  });
  run.seconds = seconds_since(start);
  run.final_metrics = imputation_metrics(
      data.validation, reconstruct_all(model, data.validation, run.result.warmup_active, 64));
  run.checkpoint = capture(model, data.normalizer, run.result.warmup_active);
  std::ostringstream bytes, csv;
  write_checkpoint(bytes, run.checkpoint);
  write_pretrain_metrics(csv, run.result.history);
  run.checkpoint_bytes = bytes.str();
  run.metrics_csv = csv.str();
  return run;
}

Desk& desk() {
  static Desk d = [] {
    Desk out;
    out.data = desk_data();
    out.baseline = imputation_metrics(out.data.validation, mean_imputation(out.data.validation));
    return out;
  }();
  return d;
}

const Run& full_run() {
  auto& d = desk();
  if (!d.full) d.full = pretrain_run(d.data, desk_config(true));
  return *d.full;
}

Outcome warmup_behaviour() {
  Ledger ledger;
  const auto& run = full_run();
  const auto& h = run.result.history;
  ledger.check(h.size() == kEpochs, "history length " + std::to_string(h.size()));
  for (std::size_t e = 0; e < run.uniform_attention.size(); ++e) {
    const bool warm = e < kWarmupEpochs;
    ledger.check(run.schedule_warm[e] == warm, "epoch " + std::to_string(e) + " schedule flag");
    ledger.check(run.uniform_attention[e] == warm,
                 "epoch " + std::to_string(e) + (warm ? " attention not uniform" : " attention uniform"));
  }
  if (h.size() == kEpochs) {
    ledger.check(h[15].val_loss < h[9].val_loss, "val loss at epoch 15 " + fixed(h[15].val_loss, 5) +
                                                      " not below epoch 9 " + fixed(h[9].val_loss, 5));
    ledger.note("val loss epoch 9 " + fixed(h[9].val_loss, 5) + ", epoch 15 " + fixed(h[15].val_loss, 5));
  }
  return ledger.outcome();
}

Outcome desk_pretraining() {
  Ledger ledger;
  const auto& run = full_run();
  const double baseline = desk().baseline.mse_m, model = run.final_metrics.mse_m;
  ledger.check(run.result.history.size() <= 50, "more than 50 epochs");
  ledger.check(model <= 0.8 * baseline, "MSE_m " + fixed(model) + " vs baseline " + fixed(baseline));
  ledger.check(run.seconds <= 600.0, "runtime " + fixed(run.seconds, 0) + " s");
  ledger.note("MSE_m " + fixed(model) + " vs mean-imputation " + fixed(baseline) + " (" +
              fixed(100.0 * (1.0 - model / baseline), 1) + "% lower), MSE_v " +
              fixed(run.final_metrics.mse_v) + ", " + std::to_string(run.result.history.size()) +
              " epochs in " + fixed(run.seconds, 0) + " s");
  return ledger.outcome();
}

Outcome ablation_direction() {
  Ledger ledger;
  const auto& full = full_run();
  auto& d = desk();
  if (!d.without_rm) d.without_rm = pretrain_run(d.data, desk_config(false));
  const auto& ab = d.without_rm->final_metrics;
  const auto& base = full.final_metrics;
  ledger.check(ab.mse_m > base.mse_m, "without RM MSE_m " + fixed(ab.mse_m) + " <= full " + fixed(base.mse_m));
  ledger.check(std::abs(ab.mse_v - base.mse_v) <= 0.5 * base.mse_v,
               "without RM MSE_v " + fixed(ab.mse_v) + " vs full " + fixed(base.mse_v));
  ledger.note("full MSE_v/MSE_m " + fixed(base.mse_v) + "/" + fixed(base.mse_m) + ", without RM " +
              fixed(ab.mse_v) + "/" + fixed(ab.mse_m));
  return ledger.outcome();
}

Outcome finetune_suite() {
  Ledger ledger;
  const auto& run = full_run();
  const auto& data = desk().data;

  FinetuneConfig classify;
  classify.task = HeadKind::kClassify;
  classify.classes = 3;
  classify.epochs = 20;
  classify.warmup = run.result.warmup_active;
  {
    auto model = build_model(run.checkpoint);
    Rng head_rng(classify.seed);
    const auto width = head_input_width(classify.task, run.checkpoint.header.model.hidden);
    FeedForwardHead<float> head("head", width, classify.head_outputs(), head_rng);
    std::optional<std::size_t> reached;
    const auto history = finetune(*model, head, data.train, data.validation, classify,
                                  [&](const FinetuneRecord& r) {
                                    if (!reached && r.metric >= 0.95) reached = r.epoch + 1;
                                  });
    const double best = std::max_element(history.begin(), history.end(), [](auto& a, auto& b) {
                          return a.metric < b.metric;
                        })->metric;
    ledger.check(reached.has_value(), "precision peaked at " + fixed(best));
    ledger.note("precision >= 0.95 " +
                (reached ? "after " + std::to_string(*reached) + " epochs" : std::string("never")) +
                ", final " + fixed(history.back().metric));
  }

  for (std::size_t s : {1, 3, 5}) {
    FinetuneConfig predict;
    predict.task = HeadKind::kPredict;
    predict.horizon = s;
    predict.target = 0;
    predict.epochs = 5;
    predict.warmup = run.result.warmup_active;
    auto model = build_model(run.checkpoint);
    Rng head_rng(predict.seed);
    FeedForwardHead<float> head("head", head_input_width(predict.task, run.checkpoint.header.model.hidden),
                                s, head_rng);
    const auto history = finetune(*model, head, data.train, data.validation, predict);
    const double mae = history.back().metric;
    const double persistence = persistence_mae(data.validation, 0, s);
    ledger.check(std::isfinite(mae), "MAE_p(" + std::to_string(s) + ") not finite");
    if (s == 1) {
      ledger.check(mae <= persistence, "MAE_p(1) " + fixed(mae) + " above persistence " + fixed(persistence));
    }
    ledger.note("MAE_p(" + std::to_string(s) + ") " + fixed(mae) + " vs persistence " + fixed(persistence));
  }
  return ledger.outcome();
}

Outcome determinism() {
  Ledger ledger;
  const auto& first = full_run();
  auto& d = desk();
  if (!d.repeat) d.repeat = pretrain_run(d.data, desk_config(true));
  ledger.check(first.checkpoint_bytes == d.repeat->checkpoint_bytes, "checkpoint bytes differ");
  ledger.check(first.metrics_csv == d.repeat->metrics_csv, "metric CSVs differ");
  ledger.note("checkpoint " + std::to_string(first.checkpoint_bytes.size()) + " bytes");
  return ledger.outcome();
}

// ---------------------------------------------------------------------------
// Criterion 9: checkpoint round trip and corruption codes.

std::optional<ErrorCode> read_error(const std::string& bytes) {
  std::istringstream in(bytes);
  try {
    read_checkpoint(in);
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

void put_u32(std::string& bytes, std::size_t offset, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes[offset + i] = static_cast<char>((v >> (8 * i)) & 0xffu);
}

Outcome checkpoint_suite() {
  Ledger ledger;
  ModelConfig config;
  config.attributes = 3;
  config.length = 16;
  config.hidden = 8;
  config.groups = 3;
  DmaeModel<float> model(config, 11);
  Rng head_rng(3);
  FeedForwardHead<float> head("head", config.hidden, 2, head_rng);
  // Move the batch-norm running statistics away from their initial values.
  for (auto& [name, buffer] : model.buffers()) {
    TestRng rng(name.size());
    for (auto& v : buffer->storage()) v += std::uniform_real_distribution<float>(0.1f, 0.9f)(rng);
  }
  data::NormalizerState norm{{0.5, -1.25, 3.0}, {1.0, 2.0, 0.25}};
  auto ckpt = capture(model, norm, true, &head, 1);
  ckpt.header.head = HeadKind::kPredict;
  std::ostringstream out;
  write_checkpoint(out, ckpt);
  const std::string bytes = out.str();

  std::istringstream in(bytes);
  const auto loaded = read_checkpoint(in);
  ledger.check(loaded.header == ckpt.header, "header fields differ");
  ledger.check(loaded.normalizer.mean == norm.mean && loaded.normalizer.stddev == norm.stddev,
               "normaliser differs");

  DmaeModel<float> other(config, 99);
  TestRng rng(4);
  FeedForwardHead<float> other_head("head", config.hidden, 2, rng);
  restore(loaded, other, &other_head);
  auto a = model.parameters(), b = other.parameters();
  head.collect(a);
  other_head.collect(b);
  bool identical = a.size() == b.size();
  for (std::size_t i = 0; identical && i < a.size(); ++i) {
    identical = a[i]->value.shape() == b[i]->value.shape() &&
                std::memcmp(a[i]->value.data(), b[i]->value.data(), a[i]->value.size() * sizeof(float)) == 0;
  }
  ledger.check(identical, "restored parameters are not bit-identical");
  auto ba = model.buffers(), bb = other.buffers();
  bool buffers_identical = ba.size() == bb.size();
  for (std::size_t i = 0; buffers_identical && i < ba.size(); ++i) {
    buffers_identical = std::memcmp(ba[i].second->data(), bb[i].second->data(),
                                    ba[i].second->size() * sizeof(float)) == 0;
  }
  ledger.check(buffers_identical, "restored running statistics differ");

  auto expect = [&](std::string corrupted, ErrorCode code, const std::string& what) {
    const auto got = read_error(corrupted);
    ledger.check(got == code, what + ": got " + (got ? std::string(code_name(*got)) : "no error"));
  };
  {
    auto c = bytes;
    c[0] = 'X';
    expect(c, ErrorCode::kBadMagic, "magic");
  }
  {
    auto c = bytes;
    put_u32(c, 4, kCheckpointVersion + 1);
    expect(c, ErrorCode::kVersionMismatch, "version");
  }
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    expect(bytes.substr(0, cut), ErrorCode::kTruncated, "truncated at " + std::to_string(cut));
  }
  expect(bytes + std::string(3, '\0'), ErrorCode::kInconsistent, "trailing bytes");
  {
    auto short_list = ckpt;
    short_list.entries.pop_back();
    std::ostringstream s;
    write_checkpoint(s, short_list);
    std::istringstream sin(s.str());
    const auto partial = read_checkpoint(sin);
    DmaeModel<float> target(config, 1);
    FeedForwardHead<float> target_head("head", config.hidden, 2, head_rng);
    std::optional<ErrorCode> got;
    try {
      restore(partial, target, &target_head);
    } catch (const Error& e) {
      got = e.code();
    }
    ledger.check(got == ErrorCode::kInconsistent, "parameter count mismatch not detected");
  }
  {
    std::optional<ErrorCode> got;
    try {
      check_compatible(loaded.header, config.attributes + 1, config.length);
    } catch (const Error& e) {
      got = e.code();
    }
    ledger.check(got == ErrorCode::kConfig, "(n, T) mismatch not a config error");
  }
  return ledger.outcome();
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::err);
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "-v") == 0) spdlog::set_level(spdlog::level::info);
    else selected.insert(std::atoi(argv[i]));
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"oracle equivalence", oracle_suite},
      {"invariant suite", invariant_suite},
      {"warm-up behaviour", warmup_behaviour},
      {"desk-scale pretraining", desk_pretraining},
      {"ablation direction", ablation_direction},
      {"fine-tuning", finetune_suite},
      {"determinism", determinism},
      {"checkpoint round trip", checkpoint_suite},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.passed;
    std::cout << "criterion " << id << " (" << criteria[i].first << "): " << (o.passed ? "PASS" : "FAIL")
              << " - " << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
