#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "dmae/checkpoint.hpp"
#include "dmae/config.hpp"
#include "dmae/data.hpp"
#include "dmae/train.hpp"

namespace fs = std::filesystem;
using namespace dmae;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr const char* kCheckpointFile = "checkpoint.dmck";
constexpr const char* kMetricsFile = "metrics.csv";
constexpr const char* kManifestFile = "manifest.json";

[[noreturn]] void usage(const std::string& what) { throw Error(ErrorCode::kUsage, what); }

struct DataFlags {
  std::string data;
  std::string series;
  std::size_t length = 64;
  std::size_t stride = 1;
  std::size_t horizon = 5;
  double train_fraction = 0.9;
  std::uint64_t split_seed = 1;

  void add(CLI::App* app) {
    app->add_option("--data", data, "dataset directory written by synth/mask");
    app->add_option("--series", series, "raw CSV series (one column per attribute)");
    app->add_option("--t", length, "window length for --series");
    app->add_option("--stride", stride, "window stride for --series");
    app->add_option("--horizon", horizon, "future steps kept per window for --series");
    app->add_option("--train-fraction", train_fraction, "share of windows used for training");
    app->add_option("--split-seed", split_seed, "seed of the train/validation split");
  }

  void validate() const {
    if (data.empty() == series.empty()) usage("exactly one of --data or --series is required");
    if (length == 0 || stride == 0) usage("--t and --stride must be >= 1");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) usage("--train-fraction must lie in (0, 1)");
  }

  std::vector<data::Sample> load() const {
    if (!data.empty()) return data::read_dataset(data);
    return data::samples_from_series(data::load_csv(series), length, stride, horizon);
  }

  Json to_json() const {
    return Json{{"data", data},     {"series", series},
                {"t", length},      {"stride", stride},
                {"horizon", horizon}, {"train_fraction", train_fraction},
                {"split_seed", split_seed}};
  }
};

struct RunContext {
  std::string command;
  std::vector<std::string> argv;
  fs::path out;
};

void write_manifest(const RunContext& run, Json config, Json artifacts, Json results) {
  Json m{{"tool", "dmae"},
         {"version", kToolVersion},
         {"command", run.command},
         {"argv", run.argv},
         {"config", std::move(config)},
         {"artifacts", std::move(artifacts)},
         {"results", std::move(results)}};
  write_json(run.out / kManifestFile, m);
}

std::ofstream open_text(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  return out;
}

// Same split as pretraining, normalised with the checkpoint's statistics.
data::PreparedData split_with(std::vector<data::Sample> samples, const DataFlags& flags,
                              const data::NormalizerState& normalizer) {
  data::Rng rng(flags.split_seed);
  const auto parts = data::split(samples.size(), flags.train_fraction, rng);
  data::PreparedData out;
  out.normalizer = normalizer;
  for (auto i : parts.train) out.train.push_back(std::move(samples[i]));
  for (auto i : parts.validation) out.validation.push_back(std::move(samples[i]));
  if (!normalizer.mean.empty()) {
    for (auto& s : out.train) data::apply_normalizer(normalizer, s);
    for (auto& s : out.validation) data::apply_normalizer(normalizer, s);
  }
  return out;
}

void check_samples(std::span<const data::Sample> samples, const CheckpointHeader& header) {
  if (samples.empty()) throw Error(ErrorCode::kData, "dataset has no windows");
  check_compatible(header, samples[0].window.attributes(), samples[0].window.length());
}

// ---------------------------------------------------------------- synth

struct SynthCommand {
  data::SyntheticSpec spec;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--n", spec.attributes, "attribute count");
    app->add_option("--t", spec.length, "window length");
    app->add_option("--count", spec.count, "number of windows");
    app->add_option("--classes", spec.classes, "number of classes");
    app->add_option("--horizon", spec.horizon, "future steps stored per window");
    app->add_option("--noise", spec.noise, "additive noise scale");
    app->add_option("--seed", spec.seed, "generator seed");
    app->add_option("--out", out, "output dataset directory")->required();
  }

  void run(RunContext& ctx) const {
    if (spec.attributes == 0 || spec.length == 0 || spec.count == 0) {
      usage("--n, --t and --count must be >= 1");
    }
    if (spec.classes < 1) usage("--classes must be >= 1");
    if (!(spec.noise >= 0.0)) usage("--noise must be >= 0");
    const auto samples = data::make_synthetic(spec);
    ctx.out = out;
    data::write_dataset(out, samples);
    Json config{{"n", spec.attributes}, {"t", spec.length},         {"count", spec.count},
                {"classes", spec.classes}, {"horizon", spec.horizon}, {"noise", spec.noise},
                {"seed", spec.seed}};
    write_manifest(ctx, config, Json::array({"meta.json", "series.csv", "labels.csv"}), Json::object());
  }
};

// ----------------------------------------------------------------- mask

struct MaskCommand {
  std::string data;
  std::string out;
  double ratio = 0.1;
  std::string pattern = "point";
  std::size_t span = 5;
  std::uint64_t seed = 1;

  void add(CLI::App* app) {
    app->add_option("--data", data, "input dataset directory")->required();
    app->add_option("--out", out, "output dataset directory")->required();
    app->add_option("--ratio", ratio, "fraction of all entries to remove, in [0, 1)");
    app->add_option("--pattern", pattern, "point|line|block");
    app->add_option("--span", span, "time span of line/block gaps");
    app->add_option("--seed", seed, "masking seed");
  }

  void run(RunContext& ctx) const {
    if (!(ratio >= 0.0 && ratio < 1.0)) usage("--ratio must lie in [0, 1)");
    if (span == 0) usage("--span must be >= 1");
    data::MissingPattern p;
    try {
      p = data::parse_pattern(pattern);
    } catch (const Error& e) {
      usage(e.what());
    }
    auto samples = data::read_dataset(data);
    data::Rng rng(seed);
    std::size_t removed = 0, total = 0;
    for (auto& s : samples) {
      const double before = std::accumulate(s.window.mask.values().begin(), s.window.mask.values().end(), 0.0);
      if (ratio > 0.0) data::mask_sample(s, ratio, p, rng, span);
      const double after = std::accumulate(s.window.mask.values().begin(), s.window.mask.values().end(), 0.0);
      removed += static_cast<std::size_t>(before - after);
      total += s.window.mask.size();
    }
    ctx.out = out;
    data::write_dataset(out, samples);
    Json config{{"data", data}, {"ratio", ratio}, {"pattern", pattern}, {"span", span}, {"seed", seed}};
    Json artifacts = Json::array({"meta.json", "series.csv"});
    if (fs::exists(fs::path(out) / "labels.csv")) artifacts.push_back("labels.csv");
    if (fs::exists(fs::path(out) / "ground_truth.csv")) artifacts.push_back("ground_truth.csv");
    write_manifest(ctx, config, artifacts,
                   Json{{"achieved_ratio", total ? static_cast<double>(removed) / total : 0.0}});
  }
};

// ------------------------------------------------------------- pretrain

struct PretrainCommand {
  DataFlags data;
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, warmup, batch, hidden, groups;
  std::optional<double> lr, mask_ratio, noise;
  std::vector<std::string> ablate;
  double inject_ratio = 0.0;
  std::string pattern = "point";

  void add(CLI::App* app) {
    data.add(app);
    app->add_option("--config", config_path, "JSON file mirroring TrainConfig");
    app->add_option("--out", out, "run directory")->required();
    app->add_option("--seed", seed, "training seed");
    app->add_option("--epochs", epochs, "total epochs");
    app->add_option("--warmup", warmup, "warm-up epochs with uniform attention");
    app->add_option("--batch", batch, "batch size");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--hidden", hidden, "feature width h_s");
    app->add_option("--groups", groups, "candidate kernels K");
    app->add_option("--mask-ratio", mask_ratio, "random masking ratio m_r");
    app->add_option("--noise", noise, "positional noise scale");
    app->add_option("--ablate", ablate, "dpe|rm|dk|asf (repeatable)");
    app->add_option("--inject-ratio", inject_ratio, "evaluation missingness injected before training");
    app->add_option("--pattern", pattern, "point|line|block for --inject-ratio");
  }

  TrainConfig resolve() const {
    TrainConfig base;
    base.model.attributes = 0;
    base.model.length = 0;
    TrainConfig c = config_path.empty() ? base : train_config_from_json(read_json(config_path), base);
    if (seed) c.seed = *seed;
    if (epochs) c.epochs = *epochs;
    if (warmup) c.warmup_epochs = *warmup;
    if (batch) c.batch_size = *batch;
    if (lr) c.learning_rate = *lr;
    if (hidden) c.model.hidden = *hidden;
    if (groups) c.model.groups = *groups;
    if (mask_ratio) c.model.mask_ratio = *mask_ratio;
    if (noise) c.model.noise = *noise;
    for (const auto& part : ablate) apply_ablation(c.model, part);
    return c;
  }

  void run(RunContext& ctx) const {
    data.validate();
    if (!(inject_ratio >= 0.0 && inject_ratio < 1.0)) usage("--inject-ratio must lie in [0, 1)");
    data::MissingPattern p;
    try {
      p = data::parse_pattern(pattern);
    } catch (const Error& e) {
      usage(e.what());
    }
    for (const auto& part : ablate) {
      if (part != "dpe" && part != "rm" && part != "dk" && part != "asf") {
        usage("unknown --ablate value \"" + part + "\" (expected dpe|rm|dk|asf)");
      }
    }
    TrainConfig config = resolve();

    auto samples = data.load();
    if (samples.empty()) throw Error(ErrorCode::kData, "dataset has no windows");
    const auto n = samples[0].window.attributes(), len = samples[0].window.length();
    if (config.model.attributes == 0) config.model.attributes = n;
    if (config.model.length == 0) config.model.length = len;
    if (config.model.attributes != n || config.model.length != len) {
      throw Error(ErrorCode::kConfig, "config expects (n, T) = (" +
                                          std::to_string(config.model.attributes) + ", " +
                                          std::to_string(config.model.length) +
                                          ") but the data has (" + std::to_string(n) + ", " +
                                          std::to_string(len) + ")");
    }
    config.validate();
    data::PrepareOptions prep_opts{inject_ratio, p, 5, data.train_fraction, data.split_seed};
    auto prep = data::prepare_dataset(std::move(samples), prep_opts);

    ctx.out = out;
    fs::create_directories(out);
    DmaeModel<float> model(config.model, config.seed);
    const auto result = pretrain(model, prep.train, prep.validation, config,
                                 [](const EpochRecord& r) {
                                   spdlog::info("epoch {} loss {:.6f} mse_v {:.6f} mse_m {:.6f}",
                                                r.epoch, r.train_loss, r.val_mse_v, r.val_mse_m);
                                 });
    save_checkpoint(fs::path(out) / kCheckpointFile,
                    capture(model, prep.normalizer, result.warmup_active));
    auto csv = open_text(fs::path(out) / kMetricsFile);
    write_pretrain_metrics(csv, result.history);
    csv.close();

    const auto baseline = imputation_metrics(prep.validation, mean_imputation(prep.validation));
    Json cfg = to_json(config);
    cfg["input"] = data.to_json();
    cfg["inject_ratio"] = inject_ratio;
    cfg["pattern"] = pattern;
    const auto& last = result.history.back();
    write_manifest(ctx, cfg, Json::array({kCheckpointFile, kMetricsFile}),
                   Json{{"val_mse_v", last.val_mse_v},
                        {"val_mse_m", last.val_mse_m},
                        {"baseline_mse_m", baseline.mse_m},
                        {"warmup_active", result.warmup_active}});
  }
};

// ------------------------------------------------------------- finetune

struct FinetuneCommand {
  DataFlags data;
  std::string checkpoint;
  std::string config_path;
  std::string out;
  std::optional<std::string> task;
  std::optional<std::size_t> steps, target, classes, epochs, batch;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  bool freeze = false;

  void add(CLI::App* app) {
    data.add(app);
    app->add_option("--checkpoint", checkpoint, "pretrained checkpoint")->required();
    app->add_option("--config", config_path, "JSON file mirroring FinetuneConfig");
    app->add_option("--out", out, "run directory")->required();
    app->add_option("--task", task, "predict|classify");
    app->add_option("--steps", steps, "prediction horizon s");
    app->add_option("--target", target, "target attribute index");
    app->add_option("--classes", classes, "class count");
    app->add_option("--epochs", epochs, "fine-tune epochs");
    app->add_option("--batch", batch, "batch size");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--seed", seed, "fine-tune seed");
    app->add_flag("--freeze", freeze, "train the head only");
  }

  FinetuneConfig resolve() const {
    FinetuneConfig c =
        config_path.empty() ? FinetuneConfig{} : finetune_config_from_json(read_json(config_path));
    if (task) {
      if (*task != "predict" && *task != "classify") usage("--task must be predict or classify");
      c.task = parse_head_kind(*task);
    }
    if (steps) c.horizon = *steps;
    if (target) c.target = *target;
    if (classes) c.classes = *classes;
    if (epochs) c.epochs = *epochs;
    if (batch) c.batch_size = *batch;
    if (lr) c.learning_rate = *lr;
    if (seed) c.seed = *seed;
    if (freeze) c.freeze_encoder = true;
    return c;
  }

  void run(RunContext& ctx) const {
    data.validate();
    if (steps && *steps == 0) usage("--steps must be >= 1");
    if (classes && *classes < 2) usage("--classes must be >= 2");
    if (task && *task != "predict" && *task != "classify") usage("--task must be predict or classify");
    FinetuneConfig config = resolve();
    config.validate();

    const auto ckpt = load_checkpoint(checkpoint);
    config.warmup = ckpt.header.warmup_active;
    auto samples = data.load();
    check_samples(samples, ckpt.header);
    if (config.task == HeadKind::kPredict && config.target >= ckpt.header.model.attributes) {
      throw Error(ErrorCode::kConfig, "--target exceeds the attribute count");
    }
    auto prep = split_with(std::move(samples), data, ckpt.normalizer);
    auto model = build_model(ckpt);
    Rng head_rng(config.seed);
    FeedForwardHead<float> head("head", head_input_width(config.task, ckpt.header.model.hidden),
                                config.head_outputs(), head_rng);

    ctx.out = out;
    fs::create_directories(out);
    const auto history = finetune(*model, head, prep.train, prep.validation, config,
                                  [](const FinetuneRecord& r) {
                                    spdlog::info("epoch {} loss {:.6f} metric {:.6f}", r.epoch,
                                                 r.train_loss, r.metric);
                                  });
    auto saved = capture(*model, ckpt.normalizer, ckpt.header.warmup_active, &head,
                         static_cast<std::uint32_t>(config.target));
    saved.header.head = config.task;
    save_checkpoint(fs::path(out) / kCheckpointFile, saved);
    auto csv = open_text(fs::path(out) / kMetricsFile);
    write_finetune_metrics(csv, config, history);
    csv.close();

    Json results{{"metric", history.empty() ? 0.0 : history.back().metric}};
    if (config.task == HeadKind::kPredict) {
      results["persistence_mae"] = persistence_mae(prep.validation, config.target, config.horizon);
    }
    Json cfg = to_json(config);
    cfg["checkpoint"] = checkpoint;
    cfg["input"] = data.to_json();
    write_manifest(ctx, cfg, Json::array({kCheckpointFile, kMetricsFile}), results);
  }
};

// ----------------------------------------------------------------- eval

struct EvalCommand {
  DataFlags data;
  std::string checkpoint;
  std::string out;
  std::size_t batch = 32;

  void add(CLI::App* app) {
    data.add(app);
    app->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
    app->add_option("--out", out, "run directory")->required();
    app->add_option("--batch", batch, "evaluation batch size");
  }

  void run(RunContext& ctx) const {
    data.validate();
    if (batch == 0) usage("--batch must be >= 1");
    const auto ckpt = load_checkpoint(checkpoint);
    auto samples = data.load();
    check_samples(samples, ckpt.header);
    auto prep = split_with(std::move(samples), data, ckpt.normalizer);
    const auto& val = prep.validation;

    auto model = std::make_unique<DmaeModel<float>>(ckpt.header.model, 0);
    std::optional<FeedForwardHead<float>> head;
    if (ckpt.header.head != HeadKind::kNone) {
      Rng rng(0);
      head.emplace("head", head_input_width(ckpt.header.head, ckpt.header.model.hidden),
                   ckpt.header.head_outputs, rng);
    }
    restore(ckpt, *model, head ? &*head : nullptr);

    const auto recon = reconstruct_all(*model, val, ckpt.header.warmup_active, batch);
    const auto metrics = imputation_metrics(val, recon);
    const auto baseline = imputation_metrics(val, mean_imputation(val));
    std::vector<std::pair<std::string, double>> rows{{"val_mse_v", metrics.mse_v},
                                                     {"val_mse_m", metrics.mse_m},
                                                     {"baseline_mse_m", baseline.mse_m}};
    if (head) {
      FinetuneConfig fc;
      fc.task = ckpt.header.head;
      fc.target = ckpt.header.head_target;
      fc.horizon = fc.classes = ckpt.header.head_outputs;
      fc.warmup = ckpt.header.warmup_active;
      fc.batch_size = batch;
      check_task_data(val, fc);
      if (fc.task == HeadKind::kPredict) {
        rows.emplace_back("val_mae_" + std::to_string(fc.horizon), evaluate_head(*model, *head, val, fc));
        rows.emplace_back("persistence_mae", persistence_mae(val, fc.target, fc.horizon));
      } else {
        rows.emplace_back("val_precision", evaluate_head(*model, *head, val, fc));
      }
    }

    ctx.out = out;
    fs::create_directories(out);
    auto csv = open_text(fs::path(out) / kMetricsFile);
    csv << "metric,value\n";
    Json results = Json::object();
    for (const auto& [name, value] : rows) {
      csv << name << ',' << format_float(value) << '\n';
      results[name] = value;
    }
    csv.close();
    Json cfg{{"checkpoint", checkpoint}, {"input", data.to_json()}, {"batch", batch}};
    write_manifest(ctx, cfg, Json::array({kMetricsFile}), results);
  }
};

// ---------------------------------------------------------------- trace

struct TraceCommand {
  DataFlags data;
  std::string checkpoint;
  std::string out;
  std::size_t window = 0;

  void add(CLI::App* app) {
    data.add(app);
    app->add_option("--checkpoint", checkpoint, "checkpoint to trace")->required();
    app->add_option("--window", window, "index of the window in the dataset");
    app->add_option("--out", out, "run directory")->required();
  }

  void run(RunContext& ctx) const {
    data.validate();
    const auto ckpt = load_checkpoint(checkpoint);
    auto samples = data.load();
    check_samples(samples, ckpt.header);
    if (window >= samples.size()) {
      throw Error(ErrorCode::kData, "--window " + std::to_string(window) + " is beyond the " +
                                        std::to_string(samples.size()) + " windows");
    }
    data::Sample s = samples[window];
    if (!ckpt.normalizer.mean.empty()) data::apply_normalizer(ckpt.normalizer, s);
    auto model = build_model(ckpt);

    const std::size_t n = ckpt.header.model.attributes, len = ckpt.header.model.length;
    Tensor<float> x(Shape{1, n, len}), mask(Shape{1, n, len});
    for (std::size_t i = 0; i < n * len; ++i) {
      x[i] = static_cast<float>(s.window.values[i]);
      mask[i] = static_cast<float>(s.window.mask[i]);
    }
    Graph<float> g;
    ForwardTrace<float> trace;
    ForwardContext<float> fctx{g, false, ckpt.header.warmup_active, true, &trace};
    model->encode(fctx, x, mask, mask);

    ctx.out = out;
    fs::create_directories(out);
    auto csv = open_text(fs::path(out) / "trace.csv");
    csv << "step";
    for (std::size_t a = 0; a < n; ++a) csv << ",value_" << a << ",mask_" << a << ",embed_" << a;
    for (const auto& [name, w] : trace.kernel_weights) {
      for (std::size_t k = 0; k < w.dim(1); ++k) csv << ',' << name << ".alpha" << k;
    }
    for (const auto& [name, w] : trace.scale_weights) {
      for (std::size_t j = 0; j < w.dim(1); ++j) csv << ',' << name << ".scale" << j;
    }
    csv << '\n';
    const bool embedded = !trace.embedding.empty();
    for (std::size_t t = 0; t < len; ++t) {
      csv << t;
      for (std::size_t a = 0; a < n; ++a) {
        const bool observed = s.window.mask.at(a, t) != 0.0;
        csv << ',';
        if (observed) csv << format_float(s.window.values.at(a, t));
        csv << ',' << (observed ? 1 : 0) << ',';
        if (!observed && embedded) csv << format_float(trace.embedding.at(0, a, t));
      }
      for (const auto& [name, w] : trace.kernel_weights) {
        for (std::size_t k = 0; k < w.dim(1); ++k) csv << ',' << format_float(w.at(0, k));
      }
      for (const auto& [name, w] : trace.scale_weights) {
        for (std::size_t j = 0; j < w.dim(1); ++j) csv << ',' << format_float(w.at(0, j, t));
      }
      csv << '\n';
    }
    csv.close();
    Json cfg{{"checkpoint", checkpoint}, {"input", data.to_json()}, {"window", window}};
    write_manifest(ctx, cfg, Json::array({"trace.csv"}),
                   Json{{"warmup_active", ckpt.header.warmup_active}});
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked-reconstruction pretraining for multivariate time series", "dmae"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  SynthCommand synth;
  MaskCommand mask;
  PretrainCommand pretrain_cmd;
  FinetuneCommand finetune_cmd;
  EvalCommand eval;
  TraceCommand trace;
  auto* synth_app = app.add_subcommand("synth", "write a labeled synthetic dataset");
  auto* mask_app = app.add_subcommand("mask", "remove entries and keep them as ground truth");
  auto* pretrain_app = app.add_subcommand("pretrain", "masked-reconstruction pretraining");
  auto* finetune_app = app.add_subcommand("finetune", "train a prediction or classification head");
  auto* eval_app = app.add_subcommand("eval", "imputation and head metrics of a checkpoint");
  auto* trace_app = app.add_subcommand("trace", "per-step embedding and attention traces");
  synth.add(synth_app);
  mask.add(mask_app);
  pretrain_cmd.add(pretrain_app);
  finetune_cmd.add(finetune_app);
  eval.add(eval_app);
  trace.add(trace_app);

  RunContext ctx;
  ctx.argv.assign(argv + 1, argv + argc);
  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::Success& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      throw Error(ErrorCode::kUsage, e.what());
    }
    ctx.command = app.get_subcommands().front()->get_name();
    if (ctx.command == "synth") synth.run(ctx);
    else if (ctx.command == "mask") mask.run(ctx);
    else if (ctx.command == "pretrain") pretrain_cmd.run(ctx);
    else if (ctx.command == "finetune") finetune_cmd.run(ctx);
    else if (ctx.command == "eval") eval.run(ctx);
    else trace.run(ctx);
  } catch (const Error& e) {
    std::cerr << "error: " << code_name(e.code()) << ": " << e.what() << '\n';
    return exit_status(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << code_name(ErrorCode::kIo) << ": " << e.what() << '\n';
    return exit_status(ErrorCode::kIo);
  }
  return 0;
}
