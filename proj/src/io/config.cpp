#include "dmae/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>

namespace dmae {

namespace {

using Setter = std::function<void(const Json&)>;

template <typename V>
Setter field(V& target) {
  return [&target](const Json& v) { target = v.get<V>(); };
}

// Applies each key of `j` through its setter; unknown keys are config errors.
void apply_fields(const Json& j, const std::string& where,
                  const std::map<std::string, Setter>& setters) {
  if (!j.is_object()) throw Error(ErrorCode::kConfig, where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) {
      throw Error(ErrorCode::kConfig, "unknown key \"" + key + "\" in " + where);
    }
    try {
      it->second(value);
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::kConfig, "bad value for \"" + key + "\" in " + where + ": " +
                                          e.what());
    }
  }
}

}  // namespace

Json to_json(const ModelConfig& c) {
  return Json{{"attributes", c.attributes},
              {"length", c.length},
              {"hidden", c.hidden},
              {"attention_hidden", c.attention_hidden},
              {"kernel_sizes", c.kernel_sizes},
              {"groups", c.groups},
              {"kernel_temperature", c.kernel_temperature},
              {"scale_temperature", c.scale_temperature},
              {"mask_ratio", c.mask_ratio},
              {"noise", c.noise},
              {"use_dpe", c.use_dpe},
              {"use_rm", c.use_rm},
              {"use_dk", c.use_dk},
              {"use_asf", c.use_asf},
              {"token", c.token}};
}

Json to_json(const TrainConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"warmup_epochs", c.warmup_epochs},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"seed", c.seed},
              {"divergence_factor", c.divergence_factor}};
}

Json to_json(const FinetuneConfig& c) {
  return Json{{"task", head_kind_name(c.task)},
              {"horizon", c.horizon},
              {"target", c.target},
              {"classes", c.classes},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"freeze_encoder", c.freeze_encoder},
              {"warmup", c.warmup},
              {"seed", c.seed}};
}

ModelConfig model_config_from_json(const Json& j, ModelConfig c) {
  apply_fields(j, "model", {{"attributes", field(c.attributes)},
                            {"length", field(c.length)},
                            {"hidden", field(c.hidden)},
                            {"attention_hidden", field(c.attention_hidden)},
                            {"kernel_sizes", field(c.kernel_sizes)},
                            {"groups", field(c.groups)},
                            {"kernel_temperature", field(c.kernel_temperature)},
                            {"scale_temperature", field(c.scale_temperature)},
                            {"mask_ratio", field(c.mask_ratio)},
                            {"noise", field(c.noise)},
                            {"use_dpe", field(c.use_dpe)},
                            {"use_rm", field(c.use_rm)},
                            {"use_dk", field(c.use_dk)},
                            {"use_asf", field(c.use_asf)},
                            {"token", field(c.token)}});
  return c;
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c) {
  apply_fields(j, "train config",
               {{"model", [&c](const Json& v) { c.model = model_config_from_json(v, c.model); }},
                {"warmup_epochs", field(c.warmup_epochs)},
                {"epochs", field(c.epochs)},
                {"batch_size", field(c.batch_size)},
                {"learning_rate", field(c.learning_rate)},
                {"seed", field(c.seed)},
                {"divergence_factor", field(c.divergence_factor)}});
  return c;
}

FinetuneConfig finetune_config_from_json(const Json& j, FinetuneConfig c) {
  apply_fields(j, "fine-tune config",
               {{"task", [&c](const Json& v) { c.task = parse_head_kind(v.get<std::string>()); }},
                {"horizon", field(c.horizon)},
                {"target", field(c.target)},
                {"classes", field(c.classes)},
                {"epochs", field(c.epochs)},
                {"batch_size", field(c.batch_size)},
                {"learning_rate", field(c.learning_rate)},
                {"freeze_encoder", field(c.freeze_encoder)},
                {"warmup", field(c.warmup)},
                {"seed", field(c.seed)}});
  return c;
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfig, "cannot open config " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kConfig, path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

std::string head_kind_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::kNone: return "none";
    case HeadKind::kPredict: return "predict";
    case HeadKind::kClassify: return "classify";
  }
  return "none";
}

HeadKind parse_head_kind(const std::string& name) {
  if (name == "predict") return HeadKind::kPredict;
  if (name == "classify") return HeadKind::kClassify;
  throw Error(ErrorCode::kConfig, "unknown task \"" + name + "\" (expected predict|classify)");
}

void apply_ablation(ModelConfig& config, const std::string& part) {
  if (part == "dpe") {
    config.use_dpe = false;
  } else if (part == "rm") {
    config.use_rm = false;
  } else if (part == "dk") {
    config.use_dk = false;
  } else if (part == "asf") {
    config.use_asf = false;
  } else {
    throw Error(ErrorCode::kUsage, "unknown ablation \"" + part + "\" (expected dpe|rm|dk|asf)");
  }
}

std::string format_float(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_pretrain_metrics(std::ostream& out, std::span<const EpochRecord> history) {
  out << "epoch,train_loss,val_mse_v,val_mse_m,val_loss\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << format_float(r.train_loss) << ',' << format_float(r.val_mse_v)
        << ',' << format_float(r.val_mse_m) << ',' << format_float(r.val_loss) << '\n';
  }
}

void write_finetune_metrics(std::ostream& out, const FinetuneConfig& config,
                            std::span<const FinetuneRecord> history) {
  out << "epoch,train_loss,"
      << (config.task == HeadKind::kPredict ? "val_mae_" + std::to_string(config.horizon)
                                            : std::string("val_precision"))
      << '\n';
  for (const auto& r : history) {
    out << r.epoch << ',' << format_float(r.train_loss) << ',' << format_float(r.metric) << '\n';
  }
}

}  // namespace dmae
