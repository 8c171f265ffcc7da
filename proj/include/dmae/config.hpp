#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>

#include <json.hpp>

#include "dmae/train.hpp"

namespace dmae {

using Json = nlohmann::ordered_json;

// JSON objects mirror the struct field names; ModelConfig lives under "model".
// Unknown keys and wrongly typed values throw kConfig. Keys absent from the
// object keep the value already in `base`.
Json to_json(const ModelConfig& config);
Json to_json(const TrainConfig& config);
Json to_json(const FinetuneConfig& config);
ModelConfig model_config_from_json(const Json& j, ModelConfig base = {});
TrainConfig train_config_from_json(const Json& j, TrainConfig base = {});
FinetuneConfig finetune_config_from_json(const Json& j, FinetuneConfig base = {});

Json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Json& j);

std::string head_kind_name(HeadKind kind);
HeadKind parse_head_kind(const std::string& name);

/// Turns off one model component: "dpe", "rm", "dk" or "asf".
void apply_ablation(ModelConfig& config, const std::string& part);

/// Nine significant digits, shortest form.
std::string format_float(double v);

/// Columns: epoch, train_loss, val_mse_v, val_mse_m, val_loss.
void write_pretrain_metrics(std::ostream& out, std::span<const EpochRecord> history);
/// Columns: epoch, train_loss, then val_mae_<s> (prediction) or val_precision.
void write_finetune_metrics(std::ostream& out, const FinetuneConfig& config,
                            std::span<const FinetuneRecord> history);

}  // namespace dmae
