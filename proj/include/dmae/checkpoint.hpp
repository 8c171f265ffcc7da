#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "dmae/data.hpp"
#include "dmae/model.hpp"
#include "dmae/train.hpp"

namespace dmae {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  std::uint32_t version = kCheckpointVersion;
  ModelConfig model;
  bool warmup_active = false;
  HeadKind head = HeadKind::kNone;
  std::uint32_t head_outputs = 0;
  std::uint32_t head_target = 0;

  friend bool operator==(const CheckpointHeader&, const CheckpointHeader&) = default;
};

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

/// Little-endian container:
///   "DMCK", u32 version,
///   u32 n, T, h_s, h_a, ks[3], K; f64 lambda, gamma, m_r, sigma, token;
///   u8 dpe, rm, dk, asf, warmup_active, head kind; u32 head outputs, head target;
///   u32 attribute count, f64 mean[n], f64 stddev[n];
///   u32 entry count, then per entry u16 name length, name bytes, u8 rank,
///   u32 dims[rank], float32 values (row-major).
struct Checkpoint {
  CheckpointHeader header;
  data::NormalizerState normalizer;
  std::vector<NamedTensor> entries;
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
/// Throws kBadMagic, kVersionMismatch, kTruncated or kInconsistent.
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshots parameters and batch-norm buffers (and the head, if any).
Checkpoint capture(DmaeModel<float>& model, const data::NormalizerState& normalizer,
                   bool warmup_active, FeedForwardHead<float>* head = nullptr,
                   std::uint32_t head_target = 0);

/// Copies every entry into the model (and head); throws kInconsistent when
/// the entry list does not match the architecture exactly.
void restore(const Checkpoint& ckpt, DmaeModel<float>& model,
             FeedForwardHead<float>* head = nullptr);

/// Model built from the header, with the stored weights restored.
std::unique_ptr<DmaeModel<float>> build_model(const Checkpoint& ckpt);

/// Throws kConfig when the data windows do not have the header's (n, T).
void check_compatible(const CheckpointHeader& header, std::size_t attributes, std::size_t length);

}  // namespace dmae
