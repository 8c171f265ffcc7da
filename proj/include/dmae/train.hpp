#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "dmae/data.hpp"
#include "dmae/model.hpp"

namespace dmae {

struct TrainConfig {
  ModelConfig model;
  std::size_t warmup_epochs = 10;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 7;
  /// Abort once the batch loss exceeds this multiple of the first batch loss.
  double divergence_factor = 10.0;

  void validate() const;
};

/// Adaptive moment estimation with bias correction.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, double learning_rate, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update from the accumulated gradients.
  void step();
  std::size_t steps() const { return steps_; }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t steps_ = 0;
};

/// Stacked tensors for a batch of samples; x, mask, truth, truth_known are [B, n, T].
template <typename T>
struct Batch {
  Tensor<T> x, mask, truth, truth_known;
  std::vector<int> labels;
  std::vector<const data::Sample*> samples;
};

template <typename T>
Batch<T> make_batch(std::span<const data::Sample> samples, std::span<const std::size_t> index);

/// |M o (X - X_hat)| / |M| for one window; nullopt when M is all zero.
std::optional<double> observed_error(const Tensor<double>& x, const Tensor<double>& mask,
                                     const Tensor<double>& recon);
/// Same ratio over entries that are missing but carry retained ground truth.
std::optional<double> missing_error(const Tensor<double>& truth, const Tensor<double>& mask,
                                    const Tensor<double>& truth_known,
                                    const Tensor<double>& recon);

struct ImputationMetrics {
  double mse_v = 0.0;
  double mse_m = 0.0;
  std::size_t windows_v = 0;  // windows contributing to each average
  std::size_t windows_m = 0;
};

/// Averages both errors over windows; recon[i] is the [n, T] estimate for samples[i].
ImputationMetrics imputation_metrics(std::span<const data::Sample> samples,
                                     std::span<const Tensor<double>> recon);

/// Full-path reconstructions in evaluation mode, one [n, T] tensor per sample.
std::vector<Tensor<double>> reconstruct_all(DmaeModel<float>& model,
                                            std::span<const data::Sample> samples,
                                            bool warmup, std::size_t batch_size);

/// Fills each missing entry with its attribute's mean over the window's observed entries.
std::vector<Tensor<double>> mean_imputation(std::span<const data::Sample> samples);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mse_v = 0.0;
  double val_mse_m = 0.0;
  double val_loss = 0.0;
  bool warmup = false;
};

struct PretrainResult {
  std::vector<EpochRecord> history;
  bool warmup_active = false;  // state of the schedule after the last epoch
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Dual-path masked-reconstruction pretraining. Throws kDivergence when the
/// loss blows up and kConfig when the samples do not fit the model.
PretrainResult pretrain(DmaeModel<float>& model, std::span<const data::Sample> train,
                        std::span<const data::Sample> validation, const TrainConfig& config,
                        const EpochCallback& on_epoch = {});

enum class HeadKind : std::uint8_t { kNone = 0, kPredict = 1, kClassify = 2 };

/// Head input width for encoder features of width `hidden`.
std::size_t head_input_width(HeadKind kind, std::size_t hidden);

/// Features [B, h_s, T] -> head input. Classification reads the time mean;
/// prediction reads the time mean followed by the features of the last step.
Var head_features(Graph<float>& g, Var features, HeadKind kind);

struct FinetuneConfig {
  HeadKind task = HeadKind::kPredict;
  std::size_t horizon = 1;
  std::size_t target = 0;
  std::size_t classes = 3;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  bool freeze_encoder = false;
  bool warmup = false;  // attention schedule state inherited from pretraining
  std::uint64_t seed = 7;

  std::size_t head_outputs() const { return task == HeadKind::kPredict ? horizon : classes; }
  void validate() const;
};

struct FinetuneRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double metric = 0.0;  // MAE_p(s) for prediction, precision for classification
};

/// Mean absolute error of one horizon, |target - prediction|_1 / s.
double horizon_mae(std::span<const double> target, std::span<const double> prediction);
/// Fraction of predictions equal to their label.
double precision(std::span<const int> predicted, std::span<const int> labels);
int argmax(std::span<const double> scores);

/// Throws kData when a sample cannot serve the task (short future, bad label).
void check_task_data(std::span<const data::Sample> samples, const FinetuneConfig& config);

/// Head outputs [N, outputs] in evaluation mode.
Tensor<double> head_outputs(DmaeModel<float>& model, FeedForwardHead<float>& head,
                            std::span<const data::Sample> samples, const FinetuneConfig& config);

/// MAE_p(s) or precision of the head on the samples.
double evaluate_head(DmaeModel<float>& model, FeedForwardHead<float>& head,
                     std::span<const data::Sample> samples, const FinetuneConfig& config);

/// Repeats the target attribute's last observed value over the horizon.
double persistence_mae(std::span<const data::Sample> samples, std::size_t target,
                       std::size_t horizon);

std::vector<FinetuneRecord> finetune(DmaeModel<float>& model, FeedForwardHead<float>& head,
                                     std::span<const data::Sample> train,
                                     std::span<const data::Sample> validation,
                                     const FinetuneConfig& config,
                                     const std::function<void(const FinetuneRecord&)>& on_epoch = {});

}  // namespace dmae
