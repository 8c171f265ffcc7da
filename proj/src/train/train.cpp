#include "dmae/train.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

namespace dmae {

void TrainConfig::validate() const {
  model.validate();
  if (epochs == 0) throw Error(ErrorCode::kConfig, "epochs must be >= 1");
  if (warmup_epochs >= epochs) {
    throw Error(ErrorCode::kConfig, "warm-up epochs must be fewer than total epochs");
  }
  if (batch_size == 0) throw Error(ErrorCode::kConfig, "batch size must be >= 1");
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::kConfig, "learning rate must be > 0");
  if (!(divergence_factor > 1.0)) throw Error(ErrorCode::kConfig, "divergence factor must be > 1");
}

void FinetuneConfig::validate() const {
  if (task == HeadKind::kNone) throw Error(ErrorCode::kConfig, "fine-tune task not set");
  if (task == HeadKind::kPredict && horizon == 0) {
    throw Error(ErrorCode::kConfig, "prediction horizon must be >= 1");
  }
  if (task == HeadKind::kClassify && classes < 2) {
    throw Error(ErrorCode::kConfig, "class count must be >= 2");
  }
  if (batch_size == 0) throw Error(ErrorCode::kConfig, "batch size must be >= 1");
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::kConfig, "learning rate must be > 0");
}

template <typename T>
Adam<T>::Adam(std::vector<Parameter<T>*> params, double learning_rate, double beta1,
              double beta2, double eps)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

template <typename T>
void Adam<T>::step() {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& value = params_[i]->value.storage();
    const auto& grad = params_[i]->grad.storage();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      const double update = lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      value[j] = static_cast<T>(static_cast<double>(value[j]) - update);
    }
  }
}

template class Adam<float>;
template class Adam<double>;

template <typename T>
Batch<T> make_batch(std::span<const data::Sample> samples, std::span<const std::size_t> index) {
  if (index.empty()) throw Error(ErrorCode::kConfig, "empty batch");
  const auto& first = samples[index[0]].window;
  const std::size_t n = first.attributes(), len = first.length(), per = n * len;
  const Shape shape{index.size(), n, len};
  Batch<T> b{Tensor<T>(shape), Tensor<T>(shape), Tensor<T>(shape), Tensor<T>(shape), {}, {}};
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& s = samples[index[i]];
    if (s.window.attributes() != n || s.window.length() != len) {
      throw Error(ErrorCode::kConfig, "batch mixes window shapes");
    }
    for (std::size_t j = 0; j < per; ++j) {
      b.x[i * per + j] = static_cast<T>(s.window.values[j]);
      b.mask[i * per + j] = static_cast<T>(s.window.mask[j]);
      b.truth[i * per + j] = static_cast<T>(s.truth.empty() ? s.window.values[j] : s.truth[j]);
      b.truth_known[i * per + j] =
          static_cast<T>(s.truth_known.empty() ? s.window.mask[j] : s.truth_known[j]);
    }
    b.labels.push_back(s.label);
    b.samples.push_back(&s);
  }
  return b;
}

template Batch<float> make_batch<float>(std::span<const data::Sample>, std::span<const std::size_t>);
template Batch<double> make_batch<double>(std::span<const data::Sample>,
                                          std::span<const std::size_t>);

namespace {

std::optional<double> masked_ratio(const Tensor<double>& reference, const Tensor<double>& weight,
                                   const Tensor<double>& recon) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    if (weight[i] == 0.0) continue;
    const double d = (reference[i] - recon[i]) * weight[i];
    num += d * d;
    den += weight[i] * weight[i];
  }
  if (den == 0.0) return std::nullopt;
  return std::sqrt(num) / std::sqrt(den);
}

void check_fits(const DmaeModel<float>& model, std::span<const data::Sample> samples) {
  const auto& c = model.config();
  for (const auto& s : samples) {
    if (s.window.attributes() != c.attributes || s.window.length() != c.length) {
      throw Error(ErrorCode::kConfig,
                  "window " + shape_string(s.window.values.shape()) + " does not match model [" +
                      std::to_string(c.attributes) + "," + std::to_string(c.length) + "]");
    }
  }
}

std::vector<std::size_t> iota_index(std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

template <typename Fn>
void for_each_chunk(std::span<const std::size_t> order, std::size_t batch_size, Fn&& fn) {
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    fn(order.subspan(start, std::min(batch_size, order.size() - start)));
  }
}

}  // namespace

std::optional<double> observed_error(const Tensor<double>& x, const Tensor<double>& mask,
                                     const Tensor<double>& recon) {
  return masked_ratio(x, mask, recon);
}

std::optional<double> missing_error(const Tensor<double>& truth, const Tensor<double>& mask,
                                    const Tensor<double>& truth_known,
                                    const Tensor<double>& recon) {
  Tensor<double> weight(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) weight[i] = (1.0 - mask[i]) * truth_known[i];
  return masked_ratio(truth, weight, recon);
}

ImputationMetrics imputation_metrics(std::span<const data::Sample> samples,
                                     std::span<const Tensor<double>> recon) {
  ImputationMetrics m;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (auto v = observed_error(s.window.values, s.window.mask, recon[i])) {
      m.mse_v += *v;
      ++m.windows_v;
    } else {
      ++skipped;
    }
    if (auto v = missing_error(s.truth, s.window.mask, s.truth_known, recon[i])) {
      m.mse_m += *v;
      ++m.windows_m;
    } else {
      ++skipped;
    }
  }
  if (skipped > 0) spdlog::warn("{} window metric(s) skipped for an empty mask", skipped);
  if (m.windows_v) m.mse_v /= static_cast<double>(m.windows_v);
  if (m.windows_m) m.mse_m /= static_cast<double>(m.windows_m);
  return m;
}

std::vector<Tensor<double>> reconstruct_all(DmaeModel<float>& model,
                                            std::span<const data::Sample> samples, bool warmup,
                                            std::size_t batch_size) {
  check_fits(model, samples);
  std::vector<Tensor<double>> out;
  out.reserve(samples.size());
  const auto order = iota_index(samples.size());
  for_each_chunk(std::span<const std::size_t>(order), batch_size, [&](auto chunk) {
    Graph<float> g;
    ForwardContext<float> ctx{g, false, warmup, true, nullptr};
    const auto b = make_batch<float>(samples, chunk);
    const auto& r = g.value(model.reconstruct(ctx, b.x, b.mask, b.mask));
    const std::size_t per = r.size() / chunk.size();
    const Shape shape{r.dim(1), r.dim(2)};
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      out.emplace_back(shape, std::vector<double>(r.data() + i * per, r.data() + (i + 1) * per));
    }
  });
  return out;
}

std::vector<Tensor<double>> mean_imputation(std::span<const data::Sample> samples) {
  std::vector<Tensor<double>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    Tensor<double> r = s.window.values;
    for (std::size_t a = 0; a < r.dim(0); ++a) {
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t t = 0; t < r.dim(1); ++t) {
        if (s.window.mask.at(a, t) != 0.0) {
          sum += s.window.values.at(a, t);
          ++count;
        }
      }
      const double mean = count ? sum / static_cast<double>(count) : 0.0;
      for (std::size_t t = 0; t < r.dim(1); ++t) {
        if (s.window.mask.at(a, t) == 0.0) r.at(a, t) = mean;
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

PretrainResult pretrain(DmaeModel<float>& model, std::span<const data::Sample> train,
                        std::span<const data::Sample> validation, const TrainConfig& config,
                        const EpochCallback& on_epoch) {
  config.validate();
  if (train.empty()) throw Error(ErrorCode::kConfig, "training split is empty");
  check_fits(model, train);
  check_fits(model, validation);
  const double m_r = model.config().mask_ratio;
  Rng rng(config.seed);
  auto params = model.parameters();
  Adam<float> optimizer(params, config.learning_rate);
  auto order = iota_index(train.size());
  const auto val_order = iota_index(validation.size());
  std::optional<double> initial;
  PretrainResult result;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const bool warm = epoch < config.warmup_epochs;
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for_each_chunk(std::span<const std::size_t>(order), config.batch_size, [&](auto chunk) {
      Graph<float> g;
      ForwardContext<float> ctx{g, true, warm, false, nullptr};
      const auto b = make_batch<float>(train, chunk);
      const auto pair = model.forward_dual(ctx, b.x, b.mask, rng);
      const Var loss = training_objective(g, pair, b.x, m_r);
      const double value = g.value(loss)[0];
      if (!std::isfinite(value) ||
          (initial && *initial > 0.0 && value > config.divergence_factor * *initial)) {
        throw Error(ErrorCode::kDivergence,
                    "loss " + std::to_string(value) + " at epoch " + std::to_string(epoch) +
                        " exceeds " + std::to_string(config.divergence_factor) +
                        "x the initial loss " + std::to_string(initial.value_or(0.0)));
      }
      if (!initial) initial = value;
      zero_grads<float>(params);
      g.backward(loss);
      optimizer.step();
      loss_sum += value * static_cast<double>(chunk.size());
    });

    EpochRecord rec;
    rec.epoch = epoch;
    rec.warmup = warm;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    if (!validation.empty()) {
      const auto recon = reconstruct_all(model, validation, warm, config.batch_size);
      const auto metrics = imputation_metrics(validation, recon);
      rec.val_mse_v = metrics.mse_v;
      rec.val_mse_m = metrics.mse_m;
      // Same submask draw every epoch so the curve reflects the model only.
      Rng val_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
      double sum = 0.0;
      for_each_chunk(std::span<const std::size_t>(val_order), config.batch_size,
                     [&](auto chunk) {
                       Graph<float> g;
                       ForwardContext<float> ctx{g, false, warm, true, nullptr};
                       const auto b = make_batch<float>(validation, chunk);
                       const auto pair = model.forward_dual(ctx, b.x, b.mask, val_rng);
                       sum += g.value(training_objective(g, pair, b.x, m_r))[0] *
                              static_cast<double>(chunk.size());
                     });
      rec.val_loss = sum / static_cast<double>(validation.size());
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.warmup_active = config.epochs <= config.warmup_epochs;
  return result;
}

double horizon_mae(std::span<const double> target, std::span<const double> prediction) {
  if (target.size() != prediction.size() || target.empty()) {
    throw Error(ErrorCode::kDimension, "horizon_mae: target and prediction lengths differ");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) sum += std::abs(target[i] - prediction[i]);
  return sum / static_cast<double>(target.size());
}

double precision(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size() || labels.empty()) {
    throw Error(ErrorCode::kDimension, "precision: prediction and label counts differ");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

int argmax(std::span<const double> scores) {
  return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

void check_task_data(std::span<const data::Sample> samples, const FinetuneConfig& config) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (config.task == HeadKind::kPredict) {
      if (config.target >= s.window.attributes()) {
        throw Error(ErrorCode::kConfig, "target attribute " + std::to_string(config.target) +
                                            " out of range");
      }
      if (s.future.empty() || s.future.dim(1) < config.horizon) {
        throw Error(ErrorCode::kData,
                    "sample " + std::to_string(i) + " has " +
                        std::to_string(s.future.empty() ? 0 : s.future.dim(1)) +
                        " future values, horizon needs " + std::to_string(config.horizon));
      }
    } else if (s.label < 0 || static_cast<std::size_t>(s.label) >= config.classes) {
      throw Error(ErrorCode::kData, "sample " + std::to_string(i) + " label " +
                                        std::to_string(s.label) + " outside [0, " +
                                        std::to_string(config.classes) + ")");
    }
  }
}

std::size_t head_input_width(HeadKind kind, std::size_t hidden) {
  return kind == HeadKind::kPredict ? 2 * hidden : hidden;
}

Var head_features(Graph<float>& g, Var features, HeadKind kind) {
  const Var pooled = head_pool(g, features);
  if (kind != HeadKind::kPredict) return pooled;
  const std::array<Var, 2> parts = {pooled, ops::last_step(g, features)};
  return ops::concat<float>(g, parts, 1);
}

namespace {

Tensor<float> prediction_targets(std::span<const data::Sample> samples,
                                 std::span<const std::size_t> chunk, const FinetuneConfig& c) {
  Tensor<float> out(Shape{chunk.size(), c.horizon});
  for (std::size_t i = 0; i < chunk.size(); ++i) {
    const auto& f = samples[chunk[i]].future;
    for (std::size_t s = 0; s < c.horizon; ++s) {
      out.at(i, s) = static_cast<float>(f.at(c.target, s));
    }
  }
  return out;
}

}  // namespace

Tensor<double> head_outputs(DmaeModel<float>& model, FeedForwardHead<float>& head,
                            std::span<const data::Sample> samples, const FinetuneConfig& config) {
  check_fits(model, samples);
  const std::size_t outs = head.outputs();
  Tensor<double> out(Shape{samples.size(), outs});
  const auto order = iota_index(samples.size());
  for_each_chunk(std::span<const std::size_t>(order), config.batch_size, [&](auto chunk) {
    Graph<float> g;
    ForwardContext<float> ctx{g, false, config.warmup, true, nullptr};
    const auto b = make_batch<float>(samples, chunk);
    const Var features = model.encode(ctx, b.x, b.mask, b.mask);
    const Var y = head.forward(ctx, head_features(g, features, config.task));
    const auto& v = g.value(y);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      for (std::size_t j = 0; j < outs; ++j) out.at(chunk[i], j) = v.at(i, j);
    }
  });
  return out;
}

double evaluate_head(DmaeModel<float>& model, FeedForwardHead<float>& head,
                     std::span<const data::Sample> samples, const FinetuneConfig& config) {
  if (samples.empty()) return 0.0;
  check_task_data(samples, config);
  const auto y = head_outputs(model, head, samples, config);
  const std::size_t outs = y.dim(1);
  if (config.task == HeadKind::kPredict) {
    double sum = 0.0;
    std::vector<double> target(config.horizon);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      for (std::size_t s = 0; s < config.horizon; ++s) {
        target[s] = samples[i].future.at(config.target, s);
      }
      sum += horizon_mae(target, std::span<const double>(y.data() + i * outs, outs));
    }
    return sum / static_cast<double>(samples.size());
  }
  std::vector<int> predicted, labels;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    predicted.push_back(argmax(std::span<const double>(y.data() + i * outs, outs)));
    labels.push_back(samples[i].label);
  }
  return precision(predicted, labels);
}

double persistence_mae(std::span<const data::Sample> samples, std::size_t target,
                       std::size_t horizon) {
  if (samples.empty()) return 0.0;
  double sum = 0.0;
  std::vector<double> truth(horizon), guess(horizon);
  for (const auto& s : samples) {
    double last = 0.0;
    for (std::size_t t = s.window.length(); t-- > 0;) {
      if (s.window.mask.at(target, t) != 0.0) {
        last = s.window.values.at(target, t);
        break;
      }
    }
    for (std::size_t k = 0; k < horizon; ++k) {
      truth[k] = s.future.at(target, k);
      guess[k] = last;
    }
    sum += horizon_mae(truth, guess);
  }
  return sum / static_cast<double>(samples.size());
}

std::vector<FinetuneRecord> finetune(DmaeModel<float>& model, FeedForwardHead<float>& head,
                                     std::span<const data::Sample> train,
                                     std::span<const data::Sample> validation,
                                     const FinetuneConfig& config,
                                     const std::function<void(const FinetuneRecord&)>& on_epoch) {
  config.validate();
  if (train.empty()) throw Error(ErrorCode::kConfig, "training split is empty");
  check_fits(model, train);
  check_task_data(train, config);
  check_task_data(validation, config);
  if (head.outputs() != config.head_outputs() ||
      head.hidden_w.value.dim(0) != head_input_width(config.task, model.config().hidden)) {
    throw Error(ErrorCode::kConfig, "head width does not match the task");
  }
  Rng rng(config.seed);
  std::vector<Parameter<float>*> params;
  head.collect(params);
  if (!config.freeze_encoder) {
    for (auto* p : model.parameters()) params.push_back(p);
  }
  Adam<float> optimizer(params, config.learning_rate);
  auto order = iota_index(train.size());
  std::vector<FinetuneRecord> history;
  const bool training = !config.freeze_encoder;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for_each_chunk(std::span<const std::size_t>(order), config.batch_size, [&](auto chunk) {
      Graph<float> g;
      ForwardContext<float> ctx{g, training, config.warmup, config.freeze_encoder, nullptr};
      const auto b = make_batch<float>(train, chunk);
      std::optional<Tensor<float>> noise;
      if (training && model.dpe) noise = model.dpe->draw_noise(b.x.shape(), rng);
      const Var features = model.encode(ctx, b.x, b.mask, b.mask, noise ? &*noise : nullptr);
      const Var y = head.forward(ctx, head_features(g, features, config.task));
      const Var loss = config.task == HeadKind::kPredict
                           ? ops::mse(g, y, prediction_targets(train, chunk, config))
                           : ops::softmax_cross_entropy<float>(g, y, b.labels);
      const double value = g.value(loss)[0];
      if (!std::isfinite(value)) {
        throw Error(ErrorCode::kDivergence, "fine-tune loss is not finite at epoch " +
                                                std::to_string(epoch));
      }
      zero_grads<float>(params);
      g.backward(loss);
      optimizer.step();
      loss_sum += value * static_cast<double>(chunk.size());
    });
    FinetuneRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.metric = evaluate_head(model, head, validation, config);
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

}  // namespace dmae
