#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dmae/tensor.hpp"

namespace dmae::data {

using Rng = std::mt19937_64;

/// Whole multivariate series as read from disk: values and mask are [n, L].
struct RawSeries {
  std::vector<std::string> names;
  Tensor<double> values;
  Tensor<double> mask;

  std::size_t attributes() const { return values.rank() ? values.dim(0) : 0; }
  std::size_t length() const { return values.rank() ? values.dim(1) : 0; }
};

/// Fixed-length slice: values X and mask M are [n, T]; M is 1 where observed.
/// Values at M = 0 are always 0.0.
struct MtsWindow {
  Tensor<double> values;
  Tensor<double> mask;
  std::size_t origin = 0;

  std::size_t attributes() const { return values.dim(0); }
  std::size_t length() const { return values.dim(1); }
};

/// A window plus everything evaluation and fine-tuning need: ground truth at
/// artificially removed entries, an optional class label, and the values
/// following the window.
struct Sample {
  MtsWindow window;
  Tensor<double> truth;        // [n, T]
  Tensor<double> truth_known;  // [n, T], 1 where truth holds a real value
  int label = -1;
  Tensor<double> future;        // [n, F]
  Tensor<double> future_known;  // [n, F]
};

enum class MissingPattern { kPoint, kLine, kBlock };

MissingPattern parse_pattern(const std::string& name);
std::string pattern_name(MissingPattern p);

struct MaskPlan {
  double ratio = 0.0;
  MissingPattern pattern = MissingPattern::kPoint;
  std::size_t span = 5;
  std::uint64_t seed = 0;
};

struct NormalizerState {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

struct SyntheticSpec {
  std::size_t attributes = 5;
  std::size_t length = 64;
  std::size_t count = 2000;
  std::size_t classes = 3;
  std::size_t horizon = 5;
  double noise = 0.1;
  std::uint64_t seed = 1;
};

// Empty cells and the literal NaN are missing. Throws kData with the row and
// column of an unparseable cell or a ragged row.
RawSeries parse_csv(std::istream& in, const std::string& source = "<stream>");
RawSeries load_csv(const std::filesystem::path& path);
void write_csv(std::ostream& out, const RawSeries& series);

MtsWindow slice(const RawSeries& series, std::size_t origin, std::size_t length);
std::vector<MtsWindow> window(const RawSeries& series, std::size_t length, std::size_t stride);

/// Sets X to 0 wherever M is 0.
void canonicalize(MtsWindow& w);

NormalizerState fit_normalizer(std::span<const MtsWindow> train);
void apply_normalizer(const NormalizerState& state, MtsWindow& w);
void invert_normalizer(const NormalizerState& state, MtsWindow& w);
/// Normalises window, truth and future of a sample in place.
void apply_normalizer(const NormalizerState& state, Sample& s);
double normalize_value(const NormalizerState& state, std::size_t attr, double v);

/// Removes observed entries following `pattern` until `ratio` of all n*T
/// entries is newly missing (point: i.i.d. Bernoulli over observed entries).
MtsWindow inject_missing(const MtsWindow& w, double ratio, MissingPattern pattern, Rng& rng,
                         std::size_t span = 5);

/// Each observed entry independently drops to 0 with probability `ratio`.
template <typename T>
Tensor<T> random_submask(const Tensor<T>& mask, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw Error(ErrorCode::kConfig, "random_submask: ratio must lie in [0, 1)");
  }
  Tensor<T> out = mask;
  if (ratio == 0.0) return out;
  std::bernoulli_distribution drop(ratio);
  for (auto& v : out.storage()) {
    if (v != T(0) && drop(rng)) v = T(0);
  }
  return out;
}

DatasetSplit split(std::size_t count, double train_fraction, Rng& rng);

/// Labeled sinusoid mixtures; class c carries its own frequency signature.
std::vector<Sample> make_synthetic(const SyntheticSpec& spec);

/// Wraps a complete window as a sample whose truth equals its values.
Sample make_sample(MtsWindow w);

/// Injects missingness into a sample, keeping originals as truth.
void mask_sample(Sample& s, double ratio, MissingPattern pattern, Rng& rng, std::size_t span = 5);

struct PrepareOptions {
  double missing_ratio = 0.0;
  MissingPattern pattern = MissingPattern::kPoint;
  std::size_t span = 5;
  double train_fraction = 0.9;
  std::uint64_t seed = 1;
};

struct PreparedData {
  std::vector<Sample> train;
  std::vector<Sample> validation;
  NormalizerState normalizer;
};

/// Splits samples, injects evaluation missingness (originals kept as truth),
/// fits the normaliser on the training windows and normalises everything.
PreparedData prepare_dataset(std::vector<Sample> samples, const PrepareOptions& options);

// Dataset directory of samples:
//   meta.json         attribute names, window length, horizon, window count
//   series.csv        window,step,<attr>...; steps [0, T) are the window, the
//                     rest its future; an empty cell is missing
//   labels.csv        window,label (only when some sample is labeled)
//   ground_truth.csv  window,step,attribute,value for entries removed by
//                     masking (optional)
void write_dataset(const std::filesystem::path& dir, std::span<const Sample> samples,
                   std::span<const std::string> names = {});
std::vector<Sample> read_dataset(const std::filesystem::path& dir);

/// Slides a window of `length` over a series; each sample keeps up to
/// `horizon` following steps as its future.
std::vector<Sample> samples_from_series(const RawSeries& series, std::size_t length,
                                        std::size_t stride, std::size_t horizon);

// Binary window cache: "DMAE", version byte, little-endian u32 count/n/T,
// row-major float32 values, then mask bits packed LSB-first.
void write_cache(const std::filesystem::path& path, std::span<const MtsWindow> windows);
std::vector<MtsWindow> read_cache(const std::filesystem::path& path);

}  // namespace dmae::data
