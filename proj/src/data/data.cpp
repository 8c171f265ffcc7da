#include "dmae/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace dmae::data {
namespace {

constexpr double kNormEpsilon = 1e-8;
constexpr char kCacheMagic[4] = {'D', 'M', 'A', 'E'};
constexpr std::uint8_t kCacheVersion = 1;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      return out;
    }
    out.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw Error(ErrorCode::kData, "window cache truncated while reading " + what);
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

// Picks span starts that neither overlap nor touch an earlier injected span,
// so every injected run keeps exactly `span` steps.
bool place_span(std::vector<char>& taken, std::size_t span, Rng& rng, std::size_t& start) {
  const std::size_t len = taken.size();
  if (span > len) return false;
  std::uniform_int_distribution<std::size_t> pick(0, len - span);
  for (int attempt = 0; attempt < 256; ++attempt) {
    const std::size_t s = pick(rng);
    const std::size_t lo = s == 0 ? 0 : s - 1;
    const std::size_t hi = std::min(len, s + span + 1);
    bool free = true;
    for (std::size_t t = lo; t < hi && free; ++t) free = !taken[t];
    if (free) {
      start = s;
      return true;
    }
  }
  // Fall back to an exhaustive scan before giving up.
  std::vector<std::size_t> options;
  for (std::size_t s = 0; s + span <= len; ++s) {
    const std::size_t lo = s == 0 ? 0 : s - 1;
    const std::size_t hi = std::min(len, s + span + 1);
    bool free = true;
    for (std::size_t t = lo; t < hi && free; ++t) free = !taken[t];
    if (free) options.push_back(s);
  }
  if (options.empty()) return false;
  start = options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng)];
  return true;
}

}  // namespace

MissingPattern parse_pattern(const std::string& name) {
  if (name == "point") return MissingPattern::kPoint;
  if (name == "line") return MissingPattern::kLine;
  if (name == "block") return MissingPattern::kBlock;
  throw Error(ErrorCode::kUsage, "unknown missing pattern '" + name + "' (point|line|block)");
}

std::string pattern_name(MissingPattern p) {
  switch (p) {
    case MissingPattern::kPoint: return "point";
    case MissingPattern::kLine: return "line";
    case MissingPattern::kBlock: return "block";
  }
  return "point";
}

RawSeries parse_csv(std::istream& in, const std::string& source) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::kData, source + ": empty file");
  RawSeries series;
  for (auto f : split_fields(line)) series.names.emplace_back(f);
  const std::size_t n = series.names.size();
  std::vector<double> cols;
  std::vector<double> obs;
  std::size_t rows = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != n) {
      throw Error(ErrorCode::kData, source + ": row " + std::to_string(lineno) + " has " +
                                        std::to_string(fields.size()) + " fields, expected " +
                                        std::to_string(n));
    }
    for (std::size_t c = 0; c < n; ++c) {
      const auto f = fields[c];
      if (f.empty() || f == "NaN" || f == "nan") {
        cols.push_back(0.0);
        obs.push_back(0.0);
        continue;
      }
      double v = 0.0;
      const auto* end = f.data() + f.size();
      auto [ptr, ec] = std::from_chars(f.data(), end, v);
      if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
        throw Error(ErrorCode::kData, source + ": cannot parse '" + std::string(f) + "' at row " +
                                          std::to_string(lineno) + ", column " +
                                          std::to_string(c + 1) + " (" + series.names[c] + ")");
      }
      cols.push_back(v);
      obs.push_back(1.0);
    }
    ++rows;
  }
  series.values = Tensor<double>(Shape{n, rows});
  series.mask = Tensor<double>(Shape{n, rows});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      series.values.at(c, r) = cols[r * n + c];
      series.mask.at(c, r) = obs[r * n + c];
    }
  }
  return series;
}

RawSeries load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kData, "cannot open " + path.string());
  return parse_csv(in, path.string());
}

void write_csv(std::ostream& out, const RawSeries& series) {
  for (std::size_t c = 0; c < series.names.size(); ++c) {
    out << (c ? "," : "") << series.names[c];
  }
  out << '\n';
  out << std::setprecision(9);
  for (std::size_t t = 0; t < series.length(); ++t) {
    for (std::size_t c = 0; c < series.attributes(); ++c) {
      if (c) out << ',';
      if (series.mask.at(c, t) != 0.0) out << series.values.at(c, t);
    }
    out << '\n';
  }
}

MtsWindow slice(const RawSeries& series, std::size_t origin, std::size_t length) {
  if (origin + length > series.length()) {
    throw Error(ErrorCode::kConfig, "window [" + std::to_string(origin) + ", " +
                                        std::to_string(origin + length) +
                                        ") exceeds series length " +
                                        std::to_string(series.length()));
  }
  const std::size_t n = series.attributes();
  MtsWindow w{Tensor<double>(Shape{n, length}), Tensor<double>(Shape{n, length}), origin};
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t t = 0; t < length; ++t) {
      w.values.at(c, t) = series.values.at(c, origin + t);
      w.mask.at(c, t) = series.mask.at(c, origin + t) != 0.0 ? 1.0 : 0.0;
    }
  }
  canonicalize(w);
  return w;
}

std::vector<MtsWindow> window(const RawSeries& series, std::size_t length, std::size_t stride) {
  if (stride == 0) throw Error(ErrorCode::kConfig, "window stride must be >= 1");
  if (length == 0 || length > series.length()) {
    throw Error(ErrorCode::kConfig, "window length " + std::to_string(length) +
                                        " invalid for series of length " +
                                        std::to_string(series.length()));
  }
  std::vector<MtsWindow> out;
  for (std::size_t o = 0; o + length <= series.length(); o += stride) {
    out.push_back(slice(series, o, length));
  }
  return out;
}

void canonicalize(MtsWindow& w) {
  for (std::size_t i = 0; i < w.values.size(); ++i) {
    if (w.mask[i] == 0.0) w.values[i] = 0.0;
  }
}

NormalizerState fit_normalizer(std::span<const MtsWindow> train) {
  NormalizerState st;
  if (train.empty()) return st;
  const std::size_t n = train.front().attributes();
  st.mean.assign(n, 0.0);
  st.stddev.assign(n, 1.0);
  for (std::size_t c = 0; c < n; ++c) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& w : train) {
      for (std::size_t t = 0; t < w.length(); ++t) {
        if (w.mask.at(c, t) != 0.0) {
          sum += w.values.at(c, t);
          ++count;
        }
      }
    }
    if (count == 0) continue;
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (const auto& w : train) {
      for (std::size_t t = 0; t < w.length(); ++t) {
        if (w.mask.at(c, t) != 0.0) sq += (w.values.at(c, t) - mean) * (w.values.at(c, t) - mean);
      }
    }
    st.mean[c] = mean;
    st.stddev[c] = count < 2 ? 1.0 : std::max(std::sqrt(sq / static_cast<double>(count)), kNormEpsilon);
  }
  return st;
}

double normalize_value(const NormalizerState& st, std::size_t attr, double v) {
  return (v - st.mean[attr]) / st.stddev[attr];
}

void apply_normalizer(const NormalizerState& st, MtsWindow& w) {
  for (std::size_t c = 0; c < w.attributes(); ++c) {
    for (std::size_t t = 0; t < w.length(); ++t) {
      if (w.mask.at(c, t) != 0.0) w.values.at(c, t) = normalize_value(st, c, w.values.at(c, t));
    }
  }
}

void invert_normalizer(const NormalizerState& st, MtsWindow& w) {
  for (std::size_t c = 0; c < w.attributes(); ++c) {
    for (std::size_t t = 0; t < w.length(); ++t) {
      if (w.mask.at(c, t) != 0.0) w.values.at(c, t) = w.values.at(c, t) * st.stddev[c] + st.mean[c];
    }
  }
}

void apply_normalizer(const NormalizerState& st, Sample& s) {
  apply_normalizer(st, s.window);
  auto norm_known = [&](Tensor<double>& values, const Tensor<double>& known) {
    if (values.empty()) return;
    for (std::size_t c = 0; c < values.dim(0); ++c) {
      for (std::size_t t = 0; t < values.dim(1); ++t) {
        if (known.at(c, t) != 0.0) values.at(c, t) = normalize_value(st, c, values.at(c, t));
      }
    }
  };
  norm_known(s.truth, s.truth_known);
  norm_known(s.future, s.future_known);
}

MtsWindow inject_missing(const MtsWindow& w, double ratio, MissingPattern pattern, Rng& rng,
                         std::size_t span) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw Error(ErrorCode::kConfig, "missing ratio must lie in [0, 1)");
  }
  MtsWindow out = w;
  if (ratio == 0.0) return out;
  const std::size_t n = w.attributes(), len = w.length();
  if (pattern == MissingPattern::kPoint) {
    std::bernoulli_distribution drop(ratio);
    for (auto& m : out.mask.storage()) {
      if (m != 0.0 && drop(rng)) m = 0.0;
    }
    canonicalize(out);
    return out;
  }
  if (span == 0) throw Error(ErrorCode::kConfig, "missing span must be >= 1");
  span = std::min(span, len);
  std::size_t observed = 0;
  for (double m : out.mask.values()) observed += m != 0.0;
  const auto target = std::min<std::size_t>(
      observed, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n * len))));
  std::size_t removed = 0;
  if (pattern == MissingPattern::kBlock) {
    std::vector<char> taken(len, 0);
    std::size_t start = 0;
    while (removed < target && place_span(taken, span, rng, start)) {
      for (std::size_t t = start; t < start + span; ++t) {
        taken[t] = 1;
        for (std::size_t c = 0; c < n; ++c) {
          if (out.mask.at(c, t) != 0.0) {
            out.mask.at(c, t) = 0.0;
            ++removed;
          }
        }
      }
    }
  } else {
    std::vector<std::vector<char>> taken(n, std::vector<char>(len, 0));
    std::vector<char> full(n, 0);
    std::uniform_int_distribution<std::size_t> pick_attr(0, n - 1);
    std::size_t start = 0;
    while (removed < target) {
      const std::size_t c = pick_attr(rng);
      if (full[c]) {
        if (std::all_of(full.begin(), full.end(), [](char f) { return f != 0; })) break;
        continue;
      }
      if (!place_span(taken[c], span, rng, start)) {
        full[c] = 1;
        continue;
      }
      for (std::size_t t = start; t < start + span; ++t) {
        taken[c][t] = 1;
        if (out.mask.at(c, t) != 0.0) {
          out.mask.at(c, t) = 0.0;
          ++removed;
        }
      }
    }
  }
  canonicalize(out);
  return out;
}

DatasetSplit split(std::size_t count, double train_fraction, Rng& rng) {
  if (count < 10) {
    throw Error(ErrorCode::kConfig, "split needs at least 10 windows, got " + std::to_string(count));
  }
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto ntrain = static_cast<std::size_t>(
      std::ceil(train_fraction * static_cast<double>(count) - 1e-9));
  DatasetSplit s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(ntrain));
  s.validation.assign(idx.begin() + static_cast<std::ptrdiff_t>(ntrain), idx.end());
  return s;
}

Sample make_sample(MtsWindow w) {
  canonicalize(w);
  Sample s;
  s.truth = w.values;
  s.truth_known = w.mask;
  s.window = std::move(w);
  return s;
}

void mask_sample(Sample& s, double ratio, MissingPattern pattern, Rng& rng, std::size_t span) {
  s.window = inject_missing(s.window, ratio, pattern, rng, span);
}

std::vector<Sample> make_synthetic(const SyntheticSpec& spec) {
  if (spec.attributes == 0 || spec.length == 0 || spec.count == 0 || spec.classes == 0) {
    throw Error(ErrorCode::kConfig, "synthetic dataset parameters must be positive");
  }
  constexpr double kBasePeriod = 64.0;
  Rng rng(spec.seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.8, 1.2);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t n = spec.attributes, total = spec.length + spec.horizon;
  std::vector<Sample> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const auto label = static_cast<int>(i % spec.classes);
    Tensor<double> series(Shape{n, total});
    for (std::size_t a = 0; a < n; ++a) {
      const double k1 = 2.0 + 2.0 * label;
      const double k2 = k1 + 1.0 + static_cast<double>(a % 3);
      const double p1 = phase(rng), p2 = phase(rng), scale = amp(rng);
      const double offset = 0.3 * static_cast<double>(a), spread = 1.0 + 0.25 * static_cast<double>(a);
      for (std::size_t t = 0; t < total; ++t) {
        const double tt = static_cast<double>(t);
        double v = scale * (std::sin(2.0 * std::numbers::pi * k1 * tt / kBasePeriod + p1) +
                            0.5 * std::sin(2.0 * std::numbers::pi * k2 * tt / kBasePeriod + p2));
        if (spec.noise > 0.0) v += spec.noise * noise(rng);
        series.at(a, t) = offset + spread * v;
      }
    }
    MtsWindow w{Tensor<double>(Shape{n, spec.length}), Tensor<double>(Shape{n, spec.length}, 1.0),
                i * total};
    Sample s;
    s.future = Tensor<double>(Shape{n, spec.horizon});
    s.future_known = Tensor<double>(Shape{n, spec.horizon}, 1.0);
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t t = 0; t < spec.length; ++t) w.values.at(a, t) = series.at(a, t);
      for (std::size_t t = 0; t < spec.horizon; ++t) s.future.at(a, t) = series.at(a, spec.length + t);
    }
    s.truth = w.values;
    s.truth_known = w.mask;
    s.window = std::move(w);
    s.label = label;
    out.push_back(std::move(s));
  }
  return out;
}

PreparedData prepare_dataset(std::vector<Sample> samples, const PrepareOptions& options) {
  if (!(options.missing_ratio >= 0.0 && options.missing_ratio < 1.0)) {
    throw Error(ErrorCode::kConfig, "missing ratio must lie in [0, 1)");
  }
  Rng rng(options.seed);
  const DatasetSplit parts = split(samples.size(), options.train_fraction, rng);
  if (options.missing_ratio > 0.0) {
    for (auto& s : samples) mask_sample(s, options.missing_ratio, options.pattern, rng, options.span);
  }
  PreparedData out;
  for (auto i : parts.train) out.train.push_back(std::move(samples[i]));
  for (auto i : parts.validation) out.validation.push_back(std::move(samples[i]));
  std::vector<MtsWindow> windows;
  windows.reserve(out.train.size());
  for (const auto& s : out.train) windows.push_back(s.window);
  out.normalizer = fit_normalizer(windows);
  for (auto& s : out.train) apply_normalizer(out.normalizer, s);
  for (auto& s : out.validation) apply_normalizer(out.normalizer, s);
  return out;
}

void write_cache(const std::filesystem::path& path, std::span<const MtsWindow> windows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(kCacheMagic, 4);
  out.put(static_cast<char>(kCacheVersion));
  const std::uint32_t n = windows.empty() ? 0 : static_cast<std::uint32_t>(windows[0].attributes());
  const std::uint32_t len = windows.empty() ? 0 : static_cast<std::uint32_t>(windows[0].length());
  put_u32(out, static_cast<std::uint32_t>(windows.size()));
  put_u32(out, n);
  put_u32(out, len);
  for (const auto& w : windows) {
    if (w.attributes() != n || w.length() != len) {
      throw Error(ErrorCode::kData, "window cache requires windows of one shape");
    }
    for (double v : w.values.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  std::uint8_t byte = 0;
  std::size_t bit = 0;
  for (const auto& w : windows) {
    for (double m : w.mask.values()) {
      if (m != 0.0) byte |= static_cast<std::uint8_t>(1u << bit);
      if (++bit == 8) {
        out.put(static_cast<char>(byte));
        byte = 0;
        bit = 0;
      }
    }
  }
  if (bit) out.put(static_cast<char>(byte));
}

std::vector<MtsWindow> read_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCacheMagic, 4) != 0) {
    throw Error(ErrorCode::kData, path.string() + ": not a window cache");
  }
  const int version = in.get();
  if (version != kCacheVersion) {
    throw Error(ErrorCode::kData, path.string() + ": unsupported cache version " + std::to_string(version));
  }
  const std::uint32_t count = get_u32(in, "count");
  const std::uint32_t n = get_u32(in, "attributes");
  const std::uint32_t len = get_u32(in, "length");
  std::vector<MtsWindow> windows(count);
  for (auto& w : windows) {
    w.values = Tensor<double>(Shape{n, len});
    w.mask = Tensor<double>(Shape{n, len});
    for (auto& v : w.values.storage()) v = std::bit_cast<float>(get_u32(in, "values"));
  }
  const std::size_t bits = static_cast<std::size_t>(count) * n * len;
  std::vector<char> packed((bits + 7) / 8);
  if (!packed.empty() && !in.read(packed.data(), static_cast<std::streamsize>(packed.size()))) {
    throw Error(ErrorCode::kData, path.string() + ": window cache truncated in mask section");
  }
  std::size_t k = 0;
  for (auto& w : windows) {
    for (auto& m : w.mask.storage()) {
      m = ((static_cast<unsigned char>(packed[k / 8]) >> (k % 8)) & 1u) ? 1.0 : 0.0;
      ++k;
    }
  }
  return windows;
}

}  // namespace dmae::data
