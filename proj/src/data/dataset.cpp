#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "dmae/data.hpp"

namespace dmae::data {
namespace {

std::size_t horizon_of(std::span<const Sample> samples) {
  return samples.empty() || samples[0].future.rank() == 0 ? 0 : samples[0].future.dim(1);
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << std::setprecision(9);
  return out;
}

std::size_t to_index(const std::string& field, const std::string& where) {
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(field, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != field.size()) throw Error(ErrorCode::kData, where + ": bad index '" + field + "'");
  return v;
}

std::vector<std::string> fields_of(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, std::span<const Sample> samples,
                   std::span<const std::string> names) {
  if (samples.empty()) throw Error(ErrorCode::kData, "no samples to write");
  std::filesystem::create_directories(dir);
  const std::size_t n = samples[0].window.attributes(), len = samples[0].window.length();
  const std::size_t horizon = horizon_of(samples);
  std::vector<std::string> cols(names.begin(), names.end());
  if (cols.empty()) {
    for (std::size_t a = 0; a < n; ++a) cols.push_back("x" + std::to_string(a));
  }
  if (cols.size() != n) throw Error(ErrorCode::kData, "attribute name count does not match n");

  nlohmann::ordered_json meta{{"attributes", cols},
                              {"length", len},
                              {"horizon", horizon},
                              {"count", samples.size()}};
  open_out(dir / "meta.json") << meta.dump(2) << '\n';

  auto series = open_out(dir / "series.csv");
  series << "window,step";
  for (const auto& c : cols) series << ',' << c;
  series << '\n';
  bool labeled = false, has_truth = false;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.window.attributes() != n || s.window.length() != len || horizon_of({&s, 1}) != horizon) {
      throw Error(ErrorCode::kData, "sample " + std::to_string(i) + " has a different shape");
    }
    labeled |= s.label >= 0;
    for (std::size_t t = 0; t < len + horizon; ++t) {
      series << i << ',' << t;
      for (std::size_t a = 0; a < n; ++a) {
        series << ',';
        if (t < len) {
          if (s.window.mask.at(a, t) != 0.0) series << s.window.values.at(a, t);
          else if (s.truth_known.at(a, t) != 0.0) has_truth = true;
        } else if (s.future_known.at(a, t - len) != 0.0) {
          series << s.future.at(a, t - len);
        }
      }
      series << '\n';
    }
  }
  if (labeled) {
    auto labels = open_out(dir / "labels.csv");
    labels << "window,label\n";
    for (std::size_t i = 0; i < samples.size(); ++i) labels << i << ',' << samples[i].label << '\n';
  }
  std::filesystem::remove(dir / "ground_truth.csv");
  if (has_truth) {
    auto truth = open_out(dir / "ground_truth.csv");
    truth << "window,step,attribute,value\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t a = 0; a < n; ++a) {
          if (s.window.mask.at(a, t) == 0.0 && s.truth_known.at(a, t) != 0.0) {
            truth << i << ',' << t << ',' << a << ',' << s.truth.at(a, t) << '\n';
          }
        }
      }
    }
  }
}

std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in) throw Error(ErrorCode::kData, "cannot open " + (dir / "meta.json").string());
  std::size_t n = 0, len = 0, horizon = 0, count = 0;
  try {
    const auto meta = nlohmann::json::parse(meta_in);
    n = meta.at("attributes").size();
    len = meta.at("length").get<std::size_t>();
    horizon = meta.at("horizon").get<std::size_t>();
    count = meta.at("count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kData, (dir / "meta.json").string() + ": " + e.what());
  }
  if (n == 0 || len == 0 || count == 0) throw Error(ErrorCode::kData, "empty dataset " + dir.string());

  std::vector<Sample> out(count);
  for (auto& s : out) {
    s.window = MtsWindow{Tensor<double>(Shape{n, len}), Tensor<double>(Shape{n, len}), 0};
    s.truth = Tensor<double>(Shape{n, len});
    s.truth_known = Tensor<double>(Shape{n, len});
    s.future = Tensor<double>(Shape{n, horizon});
    s.future_known = Tensor<double>(Shape{n, horizon});
  }

  const auto series_path = dir / "series.csv";
  std::ifstream series_in(series_path);
  if (!series_in) throw Error(ErrorCode::kData, "cannot open " + series_path.string());
  RawSeries raw = parse_csv(series_in, series_path.string());
  if (raw.attributes() != n + 2) {
    throw Error(ErrorCode::kData, series_path.string() + ": expected " + std::to_string(n + 2) +
                                      " columns");
  }
  if (raw.length() != count * (len + horizon)) {
    throw Error(ErrorCode::kData, series_path.string() + ": expected " +
                                      std::to_string(count * (len + horizon)) + " rows");
  }
  for (std::size_t r = 0; r < raw.length(); ++r) {
    const auto i = r / (len + horizon), t = r % (len + horizon);
    if (raw.mask.at(0, r) == 0.0 || raw.mask.at(1, r) == 0.0 ||
        raw.values.at(0, r) != static_cast<double>(i) ||
        raw.values.at(1, r) != static_cast<double>(t)) {
      throw Error(ErrorCode::kData, series_path.string() + ": row " + std::to_string(r + 2) +
                                        " is out of window/step order");
    }
    auto& s = out[i];
    for (std::size_t a = 0; a < n; ++a) {
      const double v = raw.values.at(a + 2, r), m = raw.mask.at(a + 2, r);
      if (t < len) {
        s.window.values.at(a, t) = v;
        s.window.mask.at(a, t) = m;
        s.truth.at(a, t) = v;
        s.truth_known.at(a, t) = m;
      } else {
        s.future.at(a, t - len) = v;
        s.future_known.at(a, t - len) = m;
      }
    }
  }

  if (std::ifstream labels(dir / "labels.csv"); labels) {
    std::string line;
    std::getline(labels, line);
    std::size_t i = 0;
    while (std::getline(labels, line)) {
      if (line.empty()) continue;
      const auto f = fields_of(line);
      const std::string where = (dir / "labels.csv").string();
      if (f.size() != 2 || to_index(f[0], where) != i || i >= count) {
        throw Error(ErrorCode::kData, where + ": malformed row " + std::to_string(i + 2));
      }
      try {
        out[i].label = std::stoi(f[1]);
      } catch (const std::exception&) {
        throw Error(ErrorCode::kData, where + ": bad label '" + f[1] + "'");
      }
      ++i;
    }
  }

  if (std::ifstream truth(dir / "ground_truth.csv"); truth) {
    const std::string where = (dir / "ground_truth.csv").string();
    std::string line;
    std::getline(truth, line);
    while (std::getline(truth, line)) {
      if (line.empty()) continue;
      const auto f = fields_of(line);
      if (f.size() != 4) throw Error(ErrorCode::kData, where + ": malformed row '" + line + "'");
      const auto i = to_index(f[0], where), t = to_index(f[1], where), a = to_index(f[2], where);
      if (i >= count || t >= len || a >= n) {
        throw Error(ErrorCode::kData, where + ": entry out of range '" + line + "'");
      }
      if (out[i].window.mask.at(a, t) != 0.0) {
        throw Error(ErrorCode::kData, where + ": entry '" + line + "' is not missing");
      }
      try {
        out[i].truth.at(a, t) = std::stod(f[3]);
      } catch (const std::exception&) {
        throw Error(ErrorCode::kData, where + ": bad value '" + f[3] + "'");
      }
      out[i].truth_known.at(a, t) = 1.0;
    }
  }
  return out;
}

std::vector<Sample> samples_from_series(const RawSeries& series, std::size_t length,
                                        std::size_t stride, std::size_t horizon) {
  if (length == 0 || stride == 0) throw Error(ErrorCode::kConfig, "window length and stride must be >= 1");
  if (series.length() < length + horizon) {
    throw Error(ErrorCode::kData, "series is shorter than one window plus its horizon");
  }
  const std::size_t n = series.attributes();
  std::vector<Sample> out;
  for (std::size_t origin = 0; origin + length + horizon <= series.length(); origin += stride) {
    Sample s = make_sample(slice(series, origin, length));
    s.future = Tensor<double>(Shape{n, horizon});
    s.future_known = Tensor<double>(Shape{n, horizon});
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t t = 0; t < horizon; ++t) {
        if (series.mask.at(a, origin + length + t) != 0.0) {
          s.future.at(a, t) = series.values.at(a, origin + length + t);
          s.future_known.at(a, t) = 1.0;
        }
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dmae::data
