#pragma once

// Aggregation over repetitions, extremes of activation, and the report files
// (report.json, per_sample.csv, scatter.csv, extremes.json).

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "raymoe/errors.hpp"
#include "raymoe/sample.hpp"
#include "raymoe/training.hpp"

namespace raymoe {

struct RepetitionSummary {
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  double mean_used_params = 0.0;
  std::size_t total_params = 0;
  double mean_active_fraction = 0.0;

  friend bool operator==(const RepetitionSummary&, const RepetitionSummary&) = default;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;

  friend bool operator==(const MeanStd&, const MeanStd&) = default;
};

struct RunReport {
  std::string dataset;
  std::string model = "raymoe";
  std::vector<RepetitionSummary> repetitions;
  MeanStd accuracy;
  MeanStd used_params;
  MeanStd active_fraction;
  double total_params = 0.0;
  /// 1 - mean_used / total, from the aggregate means.
  double reduction = 0.0;
  /// Full per-sample table of the first repetition.
  std::vector<SampleRecord> samples;

  std::vector<std::uint64_t> seeds() const {
    std::vector<std::uint64_t> s;
    for (const auto& r : repetitions) s.push_back(r.seed);
    return s;
  }

  friend bool operator==(const RunReport&, const RunReport&) = default;
};

struct RepetitionRun {
  std::uint64_t seed = 0;
  EvalResult eval;
};

namespace detail {

/// Population statistics; sums run over sorted values so the result does not
/// depend on repetition order.
inline MeanStd mean_std(std::vector<double> v) {
  if (v.empty()) return {};
  std::sort(v.begin(), v.end());
  const auto n = static_cast<double>(v.size());
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / n;
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / n)};
}

inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) throw std::runtime_error("format_double failed");
  return std::string(buf.data(), end);
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw DataError("cannot create output directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  cells.push_back(std::move(cur));
  return cells;
}

inline std::string csv_cell(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

template <class T>
T parse_number(const std::string& s, const std::string& where) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw ParseError(where, "bad number '" + s + "'");
  return v;
}

}  // namespace detail

inline RunReport aggregate(const std::vector<RepetitionRun>& runs, std::string dataset, std::string model = "raymoe") {
  if (runs.empty()) throw ConfigError("aggregate: no runs");
  RunReport rep;
  rep.dataset = std::move(dataset);
  rep.model = std::move(model);
  std::vector<double> acc, used, active, total;
  for (const auto& r : runs) {
    rep.repetitions.push_back(
        {r.seed, r.eval.accuracy, r.eval.mean_used_params, r.eval.total_params, r.eval.mean_active_fraction});
    acc.push_back(r.eval.accuracy);
    used.push_back(r.eval.mean_used_params);
    active.push_back(r.eval.mean_active_fraction);
    total.push_back(static_cast<double>(r.eval.total_params));
  }
  rep.accuracy = detail::mean_std(acc);
  rep.used_params = detail::mean_std(used);
  rep.active_fraction = detail::mean_std(active);
  rep.total_params = detail::mean_std(total).mean;
  rep.reduction = rep.total_params > 0 ? 1.0 - rep.used_params.mean / rep.total_params : 0.0;
  rep.samples = runs.front().eval.records;
  return rep;
}

struct ExtremeEntry {
  std::size_t index = 0;
  double active_block_pct = 0.0;

  friend bool operator==(const ExtremeEntry&, const ExtremeEntry&) = default;
};

struct Extremes {
  std::vector<ExtremeEntry> least_active;
  std::vector<ExtremeEntry> most_active;

  friend bool operator==(const Extremes&, const Extremes&) = default;
};

/// k least and k most active samples; ties broken by lower index in both lists.
inline Extremes extremes(std::span<const SampleRecord> samples, std::size_t k = 12) {
  if (samples.empty()) throw DataError("extremes: empty per-sample table");
  k = std::min(k, samples.size());
  std::vector<std::size_t> ord(samples.size());
  std::iota(ord.begin(), ord.end(), std::size_t{0});
  auto entry = [&](std::size_t i) { return ExtremeEntry{samples[i].index, samples[i].active_block_pct}; };
  Extremes ex;
  std::stable_sort(ord.begin(), ord.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = samples[a];
    const auto& y = samples[b];
    return x.active_block_pct != y.active_block_pct ? x.active_block_pct < y.active_block_pct : x.index < y.index;
  });
  for (std::size_t i = 0; i < k; ++i) ex.least_active.push_back(entry(ord[i]));
  std::stable_sort(ord.begin(), ord.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = samples[a];
    const auto& y = samples[b];
    return x.active_block_pct != y.active_block_pct ? x.active_block_pct > y.active_block_pct : x.index < y.index;
  });
  for (std::size_t i = 0; i < k; ++i) ex.most_active.push_back(entry(ord[i]));
  return ex;
}

inline Extremes extremes(const RunReport& report, std::size_t k = 12) { return extremes(report.samples, k); }

// Serialization ---------------------------------------------------------------

inline constexpr std::string_view kPerSampleHeader =
    "index,label,prediction,correct,used_params,active_block_pct,steps,final_theta,terminated_by";

inline std::string per_sample_csv(std::span<const SampleRecord> samples) {
  std::string out(kPerSampleHeader);
  out += '\n';
  for (const auto& r : samples) {
    out += std::to_string(r.index) + ',' + std::to_string(r.label) + ',' + std::to_string(r.prediction) + ',' +
           (r.correct ? "1" : "0") + ',' + std::to_string(r.used_params) + ',' +
           detail::format_double(r.active_block_pct) + ',' + std::to_string(r.steps) + ',' +
           detail::format_double(r.final_theta) + ',' + detail::csv_cell(r.terminated_by) + '\n';
  }
  return out;
}

/// Parses per_sample.csv text. `loss` is not part of the file and reads as 0.
inline std::vector<SampleRecord> parse_per_sample_csv(std::string_view text, const std::string& origin = "per_sample.csv") {
  std::vector<SampleRecord> rows;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(line_no);
    if (!header_seen) {
      if (line != kPerSampleHeader) throw ParseError(where, "unexpected header");
      header_seen = true;
      continue;
    }
    const auto c = detail::split_csv_line(line);
    if (c.size() != 9) throw ParseError(where, "expected 9 columns, got " + std::to_string(c.size()));
    SampleRecord r;
    r.index = detail::parse_number<std::size_t>(c[0], where);
    r.label = detail::parse_number<std::size_t>(c[1], where);
    r.prediction = detail::parse_number<std::size_t>(c[2], where);
    if (c[3] != "0" && c[3] != "1") throw ParseError(where, "correct must be 0 or 1");
    r.correct = c[3] == "1";
    r.used_params = detail::parse_number<std::size_t>(c[4], where);
    r.active_block_pct = detail::parse_number<double>(c[5], where);
    r.steps = detail::parse_number<std::size_t>(c[6], where);
    r.final_theta = detail::parse_number<double>(c[7], where);
    r.terminated_by = c[8];
    rows.push_back(std::move(r));
  }
  if (!header_seen) throw ParseError(origin, "empty file");
  return rows;
}

inline std::vector<SampleRecord> read_per_sample_csv(const std::filesystem::path& path) {
  return parse_per_sample_csv(detail::read_text(path), path.string());
}

inline nlohmann::ordered_json to_json(const RunReport& r) {
  nlohmann::ordered_json j;
  j["dataset"] = r.dataset;
  j["model"] = r.model;
  j["seeds"] = r.seeds();
  j["aggregate"] = {
      {"test_accuracy", {{"mean", r.accuracy.mean}, {"std", r.accuracy.std}}},
      {"mean_used_params", {{"mean", r.used_params.mean}, {"std", r.used_params.std}}},
      {"mean_active_fraction", {{"mean", r.active_fraction.mean}, {"std", r.active_fraction.std}}},
      {"total_params", r.total_params},
      {"reduction", r.reduction},
  };
  auto reps = nlohmann::ordered_json::array();
  for (const auto& s : r.repetitions) {
    reps.push_back({{"seed", s.seed},
                    {"test_accuracy", s.test_accuracy},
                    {"mean_used_params", s.mean_used_params},
                    {"total_params", s.total_params},
                    {"mean_active_fraction", s.mean_active_fraction}});
  }
  j["repetitions"] = std::move(reps);
  return j;
}

inline nlohmann::ordered_json to_json(const Extremes& e) {
  auto list = [](const std::vector<ExtremeEntry>& v) {
    auto a = nlohmann::ordered_json::array();
    for (const auto& x : v) a.push_back({{"index", x.index}, {"active_block_pct", x.active_block_pct}});
    return a;
  };
  nlohmann::ordered_json j;
  j["k"] = e.least_active.size();
  j["least_active"] = list(e.least_active);
  j["most_active"] = list(e.most_active);
  return j;
}

inline Extremes extremes_from_json(const nlohmann::json& j) {
  Extremes e;
  try {
    for (const auto& x : j.at("least_active")) e.least_active.push_back({x.at("index"), x.at("active_block_pct")});
    for (const auto& x : j.at("most_active")) e.most_active.push_back({x.at("index"), x.at("active_block_pct")});
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError("extremes", ex.what());
  }
  return e;
}

/// Inserts or replaces the row named `name`, keeping first-seen row order.
inline void upsert_scatter_row(const std::filesystem::path& path, const std::string& name, double accuracy,
                               double mean_used_params) {
  std::vector<std::array<std::string, 3>> rows;
  if (std::filesystem::exists(path)) {
    const std::string text = detail::read_text(path);
    std::istringstream in(text);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (first) {
        first = false;
        continue;
      }
      if (line.empty()) continue;
      auto c = detail::split_csv_line(line);
      if (c.size() != 3) throw ParseError(path.string(), "expected 3 columns");
      rows.push_back({c[0], c[1], c[2]});
    }
  }
  const std::array<std::string, 3> row{name, detail::format_double(accuracy), detail::format_double(mean_used_params)};
  auto it = std::find_if(rows.begin(), rows.end(), [&](const auto& r) { return r[0] == name; });
  if (it != rows.end()) {
    *it = row;
  } else {
    rows.push_back(row);
  }
  std::string out = "name,accuracy,mean_used_params\n";
  for (const auto& r : rows) out += detail::csv_cell(r[0]) + ',' + r[1] + ',' + r[2] + '\n';
  detail::write_text(path, out);
}

inline void emit(const RunReport& report, const std::filesystem::path& out_dir, std::size_t k = 12) {
  detail::ensure_directory(out_dir);
  detail::write_text(out_dir / "report.json", to_json(report).dump(2) + "\n");
  detail::write_text(out_dir / "per_sample.csv", per_sample_csv(report.samples));
  upsert_scatter_row(out_dir / "scatter.csv", report.model, report.accuracy.mean, report.used_params.mean);
  if (!report.samples.empty()) {
    detail::write_text(out_dir / "extremes.json", to_json(extremes(report, k)).dump(2) + "\n");
  }
}

/// Rebuilds a RunReport from report.json and per_sample.csv in `dir`.
inline RunReport read_report(const std::filesystem::path& dir) {
  const auto path = dir / "report.json";
  RunReport r;
  try {
    const auto j = nlohmann::json::parse(detail::read_text(path));
    r.dataset = j.at("dataset").get<std::string>();
    r.model = j.at("model").get<std::string>();
    const auto& agg = j.at("aggregate");
    r.accuracy = {agg.at("test_accuracy").at("mean"), agg.at("test_accuracy").at("std")};
    r.used_params = {agg.at("mean_used_params").at("mean"), agg.at("mean_used_params").at("std")};
    r.active_fraction = {agg.at("mean_active_fraction").at("mean"), agg.at("mean_active_fraction").at("std")};
    r.total_params = agg.at("total_params");
    r.reduction = agg.at("reduction");
    for (const auto& s : j.at("repetitions")) {
      r.repetitions.push_back({s.at("seed"), s.at("test_accuracy"), s.at("mean_used_params"), s.at("total_params"),
                               s.at("mean_active_fraction")});
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(path.string(), ex.what());
  }
  if (std::filesystem::exists(dir / "per_sample.csv")) {
    r.samples = read_per_sample_csv(dir / "per_sample.csv");
  }
  return r;
}

}  // namespace raymoe
