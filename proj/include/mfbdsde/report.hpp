#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "error.hpp"
#include "scenarios.hpp"

namespace mfbdsde {

struct ReportRow {
  std::string scenario_id, check_id, metric;
  double value = 0.0, std_error = 0.0;
  std::size_t n_samples = 0;
  double dt = 0.0;
  std::size_t N = 0, M = 0;
  std::uint64_t seed = 0;
  bool pass = true;
};

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{"scenario_id", "check_id", "metric", "value", "std_error", "n_samples",
                                             "dt",          "N",        "M",      "seed",  "pass"};
  return cols;
}

namespace detail {

inline std::string join(const std::vector<std::string>& v, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// ids end up in file names and CSV cells
inline void check_token(const std::string& s, const char* what) {
  require(!s.empty() && s.find_first_of(",\n\r\"") == std::string::npos, ErrorCode::InvalidArgument,
          std::string("bad ") + what + ": '" + s + "'");
}

}  // namespace detail

inline std::string format_row(const ReportRow& r) {
  detail::check_token(r.scenario_id, "scenario id");
  detail::check_token(r.check_id, "check id");
  detail::check_token(r.metric, "metric");
  require(std::isfinite(r.value) && std::isfinite(r.std_error) && std::isfinite(r.dt), ErrorCode::NonfiniteState,
          "report row " + r.check_id + "/" + r.metric + " is not finite");
  return detail::join({r.scenario_id, r.check_id, r.metric, fmt17(r.value), fmt17(r.std_error),
                       std::to_string(r.n_samples), fmt17(r.dt), std::to_string(r.N), std::to_string(r.M),
                       std::to_string(r.seed), r.pass ? "true" : "false"});
}

inline std::string format_report(const std::vector<ReportRow>& rows) {
  std::string out = detail::join(report_columns()) + "\n";
  for (const auto& r : rows) out += format_row(r) + "\n";
  return out;
}

inline ReportRow parse_row(const std::vector<std::string>& f) {
  require(f.size() == report_columns().size(), ErrorCode::SchemaMismatch, "row has the wrong number of fields");
  ReportRow r;
  r.scenario_id = f[0];
  r.check_id = f[1];
  r.metric = f[2];
  r.value = detail::parse_number<double>("value", f[3]);
  r.std_error = detail::parse_number<double>("std_error", f[4]);
  r.n_samples = detail::parse_number<std::size_t>("n_samples", f[5]);
  r.dt = detail::parse_number<double>("dt", f[6]);
  r.N = detail::parse_number<std::size_t>("N", f[7]);
  r.M = detail::parse_number<std::size_t>("M", f[8]);
  r.seed = detail::parse_number<std::uint64_t>("seed", f[9]);
  require(f[10] == "true" || f[10] == "false", ErrorCode::SchemaMismatch, "pass must be true or false");
  r.pass = f[10] == "true";
  return r;
}

inline std::vector<ReportRow> parse_report(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  require(static_cast<bool>(std::getline(ss, line)), ErrorCode::SchemaMismatch, "report is empty");
  require(detail::split(line) == report_columns(), ErrorCode::SchemaMismatch, "unexpected report header");
  std::vector<ReportRow> rows;
  while (std::getline(ss, line))
    if (!line.empty()) rows.push_back(parse_row(detail::split(line)));
  return rows;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::ConfigError, "cannot read " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::ConfigError, "cannot write " + path);
  out << text;
}

inline std::string report_file_name(const std::string& scenario, const std::string& subcommand, std::uint64_t seed) {
  return scenario + "__" + subcommand + "__" + std::to_string(seed) + ".csv";
}

// Concatenates reports that share the row schema, adds the source as a provenance column and
// orders rows by (scenario, check, metric) keeping file order within ties.
inline std::string report_merge(const std::vector<std::pair<std::string, std::string>>& named_reports) {
  struct Tagged {
    std::vector<std::string> fields;
    std::string source;
  };
  std::vector<Tagged> all;
  for (const auto& [name, text] : named_reports) {
    std::stringstream ss(text);
    std::string line;
    require(static_cast<bool>(std::getline(ss, line)), ErrorCode::SchemaMismatch, name + " is empty");
    require(detail::split(line) == report_columns(), ErrorCode::SchemaMismatch, name + " has a different header");
    while (std::getline(ss, line)) {
      if (line.empty()) continue;
      auto f = detail::split(line);
      require(f.size() == report_columns().size(), ErrorCode::SchemaMismatch, name + " has a malformed row");
      all.push_back({std::move(f), name});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) {
    return std::tie(a.fields[0], a.fields[1], a.fields[2]) < std::tie(b.fields[0], b.fields[1], b.fields[2]);
  });
  std::string out = detail::join(report_columns()) + ",provenance\n";
  for (const auto& t : all) out += detail::join(t.fields) + "," + t.source + "\n";
  return out;
}

inline bool all_pass(const std::vector<ReportRow>& rows) {
  return std::all_of(rows.begin(), rows.end(), [](const ReportRow& r) { return r.pass; });
}

}  // namespace mfbdsde
