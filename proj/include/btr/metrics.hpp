#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

// Metrics rows and their CSV form. Numbers are written in shortest
// round-trip form so identical runs produce identical files.

namespace btr {

struct MetricsRow {
  std::int64_t frame = 0;
  std::int64_t episodes = 0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double iqm = std::numeric_limits<double>::quiet_NaN();
  double ci_low = std::numeric_limits<double>::quiet_NaN();
  double ci_high = std::numeric_limits<double>::quiet_NaN();
  double loss = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = std::numeric_limits<double>::quiet_NaN();
  double epsilon = std::numeric_limits<double>::quiet_NaN();
  double action_gap = std::numeric_limits<double>::quiet_NaN();
  double churn = std::numeric_limits<double>::quiet_NaN();
  double dormant_pct = std::numeric_limits<double>::quiet_NaN();
  double srank = std::numeric_limits<double>::quiet_NaN();
  double l2_total = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr std::array<std::string_view, 14> kMetricsColumns = {
    "frame",   "episodes",  "mean",  "iqm",        "ci_low", "ci_high", "loss",
    "grad_norm", "epsilon", "action_gap", "churn", "dormant_pct", "srank", "l2_total"};

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, r.ptr};
}

inline std::string metrics_header() {
  std::string s;
  for (std::size_t i = 0; i < kMetricsColumns.size(); ++i) {
    if (i) s += ',';
    s += kMetricsColumns[i];
  }
  return s;
}

inline std::string format_row(const MetricsRow& r) {
  std::string s = std::to_string(r.frame) + ',' + std::to_string(r.episodes);
  for (double v : {r.mean, r.iqm, r.ci_low, r.ci_high, r.loss, r.grad_norm, r.epsilon, r.action_gap, r.churn,
                   r.dormant_pct, r.srank, r.l2_total}) {
    s += ',';
    s += format_number(v);
  }
  return s;
}

inline double parse_number(std::string_view t) {
  if (t == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (t == "inf") return std::numeric_limits<double>::infinity();
  if (t == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0;
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc{} || r.ptr != t.data() + t.size()) throw MetricsError("bad number '" + std::string(t) + "'");
  return v;
}

inline MetricsRow parse_row(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (cells.size() != kMetricsColumns.size())
    throw MetricsError("metrics row has " + std::to_string(cells.size()) + " columns, expected " +
                       std::to_string(kMetricsColumns.size()));
  MetricsRow r;
  r.frame = static_cast<std::int64_t>(parse_number(cells[0]));
  r.episodes = static_cast<std::int64_t>(parse_number(cells[1]));
  double* fields[] = {&r.mean,  &r.iqm,        &r.ci_low, &r.ci_high,     &r.loss,  &r.grad_norm,
                      &r.epsilon, &r.action_gap, &r.churn, &r.dormant_pct, &r.srank, &r.l2_total};
  for (std::size_t i = 0; i < std::size(fields); ++i) *fields[i] = parse_number(cells[i + 2]);
  return r;
}

inline std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MetricsError("cannot read metrics file '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != metrics_header())
    throw MetricsError("'" + path + "' does not start with the metrics header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(parse_row(line));
  return rows;
}

/// Appends rows to a CSV file, writing the header when the file is new.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::string& path, bool append = false) : path_(path) {
    bool has_header = false;
    if (append) {
      std::ifstream probe(path);
      std::string first;
      has_header = probe && std::getline(probe, first) && first == metrics_header();
    }
    out_.open(path, append && has_header ? std::ios::app : std::ios::trunc);
    if (!out_) throw MetricsError("cannot write metrics file '" + path + "'");
    if (!has_header) out_ << metrics_header() << '\n';
    out_.flush();
  }

  bool is_open() const { return out_.is_open(); }

  void write(const MetricsRow& r) {
    if (!out_.is_open()) return;
    out_ << format_row(r) << '\n';
    out_.flush();
    if (!out_) throw MetricsError("write failed for '" + path_ + "'");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

}  // namespace btr
