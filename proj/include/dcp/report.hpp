#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

namespace dcp {

/// Shortest-round-trip-style formatting for report files: %.17g renders any
/// f64 exactly, which keeps reruns byte-identical.
inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Fixed 6-decimal rendering for human-facing summary numbers.
inline std::string fmt_fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline double mean_of(const std::vector<double>& xs) {
  double m = 0.0;
  for (double x : xs) m += x;
  return xs.empty() ? 0.0 : m / static_cast<double>(xs.size());
}

/// Population standard deviation over the seed axis.
inline double stddev_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size()));
}

/// Structured-text report document: a key-value header, named tables, and a
/// machine-readable RESULT line per summary entry.
class ReportDoc {
 public:
  explicit ReportDoc(std::string title) : title_(std::move(title)) {}

  void kv(const std::string& key, const std::string& value) { header_.emplace_back(key, value); }

  void begin_table(const std::string& name, const std::vector<std::string>& columns) {
    tables_.push_back({name, columns, {}});
  }
  void row(const std::vector<std::string>& cells) { tables_.back().rows.push_back(cells); }

  void machine_line(const std::string& line) { machine_.push_back(line); }

  std::string render() const {
    std::string out;
    out += "# " + title_ + "\n";
    out += "format 1\n\n";
    out += "[config]\n";
    for (const auto& [key, value] : header_) out += key + " = " + value + "\n";
    for (const Table& table : tables_) {
      out += "\n[" + table.name + "]\n";
      for (std::size_t i = 0; i < table.columns.size(); ++i)
        out += (i ? "\t" : "") + table.columns[i];
      out += "\n";
      for (const auto& row : table.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "\t" : "") + row[i];
        out += "\n";
      }
    }
    if (!machine_.empty()) {
      out += "\n[machine]\n";
      for (const std::string& line : machine_) out += line + "\n";
    }
    return out;
  }

 private:
  struct Table {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;
  };
  std::string title_;
  std::vector<std::pair<std::string, std::string>> header_;
  std::vector<Table> tables_;
  std::vector<std::string> machine_;
};

}  // namespace dcp
