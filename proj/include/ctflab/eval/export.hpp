#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ctflab/eval/experiments.hpp"

namespace ctflab::eval {

// Comma-separated table with a header row. Numbers are written as the
// shortest text that round-trips; cells containing commas or quotes are quoted.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add_row(std::vector<std::string> row);
  std::string str() const;
};

std::string csv_number(double v);

CsvTable to_csv(const PerImageGap& gap);
CsvTable to_csv(const WeightDistanceTrace& trace);
CsvTable to_csv(const ConsistencyReport& report);
CsvTable windows_csv(const ConsistencyReport& report);

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

// Standalone SVG documents (800x480) with axes, ticks and a legend.
std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series);
std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<Series>& groups);

std::string svg_trace_chart(const WeightDistanceTrace& trace);
std::string svg_consistency_chart(const ConsistencyReport& report);
std::string svg_gap_chart(const PerImageGap& gap);

// Writes through a temporary file in the same directory and renames it.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace ctflab::eval
