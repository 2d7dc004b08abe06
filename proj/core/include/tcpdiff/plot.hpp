#pragma once

#include <filesystem>
#include <string>
#include <vector>

/// SVG charts rendered from the CSV artifacts.
namespace tcpdiff::plot {

namespace fs = std::filesystem;

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  int width = 640;
  int height = 420;
};

std::string line_chart(const std::vector<Series>& series, const ChartOptions& options);

/// Reads a CSV file into rows of fields; lines starting with '#' are skipped and the
/// header row is returned first.
std::vector<std::vector<std::string>> read_csv(const fs::path& path);

/// Renders whatever of metrics.csv, histogram.csv, rapsd.csv and loss.csv exists in
/// `input` into SVG files in `out`. Returns the files written.
std::vector<fs::path> render_directory(const fs::path& input, const fs::path& out);

}  // namespace tcpdiff::plot
