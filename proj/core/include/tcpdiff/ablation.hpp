#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tcpdiff/training.hpp"

namespace tcpdiff::ablation {

namespace fs = std::filesystem;

struct Row {
  std::string name;
  bool arp = false;
  bool multimodal = false;
  bool future = false;
  std::size_t parameters = 0;
  double initial_loss = 0.0;  // mean of the first min(100, steps) steps
  double final_loss = 0.0;    // mean of the last min(100, steps) steps
  std::optional<double> tp_mae;
  std::optional<double> ets24;
};

struct Options {
  /// Test samples forecast per configuration; 0 skips evaluation.
  std::size_t eval_samples = 0;
  std::size_t members = 1;
};

/// The four toggle combinations: baseline, +ARP, +ARP+M, +ARP+M+F.
std::vector<Row> rows_template();

/// Trains each configuration from `base` (toggles overridden) into out/<name>, then
/// optionally evaluates it. Writes out/ablation.csv and out/ablation.md.
std::vector<Row> run(const train::TrainConfig& base, const fs::path& out, const Options& options = {});

double window_mean(const std::vector<double>& v, bool head, std::size_t window = 100);

}  // namespace tcpdiff::ablation
