#pragma once

#include <CLI11.hpp>

#include <cstdint>
#include <string>

namespace tcpdiff::cli {

class Commands {
 public:
  explicit Commands(CLI::App& app);
  /// Runs the parsed subcommand and returns its exit code.
  int run();

 private:
  CLI::App& app_;
  CLI::App* generate_ = nullptr;
  CLI::App* train_ = nullptr;
  CLI::App* forecast_ = nullptr;
  CLI::App* evaluate_ = nullptr;
  CLI::App* ablate_ = nullptr;
  CLI::App* plot_ = nullptr;
  CLI::App* selftest_ = nullptr;

  struct Generate {
    std::uint64_t seed = 7;
    std::size_t count = 8;
    std::size_t train_count = 0;
    std::size_t grid = 40;
    std::string synth_config;
    std::string out;
  } gen_;

  struct Model {
    std::string preset = "tiny";
    std::size_t base_channels = 0;
    std::size_t depth = 0;
    std::size_t heads = 0;
  };

  struct Train {
    std::string data;
    std::string out;
    std::uint64_t seed = 0;
    std::size_t steps = 2000;
    std::size_t batch = 2;
    double lr = 2e-4;
    bool no_arp = false, no_multimodal = false, no_future = false;
    std::size_t checkpoint_every = 0;
    std::size_t diffusion_steps = 200;
    std::string resume;
    Model model;
  } train_opts_;

  struct Forecast {
    std::string checkpoint;
    std::string data;
    std::string out;
    std::string split = "test";
    std::size_t members = 1;
    std::size_t limit = 0;
    std::uint64_t seed = 0;
  } fc_;

  struct Evaluate {
    std::string data;
    std::string forecast;
    std::string checkpoint;
    std::string out;
    std::size_t members = 1;
    std::size_t limit = 0;
    std::uint64_t seed = 0;
    bool aggregate_6h = false;
    bool no_persistence = false;
    std::string group_by;
  } ev_;

  struct Ablate {
    std::string data;
    std::string out;
    std::uint64_t seed = 0;
    std::size_t steps = 200;
    std::size_t batch = 2;
    double lr = 2e-4;
    std::size_t eval_samples = 4;
    std::size_t members = 1;
    Model model;
  } ab_;

  struct Plot {
    std::string input;
    std::string out;
  } plot_opts_;

  struct Selftest {
    std::uint64_t seed = 0;
    std::string out;
  } st_;

  int run_generate();
  int run_train();
  int run_forecast();
  int run_evaluate();
  int run_ablate();
  int run_plot();
  int run_selftest();
  void echo_config(const std::string& out_dir, const char* name) const;
};

/// Quick property checks; prints one line per check and returns the failure count.
int selftest(std::uint64_t seed);

}  // namespace tcpdiff::cli
