#include "commands.hpp"

#include <cstdio>
#include <iostream>

#include "tcpdiff/ablation.hpp"
#include "tcpdiff/error.hpp"
#include "tcpdiff/forecast.hpp"
#include "tcpdiff/io.hpp"
#include "tcpdiff/parallel.hpp"
#include "tcpdiff/plot.hpp"
#include "tcpdiff/synth.hpp"
#include "tcpdiff/training.hpp"
#include "tcpdiff/verify.hpp"

namespace tcpdiff::cli {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

Commands::Commands(CLI::App& app) : app_(app) {
  generate_ = app.add_subcommand("generate-data", "Write a synthetic storm-centered dataset");
  generate_->add_option("--seed", gen_.seed, "Generator seed")->capture_default_str();
  generate_->add_option("--count", gen_.count, "Number of samples")->capture_default_str()->check(CLI::PositiveNumber);
  generate_->add_option("--train-count", gen_.train_count, "Training split size (default: 80% of count)");
  generate_->add_option("--grid", gen_.grid, "Grid cells per side (window is 10 degrees)")->capture_default_str();
  generate_->add_option("--synth-config", gen_.synth_config, "JSON file with generator parameters");
  generate_->add_option("--out", gen_.out, "Dataset directory")->required();

  auto model_opts = [](CLI::App* sub, Model& m) {
    sub->add_option("--preset", m.preset, "Architecture preset")
        ->check(CLI::IsMember({"tiny", "default"}))
        ->capture_default_str();
    sub->add_option("--base-channels", m.base_channels, "Override base channel width");
    sub->add_option("--depth", m.depth, "Override U-Net depth");
    sub->add_option("--heads", m.heads, "Override attention heads");
  };

  train_ = app.add_subcommand("train", "Train the denoiser on a dataset");
  train_->add_option("--data", train_opts_.data, "Dataset directory")->required();
  train_->add_option("--out", train_opts_.out, "Run directory")->required();
  train_->add_option("--seed", train_opts_.seed, "Training seed")->capture_default_str();
  train_->add_option("--steps", train_opts_.steps, "Optimizer steps")->capture_default_str()->check(CLI::PositiveNumber);
  train_->add_option("--batch", train_opts_.batch, "Samples per step")->capture_default_str()->check(CLI::PositiveNumber);
  train_->add_option("--lr", train_opts_.lr, "Adam learning rate")->capture_default_str();
  train_->add_flag("--no-arp", train_opts_.no_arp, "Predict absolute rainfall instead of residuals");
  train_->add_flag("--no-multimodal", train_opts_.no_multimodal, "Drop environment channels and scalar encoder");
  train_->add_flag("--no-future", train_opts_.no_future, "Drop the forecast-proxy encoder");
  train_->add_option("--checkpoint-every", train_opts_.checkpoint_every, "Extra checkpoint cadence (0: final only)")
      ->capture_default_str();
  train_->add_option("--diffusion-steps", train_opts_.diffusion_steps, "Diffusion steps N")->capture_default_str();
  train_->add_option("--resume", train_opts_.resume, "Continue from a checkpoint directory of this run");
  model_opts(train_, train_opts_.model);

  forecast_ = app.add_subcommand("forecast", "Sample forecasts for a dataset split");
  forecast_->add_option("--checkpoint", fc_.checkpoint, "Checkpoint directory")->required();
  forecast_->add_option("--data", fc_.data, "Dataset directory")->required();
  forecast_->add_option("--out", fc_.out, "Output directory")->required();
  forecast_->add_option("--split", fc_.split, "Samples to forecast")
      ->check(CLI::IsMember({"test", "train", "all"}))
      ->capture_default_str();
  forecast_->add_option("--members", fc_.members, "Ensemble members")->capture_default_str()->check(CLI::PositiveNumber);
  forecast_->add_option("--limit", fc_.limit, "Forecast at most this many samples (0: all)");
  forecast_->add_option("--seed", fc_.seed, "Base seed")->capture_default_str();

  evaluate_ = app.add_subcommand("evaluate", "Score forecasts against the dataset targets");
  evaluate_->add_option("--data", ev_.data, "Dataset directory")->required();
  evaluate_->add_option("--forecast", ev_.forecast, "Forecast directory written by `forecast`");
  evaluate_->add_option("--checkpoint", ev_.checkpoint, "Checkpoint to forecast with when --forecast is absent");
  evaluate_->add_option("--out", ev_.out, "Report directory")->required();
  evaluate_->add_option("--members", ev_.members, "Members when forecasting here")->capture_default_str();
  evaluate_->add_option("--limit", ev_.limit, "Test samples when forecasting here (0: all)");
  evaluate_->add_option("--seed", ev_.seed, "Base seed when forecasting here")->capture_default_str();
  evaluate_->add_flag("--aggregate-6h", ev_.aggregate_6h, "Sum 3-hourly frames into 6-hourly totals first");
  evaluate_->add_flag("--no-persistence", ev_.no_persistence, "Skip the persistence baseline report");
  evaluate_->add_option("--group-by", ev_.group_by, "Tag key for a stratified breakdown (basin, phase, intensity_class)");

  ablate_ = app.add_subcommand("ablate", "Train and compare baseline, +ARP, +ARP+M, +ARP+M+F");
  ablate_->add_option("--data", ab_.data, "Dataset directory")->required();
  ablate_->add_option("--out", ab_.out, "Output directory")->required();
  ablate_->add_option("--seed", ab_.seed, "Training seed")->capture_default_str();
  ablate_->add_option("--steps", ab_.steps, "Optimizer steps per configuration")->capture_default_str();
  ablate_->add_option("--batch", ab_.batch, "Samples per step")->capture_default_str();
  ablate_->add_option("--lr", ab_.lr, "Adam learning rate")->capture_default_str();
  ablate_->add_option("--eval-samples", ab_.eval_samples, "Test samples forecast per configuration (0: skip)")
      ->capture_default_str();
  ablate_->add_option("--members", ab_.members, "Members per evaluated sample")->capture_default_str();
  model_opts(ablate_, ab_.model);

  plot_ = app.add_subcommand("plot", "Render SVG charts from report or run CSV files");
  plot_->add_option("--input", plot_opts_.input, "Directory holding metrics/histogram/rapsd/loss CSV files")
      ->required();
  plot_->add_option("--out", plot_opts_.out, "Output directory (default: <input>/plots)");

  selftest_ = app.add_subcommand("selftest", "Run quick property checks");
  selftest_->add_option("--seed", st_.seed, "Seed for random cases")->capture_default_str();
  selftest_->add_option("--out", st_.out, "Directory for the effective config echo");
}

void Commands::echo_config(const std::string& out_dir, const char* name) const {
  CLI::App* sub = app_.get_subcommands().front();
  std::string text = "# effective configuration\n[" + sub->get_name() + "]\n" + sub->config_to_str(true, false);
  text += "# TCPDIFF_THREADS=" + std::to_string(worker_threads()) + "\n";
  io::ensure_writable_dir(out_dir);
  io::write_text(std::filesystem::path(out_dir) / (std::string(name) + "_config.toml"), text);
}

int Commands::run() {
  if (generate_->parsed()) return run_generate();
  if (train_->parsed()) return run_train();
  if (forecast_->parsed()) return run_forecast();
  if (evaluate_->parsed()) return run_evaluate();
  if (ablate_->parsed()) return run_ablate();
  if (plot_->parsed()) return run_plot();
  if (selftest_->parsed()) return run_selftest();
  return 2;
}

// ---- subcommands -----------------------------------------------------------------

int Commands::run_generate() {
  data::GridSpec grid{gen_.grid, gen_.grid, 10.0 / static_cast<double>(gen_.grid)};
  grid.validate();
  data::SynthConfig cfg = data::SynthConfig::for_grid(grid);
  if (!gen_.synth_config.empty()) {
    cfg = data::SynthConfig::from_json(io::read_text(gen_.synth_config));
    cfg.grid = grid;
  }
  cfg.seed = gen_.seed;
  const std::size_t train_count =
      gen_.train_count ? gen_.train_count : std::max<std::size_t>(1, gen_.count * 4 / 5);
  if (train_count > gen_.count) throw ConfigError("--train-count exceeds --count");
  echo_config(gen_.out, "generate");
  const auto mf = data::generate_dataset(cfg, gen_.count, gen_.out, train_count, worker_threads());
  std::cout << "wrote " << mf.sample_count << " samples (" << mf.train_count << " train) to " << gen_.out << "\n";
  return 0;
}

namespace {

nn::NetworkConfig resolve_model(const std::string& preset, std::size_t base, std::size_t depth, std::size_t heads,
                                std::size_t grid) {
  nn::NetworkConfig c = preset == "tiny" ? nn::NetworkConfig::tiny(grid) : nn::NetworkConfig{};
  if (preset != "tiny") {
    c.depth = std::min(c.depth, nn::NetworkConfig::max_depth_for(grid));
    c.channel_mult.resize(c.depth, 2);
  }
  if (depth) {
    c.depth = depth;
    c.channel_mult.resize(depth, 2);
    c.channel_mult[0] = 1;
  }
  if (base) c.base_channels = base;
  if (heads) c.heads = heads;
  return c;
}

}  // namespace

int Commands::run_train() {
  train::TrainConfig cfg;
  cfg.dataset = train_opts_.data;
  cfg.out = train_opts_.out;
  cfg.seed = train_opts_.seed;
  cfg.steps = train_opts_.steps;
  cfg.batch = train_opts_.batch;
  cfg.learning_rate = train_opts_.lr;
  cfg.use_arp = !train_opts_.no_arp;
  cfg.use_multimodal = !train_opts_.no_multimodal;
  cfg.use_future = !train_opts_.no_future;
  cfg.checkpoint_every = train_opts_.checkpoint_every;
  cfg.diffusion_steps = train_opts_.diffusion_steps;
  const auto mf = data::read_manifest(cfg.dataset);
  const auto& m = train_opts_.model;
  cfg.network = resolve_model(m.preset, m.base_channels, m.depth, m.heads, mf.grid.height);
  echo_config(train_opts_.out, "train");
  train::TrainOptions opts;
  if (!train_opts_.resume.empty()) opts.resume = train_opts_.resume;
  opts.progress = [&](std::size_t step, double loss) {
    if (step % 100 == 0 || step == cfg.steps) std::cerr << "step " << step << "/" << cfg.steps << " loss " << fmt(loss) << "\n";
  };
  const auto result = train::train(cfg, opts);
  std::cout << "trained " << result.parameter_count << " parameters for " << cfg.steps << " steps; first-100 mean loss "
            << fmt(ablation::window_mean(result.losses, true)) << ", last-100 mean loss "
            << fmt(ablation::window_mean(result.losses, false)) << "\ncheckpoint: " << result.final_checkpoint.string()
            << "\n";
  return 0;
}

namespace {

std::vector<std::size_t> split_indices(const data::DatasetManifest& mf, const std::string& split, std::size_t limit) {
  std::vector<std::size_t> idx;
  if (split == "test") {
    idx = forecast::test_indices(mf);
  } else {
    const std::size_t end = split == "train" ? mf.train_count : mf.sample_count;
    for (std::size_t i = 0; i < end; ++i) idx.push_back(i);
  }
  if (limit && idx.size() > limit) idx.resize(limit);
  if (idx.empty()) throw ConfigError("no samples in the " + split + " split");
  return idx;
}

}  // namespace

int Commands::run_forecast() {
  echo_config(fc_.out, "forecast");
  const auto mf = data::read_manifest(fc_.data);
  const auto model = forecast::Forecaster::load(fc_.checkpoint);
  forecast::RunOptions ro;
  ro.members = fc_.members;
  ro.seed = fc_.seed;
  ro.threads = worker_threads();
  const auto set = forecast::run(model, mf, split_indices(mf, fc_.split, fc_.limit), ro);
  set.write(fc_.out);
  std::cout << "wrote " << set.member_count() << " member files for " << set.sample_indices.size() << " samples to "
            << fc_.out << "\n";
  return 0;
}

int Commands::run_evaluate() {
  echo_config(ev_.out, "evaluate");
  const auto mf = data::read_manifest(ev_.data);
  forecast::ForecastSet set;
  if (!ev_.forecast.empty()) {
    set = forecast::ForecastSet::read(ev_.forecast);
  } else if (!ev_.checkpoint.empty()) {
    const auto model = forecast::Forecaster::load(ev_.checkpoint);
    forecast::RunOptions ro;
    ro.members = ev_.members;
    ro.seed = ev_.seed;
    ro.threads = worker_threads();
    set = forecast::run(model, mf, split_indices(mf, "test", ev_.limit), ro);
    set.write(std::filesystem::path(ev_.out) / "forecast");
  } else {
    throw ConfigError("evaluate needs --forecast or --checkpoint");
  }
  std::vector<Tensor> obs;
  std::vector<std::map<std::string, std::string>> tags;
  for (std::size_t idx : set.sample_indices) {
    if (idx >= mf.sample_count) throw RangeError("forecast refers to sample " + std::to_string(idx));
    obs.push_back(data::load_sample(mf, idx).target_rain);
    tags.push_back(mf.sample_tags.at(idx));
  }
  verify::EvalOptions opts;
  opts.aggregate_6h = ev_.aggregate_6h;
  opts.group_by = ev_.group_by;
  const auto rep = verify::evaluate(set.members, obs, set.lead_hours, opts, tags);
  rep.write(ev_.out);

  auto line = [](const char* name, const verify::Report& r) {
    std::string s = std::string(name) + ": TP_MAE " + fmt(*r.value("TP_MAE", 0.0, "mean"));
    for (double t : verify::kThresholds) {
      const auto v = r.value("ETS", t, "mean");
      s += ", ETS-" + fmt(t) + " " + (v ? fmt(*v) : std::string(verify::kNoEvents));
    }
    return s + "\n";
  };
  std::string summary = line("forecast", rep);
  if (!ev_.no_persistence) {
    const auto pers = forecast::run_persistence(mf, set.sample_indices);
    const auto prep = verify::evaluate(pers.members, obs, pers.lead_hours, opts, tags);
    prep.write(std::filesystem::path(ev_.out) / "persistence");
    summary += line("persistence", prep);
  }
  io::write_text(std::filesystem::path(ev_.out) / "summary.txt", summary);
  std::cout << summary;
  return 0;
}

int Commands::run_ablate() {
  train::TrainConfig cfg;
  cfg.dataset = ab_.data;
  cfg.seed = ab_.seed;
  cfg.steps = ab_.steps;
  cfg.batch = ab_.batch;
  cfg.learning_rate = ab_.lr;
  const auto mf = data::read_manifest(cfg.dataset);
  cfg.network = resolve_model(ab_.model.preset, ab_.model.base_channels, ab_.model.depth, ab_.model.heads,
                              mf.grid.height);
  echo_config(ab_.out, "ablate");
  ablation::Options opts;
  opts.eval_samples = ab_.eval_samples;
  opts.members = ab_.members;
  ablation::run(cfg, ab_.out, opts);
  std::cout << io::read_text(std::filesystem::path(ab_.out) / "ablation.md");
  return 0;
}

int Commands::run_plot() {
  const std::string out = plot_opts_.out.empty() ? plot_opts_.input + "/plots" : plot_opts_.out;
  echo_config(out, "plot");
  for (const auto& p : plot::render_directory(plot_opts_.input, out)) std::cout << p.string() << "\n";
  return 0;
}

int Commands::run_selftest() {
  if (!st_.out.empty()) echo_config(st_.out, "selftest");
  const int failures = selftest(st_.seed);
  return failures == 0 ? 0 : 1;
}

}  // namespace tcpdiff::cli
