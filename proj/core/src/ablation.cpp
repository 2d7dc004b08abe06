#include "tcpdiff/ablation.hpp"

#include <cstdio>

#include "tcpdiff/error.hpp"
#include "tcpdiff/forecast.hpp"
#include "tcpdiff/io.hpp"
#include "tcpdiff/parallel.hpp"
#include "tcpdiff/verify.hpp"

namespace tcpdiff::ablation {

std::vector<Row> rows_template() {
  auto row = [](const char* name, bool a, bool m, bool f) {
    Row r;
    r.name = name;
    r.arp = a;
    r.multimodal = m;
    r.future = f;
    return r;
  };
  return {row("baseline", false, false, false), row("arp", true, false, false), row("arp_m", true, true, false),
          row("arp_m_f", true, true, true)};
}

double window_mean(const std::vector<double>& v, bool head, std::size_t window) {
  if (v.empty()) return 0.0;
  const std::size_t w = std::min(window, v.size());
  double s = 0.0;
  for (std::size_t i = 0; i < w; ++i) s += head ? v[i] : v[v.size() - 1 - i];
  return s / static_cast<double>(w);
}

namespace {

std::string opt(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", *v);
  return buf;
}

}  // namespace

std::vector<Row> run(const train::TrainConfig& base, const fs::path& out, const Options& options) {
  io::ensure_writable_dir(out);
  auto rows = rows_template();
  for (auto& row : rows) {
    train::TrainConfig cfg = base;
    cfg.use_arp = row.arp;
    cfg.use_multimodal = row.multimodal;
    cfg.use_future = row.future;
    cfg.out = out / row.name;
    const auto result = train::train(cfg);
    row.parameters = result.parameter_count;
    row.initial_loss = window_mean(result.losses, true);
    row.final_loss = window_mean(result.losses, false);
    if (options.eval_samples > 0) {
      const auto mf = data::read_manifest(cfg.dataset);
      auto indices = forecast::test_indices(mf);
      if (indices.size() > options.eval_samples) indices.resize(options.eval_samples);
      const auto model = forecast::Forecaster::load(result.final_checkpoint);
      forecast::RunOptions ro;
      ro.members = options.members;
      ro.seed = cfg.seed;
      ro.threads = worker_threads();
      const auto set = forecast::run(model, mf, indices, ro);
      std::vector<Tensor> obs;
      for (std::size_t idx : indices) obs.push_back(data::load_sample(mf, idx).target_rain);
      const auto rep = verify::evaluate(set.members, obs, set.lead_hours);
      row.tp_mae = rep.value("TP_MAE", 0.0, "mean");
      row.ets24 = rep.value("ETS", 24.0, "mean");
    }
  }
  std::string csv = "config,arp,m,f,parameters,initial_loss,final_loss,tp_mae,ets24\n";
  std::string md = "| config | ARP | M | F | parameters | initial loss | final loss | TP_MAE | ETS-24 |\n"
                   "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%zu,%.6g,%.6g,%s,%s\n", r.name.c_str(), r.arp, r.multimodal, r.future,
                  r.parameters, r.initial_loss, r.final_loss, opt(r.tp_mae).c_str(), opt(r.ets24).c_str());
    csv += buf;
    std::snprintf(buf, sizeof buf, "| %s | %s | %s | %s | %zu | %.4g | %.4g | %s | %s |\n", r.name.c_str(),
                  r.arp ? "x" : "", r.multimodal ? "x" : "", r.future ? "x" : "", r.parameters, r.initial_loss,
                  r.final_loss, opt(r.tp_mae).c_str(), opt(r.ets24).c_str());
    md += buf;
  }
  io::write_text(out / "ablation.csv", csv);
  io::write_text(out / "ablation.md", md);
  return rows;
}

}  // namespace tcpdiff::ablation
