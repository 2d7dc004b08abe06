// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tcpdiff/ablation.hpp"
#include "tcpdiff/arp.hpp"
#include "tcpdiff/diffusion.hpp"
#include "tcpdiff/forecast.hpp"
#include "tcpdiff/io.hpp"
#include "tcpdiff/network.hpp"
#include "tcpdiff/parallel.hpp"
#include "tcpdiff/plot.hpp"
#include "tcpdiff/synth.hpp"
#include "tcpdiff/training.hpp"
#include "tcpdiff/verify.hpp"
#include "test_util.hpp"

using namespace tcpdiff;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double budget_s;  // stated runtime limit; 0 when none is given
  std::function<Outcome(const fs::path&)> run;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- ARP round trip ------------------------------------------------------------------

template <class T>
BasicTensor<T> first_frame(const BasicTensor<T>& seq) {
  const std::size_t plane = seq.dim(1) * seq.dim(2);
  return BasicTensor<T>({seq.dim(1), seq.dim(2)}, AlignedVector<T>(seq.data.begin(), seq.data.begin() + plane));
}

Outcome arp_round_trip(const fs::path&) {
  Rng rng(101);
  double worst32 = 0.0;
  bool exact64 = true;
  std::size_t clamped = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t t = 2 + rng.uniform_index(6), h = 1 + rng.uniform_index(12), w = 1 + rng.uniform_index(12);
    const auto seq = tcpdiff::testing::random_uniform<float>({t, h, w}, rng, 0.0, 10.0);
    const std::size_t plane = h * w;
    // to_residuals anchors on the latest frame; the round trip accumulates from the first.
    auto res = arp::to_residuals(seq, arp::Space::Raw);
    res.anchor = first_frame(seq);
    const auto back = arp::accumulate(res);
    clamped += back.clamped;
    for (std::size_t i = 0; i < back.rain.size(); ++i)
      worst32 = std::max(worst32, std::abs(double(back.rain[i]) - double(seq[plane + i])));
    // Dyadic values keep float64 arithmetic exact.
    BasicTensor<double> sd(seq.shape);
    for (std::size_t i = 0; i < seq.size(); ++i) sd[i] = std::round(double(seq[i]) * 1024.0) / 1024.0;
    auto rd = arp::to_residuals(sd, arp::Space::Raw);
    rd.anchor = first_frame(sd);
    const auto bd = arp::accumulate(rd);
    for (std::size_t i = 0; i < bd.rain.size(); ++i) exact64 = exact64 && bd.rain[i] == sd[plane + i];
  }
  return {worst32 <= 1e-5 && exact64 && clamped == 0, "100 sequences, max float32 error " + fmt("%.3g", worst32) +
                                                          ", float64 exact " + (exact64 ? "yes" : "no") +
                                                          ", clamped cells " + std::to_string(clamped)};
}

// ---- schedule algebra ----------------------------------------------------------------

Outcome schedule_algebra(const fs::path&) {
  const auto s = diffusion::Schedule::cosine(200);
  bool ok = s.steps == 200;
  double worst = 0.0, prod = 1.0;
  for (std::size_t k = 0; k < 200; ++k) {
    ok = ok && s.beta[k] >= s.beta_min && s.beta[k] <= s.beta_max && s.beta[k] > 0.0 && s.beta[k] < 1.0;
    ok = ok && s.sigma[k] == std::sqrt(s.beta[k]);
    if (k > 0) ok = ok && s.alpha_bar[k] < s.alpha_bar[k - 1];
    prod *= 1.0 - s.beta[k];
    worst = std::max(worst, std::abs(s.alpha_bar[k] - prod) / prod);
  }
  return {ok && worst <= 1e-12, "max relative product error " + fmt("%.3g", worst) + ", beta in [" +
                                    fmt("%g", s.beta_min) + ", " + fmt("%g", s.beta_max) + "]"};
}

// ---- forward-noise statistics --------------------------------------------------------

Outcome forward_noise_stats(const fs::path&) {
  const auto s = diffusion::Schedule::cosine(200);
  Rng rng(303);
  const std::size_t count = 10000;
  const double d0 = 1.5;
  bool ok = true;
  std::string detail;
  for (std::size_t k : {10u, 25u, 35u}) {
    const double ab = s.alpha_bar[k];
    const auto out = diffusion::forward_noise(s, BasicTensor<double>({count}, d0), k, rng);
    const double mean = std::accumulate(out.data.data.begin(), out.data.data.end(), 0.0) / count;
    double var = 0.0;
    for (double v : out.data.data) var += (v - mean) * (v - mean);
    var /= count - 1;
    const double em = std::abs(mean - std::sqrt(ab) * d0) / (std::sqrt(ab) * d0);
    const double ev = std::abs(var - (1.0 - ab)) / (1.0 - ab);
    ok = ok && em <= 0.05 && ev <= 0.05;
    if (!detail.empty()) detail += "; ";
    detail += "s=" + std::to_string(k) + " mean err " + fmt("%.2f%%", 100 * em) + " var err " + fmt("%.2f%%", 100 * ev);
  }
  return {ok, detail};
}

// ---- oracle sampler inversion --------------------------------------------------------

double rel_inf(const BasicTensor<double>& got, const BasicTensor<double>& want) {
  double err = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    err = std::max(err, std::abs(got[i] - want[i]));
    norm = std::max(norm, std::abs(want[i]));
  }
  return err / norm;
}

Outcome oracle_inversion(const fs::path&) {
  const auto s = diffusion::Schedule::cosine(200);
  Rng rng(404);
  double worst = 0.0;
  for (std::size_t k : {0u, 1u, 10u, 25u, 40u, 60u}) {
    const auto d0 = tcpdiff::testing::random_normal<double>({4, 16, 16}, rng);
    const auto noised = diffusion::forward_noise(s, d0, k, rng);
    const auto rec = diffusion::predict_start(s, noised.data, k, noised.noise_used);
    worst = std::max(worst, rel_inf(rec, d0));
  }
  // One reverse step from s = 0 with eps = 0 is the same inversion.
  const auto d0 = tcpdiff::testing::random_normal<double>({4, 16, 16}, rng);
  const auto noised = diffusion::forward_noise(s, d0, 0, rng);
  const auto step = diffusion::reverse_step(s, noised.data, 0, noised.noise_used, rng);
  worst = std::max(worst, rel_inf(step, d0));
  return {worst <= 1e-6, "max relative error " + fmt("%.3g", worst)};
}

// ---- metric oracles ------------------------------------------------------------------

Outcome metric_oracles(const fs::path&) {
  Rng rng(505);
  std::size_t mismatches = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t h = 2 + rng.uniform_index(15);
    Tensor p({h, h}), o({h, h});
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = rng.uniform() < 0.4 ? 30.0f : 0.0f;
      o[i] = rng.uniform() < 0.4 ? 30.0f : 0.0f;
    }
    double a = 0, b = 0, c = 0, d = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const bool pp = p[i] >= 24.0f, oo = o[i] >= 24.0f;
      a += pp && oo, b += pp && !oo, c += !pp && oo, d += !pp && !oo;
    }
    const double r = (a + b) * (a + c) / (a + b + c + d);
    const auto got = verify::ets(verify::contingency(p, o, 24.0)).value;
    const bool want_defined = a + b + c - r != 0.0;
    if (got.has_value() != want_defined || (want_defined && std::abs(*got - (a - r) / (a + b + c - r)) > 1e-12))
      ++mismatches;
  }
  Tensor mixed({8, 8});
  for (std::size_t i = 0; i < 64; ++i) mixed[i] = i % 3 == 0 ? 70.0f : 1.0f;
  bool perfect = true;
  for (double t : verify::kThresholds) perfect = perfect && verify::ets(verify::contingency(mixed, mixed, t)).value == 1.0;

  const auto base = tcpdiff::testing::random_uniform<double>({4, 20, 20}, rng, 0.0, 50.0);
  auto shifted = base;
  for (auto& v : shifted.data) v += 0.5;
  const double offset_err = std::abs(verify::tp_mae(shifted, base) - 0.5);

  const std::size_t n = 40;
  std::vector<double> f(n * n);
  for (auto& v : f) v = rng.normal();
  const auto power = verify::power_spectrum(f, n, n);
  double total = 0.0, energy = 0.0;
  for (double v : power) total += v;
  for (double v : f) energy += v * v;
  const double parseval = std::abs(total - double(n * n) * energy) / total;

  std::vector<double> mean(n / 2, 0.0);
  for (int r = 0; r < 64; ++r) {
    const auto c = verify::rapsd(tcpdiff::testing::random_normal<double>({n, n}, rng));
    for (std::size_t b = 0; b < mean.size(); ++b) mean[b] += c.power[b] / 64.0;
  }
  const double avg = std::accumulate(mean.begin(), mean.end(), 0.0) / double(mean.size());
  double spread = 0.0;
  for (double v : mean) spread = std::max(spread, std::abs(v - avg) / avg);

  const bool ok = mismatches == 0 && perfect && offset_err <= 1e-9 && parseval <= 1e-6 && spread <= 0.10;
  return {ok, "ETS mismatches " + std::to_string(mismatches) + "/1000, perfect ETS=1 " + (perfect ? "yes" : "no") +
                  ", offset error " + fmt("%.2g", offset_err) + ", Parseval " + fmt("%.2g", parseval) +
                  ", white-noise spread " + fmt("%.1f%%", 100 * spread)};
}

// ---- gradient check ------------------------------------------------------------------

Outcome gradient_check(const fs::path&) {
  const auto cfg = nn::NetworkConfig::smallest();
  auto sc = data::SynthConfig::for_grid({cfg.grid, cfg.grid, 10.0 / double(cfg.grid)});
  sc.n = cfg.n;
  sc.m = cfg.m;
  sc.seed = 606;
  const auto r0 = data::synthesize_sample(sc, 0), r1 = data::synthesize_sample(sc, 1);
  const auto stats = data::compute_stats({r0, r1});
  const auto sample = train::prepare<double>(data::normalize(r0, stats), cfg);
  nn::Network<double> net(cfg, {606, false});
  const auto sched = diffusion::Schedule::cosine(50);
  Rng rng(607);
  const auto noise = diffusion::standard_normal<double>(sample.target.shape, rng);
  const std::size_t s = 9;
  const auto base = train::loss_with(net, sample, sched, s, noise, true);
  // Relative error of the 64-component gradient vector. The worst single component is
  // reported too; on near-zero components it is dominated by O(h^2) truncation.
  double diff2 = 0.0, g2 = 0.0, fd2 = 0.0, worst = 0.0;
  std::size_t checked = 0;
  const double h = 1e-3;
  for (int i = 0; i < 64; ++i) {
    const std::size_t p = rng.uniform_index(net.params().values.size());
    const std::size_t e = rng.uniform_index(net.params().values[p].size());
    double& x = net.params().values[p][e];
    const double orig = x;
    x = orig + h;
    const double up = train::loss_with(net, sample, sched, s, noise, false).loss;
    x = orig - h;
    const double down = train::loss_with(net, sample, sched, s, noise, false).loss;
    x = orig;
    const double fd = (up - down) / (2 * h), g = base.grads[p][e];
    diff2 += (g - fd) * (g - fd);
    g2 += g * g;
    fd2 += fd * fd;
    const double scale = std::max(std::abs(fd), std::abs(g));
    if (scale >= 1e-10) worst = std::max(worst, std::abs(g - fd) / scale);
    ++checked;
  }
  const double denom = std::sqrt(std::max(g2, fd2));
  const double rel = denom < 1e-10 ? std::sqrt(diff2) : std::sqrt(diff2) / denom;
  return {denom >= 1e-10 && rel < 1e-3,
          std::to_string(checked) + " parameters, relative error " + fmt("%.3g", rel) + ", worst component " +
              fmt("%.3g", worst) + " (" + std::to_string(net.parameter_count()) + " parameters in total)"};
}

// ---- zero-residual stub --------------------------------------------------------------

Outcome stub_persistence(const fs::path&) {
  auto sc = data::SynthConfig::for_grid(data::GridSpec::desk());
  sc.seed = 707;
  std::vector<data::SampleRecord> recs;
  for (std::size_t i = 0; i < 6; ++i) recs.push_back(data::synthesize_sample(sc, i));
  const auto stats = data::compute_stats(recs);
  const auto c = nn::NetworkConfig::tiny(40);
  forecast::Forecaster model(nn::Checkpoint{c, nn::Network<float>(c).params(), "{}"}, stats,
                             diffusion::Schedule::cosine(200));
  model.set_sampler([](const nn::ModelInputs<float>&, const Shape& shape, Rng&) { return Tensor(shape); });
  std::size_t mismatched = 0;
  double mm_err = 0.0;
  for (const auto& r : recs) {
    const auto pers = forecast::persistence_forecast(r);
    const auto expected = data::normalize_rain(pers, stats);
    const auto got = model.forecast_normalized(r, 1);
    for (std::size_t i = 0; i < got.size(); ++i) mismatched += got[i] != expected[i];
    const auto mm = model.forecast(r, 1);
    for (std::size_t i = 0; i < mm.size(); ++i) mm_err = std::max(mm_err, double(std::abs(mm[i] - pers[i])));
  }
  return {mismatched == 0, "normalized mismatches " + std::to_string(mismatched) + " over 6 samples; max mm/3hr gap after denormalization " + fmt("%.2g", mm_err)};
}

// ---- learnability --------------------------------------------------------------------

Tensor ensemble_mean(const std::vector<std::vector<Tensor>>& members, std::size_t k) {
  Tensor out = members[0][k];
  for (std::size_t i = 1; i < members.size(); ++i)
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += members[i][k][j];
  for (float& v : out.data) v /= static_cast<float>(members.size());
  return out;
}

Outcome learnability(const fs::path& work) {
  const fs::path data_dir = work / "learn_data", run_dir = work / "learn_run";
  fs::remove_all(data_dir);
  fs::remove_all(run_dir);
  auto sc = data::SynthConfig::for_grid(data::GridSpec::desk());
  sc.seed = 7;
  data::generate_dataset(sc, 80, data_dir, 64);

  train::TrainConfig cfg;
  cfg.dataset = data_dir;
  cfg.out = run_dir;
  cfg.steps = 2000;
  cfg.seed = 7;
  cfg.network = nn::NetworkConfig::tiny(40);
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = train::train(cfg);
  const double train_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double head = ablation::window_mean(res.losses, true), tail = ablation::window_mean(res.losses, false);
  const double ratio = tail / head;

  const auto mf = data::read_manifest(data_dir);
  const auto idx = forecast::test_indices(mf);
  const auto model = forecast::Forecaster::load(res.final_checkpoint);
  forecast::RunOptions ro;
  ro.members = 4;
  ro.seed = 7;
  ro.threads = worker_threads();
  const auto set = forecast::run(model, mf, idx, ro);
  set.write(run_dir / "forecast");
  double model_sum = 0.0, pers_sum = 0.0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto rec = data::load_sample(mf, idx[k]);
    model_sum += verify::tp_mae(ensemble_mean(set.members, k), rec.target_rain);
    pers_sum += verify::tp_mae(forecast::persistence_forecast(rec), rec.target_rain);
  }
  const double model_mae = model_sum / double(idx.size()), pers_mae = pers_sum / double(idx.size());
  const bool a = ratio < 0.1, b = model_mae < pers_mae;
  return {a && b, std::string("(a) ") + (a ? "ok" : "FAILED") + " loss ratio " + fmt("%.4f", ratio) + " (first-100 " +
                      fmt("%.4f", head) + ", last-100 " + fmt("%.5f", tail) + "); (b) " + (b ? "ok" : "FAILED") +
                      " ensemble-mean TP_MAE " + fmt("%.4f", model_mae) + " vs persistence " + fmt("%.4f", pers_mae) +
                      " on " + std::to_string(idx.size()) + " test samples; training " + fmt("%.0f s", train_s)};
}

// ---- CLI helpers ---------------------------------------------------------------------

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("TCPDIFF_THREADS=1 '") + TCPDIFF_CLI_PATH + "' " + args + " >> '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// ---- ablation smoke ------------------------------------------------------------------

Outcome ablation_smoke(const fs::path& work) {
  const fs::path data_dir = work / "ablate_data", out = work / "ablate_out", log = work / "ablate.log";
  fs::remove_all(data_dir);
  fs::remove_all(out);
  fs::remove(log);
  if (cli("generate-data --seed 7 --count 20 --train-count 16 --grid 40 --out " + q(data_dir), log) != 0)
    return {false, "generate-data failed, see " + log.string()};
  if (cli("ablate --data " + q(data_dir) + " --out " + q(out) + " --steps 200 --eval-samples 0 --seed 7", log) != 0)
    return {false, "ablate failed, see " + log.string()};
  const auto rows = plot::read_csv(out / "ablation.csv");
  if (rows.size() != 5) return {false, "ablation.csv has " + std::to_string(rows.size() - 1) + " rows"};
  std::map<std::string, std::vector<std::string>> by;
  for (std::size_t i = 1; i < rows.size(); ++i) by[rows[i][0]] = rows[i];
  for (const char* n : {"baseline", "arp", "arp_m", "arp_m_f"})
    if (!by.count(n)) return {false, std::string("missing row ") + n};
  auto params = [&](const char* n) { return std::stoull(by[n][4]); };
  bool finite = true;
  for (auto& [n, r] : by) finite = finite && std::isfinite(std::stod(r[5])) && std::isfinite(std::stod(r[6]));
  const bool f_order = params("arp_m_f") > params("arp_m");
  const bool m_order = params("arp_m") > params("arp");
  std::string detail = "parameters baseline " + by["baseline"][4] + ", arp " + by["arp"][4] + ", arp_m " +
                       by["arp_m"][4] + ", arp_m_f " + by["arp_m_f"][4] + "; final losses";
  for (const char* n : {"baseline", "arp", "arp_m", "arp_m_f"}) detail += " " + by[n][6];
  return {finite && f_order && m_order, detail};
}

// ---- determinism ---------------------------------------------------------------------

Outcome determinism(const fs::path& work) {
  const fs::path root = work / "determinism", log = work / "determinism.log";
  fs::remove(log);
  const fs::path data = root / "data", run = root / "run", fc = root / "forecast", ev = root / "eval";
  struct Stage {
    std::string name;
    fs::path dir;
    std::string args;
  };
  const std::vector<Stage> stages{
      {"generate-data", data, "generate-data --seed 3 --count 6 --grid 16 --out " + q(data)},
      {"train", run, "train --data " + q(data) + " --out " + q(run) + " --steps 20 --diffusion-steps 20 --seed 3 --checkpoint-every 10"},
      {"forecast", fc, "forecast --checkpoint " + q(run / "checkpoint") + " --data " + q(data) + " --out " + q(fc) + " --members 3 --seed 3"},
      {"evaluate", ev, "evaluate --data " + q(data) + " --forecast " + q(fc) + " --out " + q(ev) + " --group-by basin"},
      {"plot", ev / "plots", "plot --input " + q(ev)},
      {"ablate", root / "ablate", "ablate --data " + q(data) + " --out " + q(root / "ablate") + " --steps 3 --eval-samples 1 --seed 3"},
  };
  fs::remove_all(root);
  std::string detail;
  bool ok = true;
  for (const auto& st : stages) {
    if (cli(st.args, log) != 0) return {false, st.name + " failed, see " + log.string()};
    const auto first = tcpdiff::testing::tree_bytes(st.dir);
    fs::remove_all(st.dir);
    if (cli(st.args, log) != 0) return {false, st.name + " rerun failed, see " + log.string()};
    const auto second = tcpdiff::testing::tree_bytes(st.dir);
    const bool same = first == second && !first.empty();
    ok = ok && same;
    if (!detail.empty()) detail += "; ";
    detail += st.name + (same ? " identical (" + std::to_string(first.size()) + " files)" : " DIFFERS");
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "tcpdiff_acceptance";
  std::string only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      only = argv[++i];
    } else {
      std::cerr << "usage: tcpdiff_acceptance [--workdir DIR] [--only NAME]\n";
      return 2;
    }
  }
  fs::create_directories(work);

  const std::vector<Criterion> criteria{
      {"arp-round-trip", 1, arp_round_trip},
      {"schedule-algebra", 1, schedule_algebra},
      {"forward-noise-statistics", 10, forward_noise_stats},
      {"oracle-sampler-inversion", 5, oracle_inversion},
      {"metric-oracles", 30, metric_oracles},
      {"gradient-check", 120, gradient_check},
      {"zero-residual-stub", 0, stub_persistence},
      {"learnability", 1200, learnability},
      {"ablation-smoke", 900, ablation_smoke},
      {"determinism", 0, determinism},
  };
  int failures = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && c.name != only) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(work);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.budget_s == 0 || secs < c.budget_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::string timing = fmt("%.1f s", secs);
    if (c.budget_s > 0) timing += " (limit " + fmt("%.0f s", c.budget_s) + (in_time ? ")" : ", EXCEEDED)");
    std::cout << (pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << " [" << timing << "]" << std::endl;
  }
  if (ran == 0) {
    std::cerr << "no criterion named " << only << "\n";
    return 2;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
