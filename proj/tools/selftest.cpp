#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "commands.hpp"
#include "tcpdiff/arp.hpp"
#include "tcpdiff/diffusion.hpp"
#include "tcpdiff/network.hpp"
#include "tcpdiff/rng.hpp"
#include "tcpdiff/training.hpp"
#include "tcpdiff/verify.hpp"

namespace tcpdiff::cli {

namespace {

bool arp_round_trip(Rng& rng) {
  for (int trial = 0; trial < 20; ++trial) {
    BasicTensor<double> seq({5, 6, 6});
    for (auto& v : seq.data) v = std::round(400.0 * rng.uniform()) / 8.0;
    auto res = arp::to_residuals(seq, arp::Space::Raw);
    std::copy_n(seq.data.begin(), 36, res.anchor.data.begin());  // accumulate from the first frame
    const auto back = arp::accumulate(res).rain;
    for (std::size_t i = 0; i < back.size(); ++i)
      if (back[i] != seq[36 + i]) return false;
  }
  return true;
}

bool schedule_monotone(Rng&) {
  const auto s = diffusion::Schedule::cosine(200);
  for (std::size_t i = 1; i < s.steps; ++i)
    if (!(s.alpha_bar[i] < s.alpha_bar[i - 1])) return false;
  for (std::size_t i = 0; i < s.steps; ++i)
    if (s.beta[i] < s.beta_min || s.beta[i] > s.beta_max || std::abs(s.sigma[i] - std::sqrt(s.beta[i])) > 1e-15)
      return false;
  return true;
}

bool ets_matches_counts(Rng& rng) {
  for (int trial = 0; trial < 100; ++trial) {
    Tensor p({8, 8}), o({8, 8});
    for (auto& v : p.data) v = rng.uniform() < 0.3 ? 10.0f : 0.0f;
    for (auto& v : o.data) v = rng.uniform() < 0.3 ? 10.0f : 0.0f;
    double a = 0, b = 0, c = 0, d = 0;
    for (std::size_t i = 0; i < 64; ++i) {
      const bool x = p[i] >= 6, y = o[i] >= 6;
      (x && y ? a : x ? b : y ? c : d) += 1;
    }
    const double r = (a + b) * (a + c) / 64.0;
    const auto e = verify::ets(verify::contingency(p, o, 6.0));
    if (a + b + c - r == 0.0) {
      if (e.defined()) return false;
    } else if (!e.defined() || *e.value != (a - r) / (a + b + c - r)) {
      return false;
    }
  }
  return true;
}

bool parseval(Rng& rng) {
  const std::size_t h = 16;
  std::vector<double> f(h * h);
  double energy = 0.0;
  for (auto& v : f) {
    v = rng.normal();
    energy += v * v;
  }
  double total = 0.0;
  for (double p : verify::power_spectrum(f, h, h)) total += p;
  return std::abs(total - static_cast<double>(h * h) * energy) <= 1e-9 * total;
}

bool zero_denoiser_loss(Rng& rng) {
  const auto sched = diffusion::Schedule::cosine(200);
  const BasicTensor<double> target({4, 50, 50}, 0.3);
  const diffusion::Denoiser<double> zero = [](const BasicTensor<double>& x, std::size_t) {
    return BasicTensor<double>(x.shape);
  };
  const double l = train::denoiser_loss(zero, target, sched, rng);
  return std::abs(l - 1.0) < 0.05;
}

bool network_finite(Rng& rng) {
  const auto cfg = nn::NetworkConfig::smallest();
  nn::Network<float> net(cfg, {rng.next_u64(), false});
  nn::ModelInputs<float> in;
  auto fill = [&](Shape s) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<float>(rng.normal());
    return t;
  };
  const std::size_t g = cfg.grid;
  in.rain = fill({cfg.n, g, g});
  in.deltas = fill({cfg.n, g, g});
  in.sfc = fill({cfg.n, 4, g, g});
  in.pl = fill({cfg.n, 5, 4, g, g});
  in.scalars = fill({cfg.n, cfg.scalar_channels});
  in.future = fill({cfg.m, cfg.future_channels, g, g});
  return net.predict_noise(in, fill({cfg.m, g, g}), 3).all_finite();
}

}  // namespace

int selftest(std::uint64_t seed) {
  const std::vector<std::pair<const char*, std::function<bool(Rng&)>>> checks{
      {"arp round trip (float64, exact)", arp_round_trip},
      {"cosine schedule monotone and clamped", schedule_monotone},
      {"ETS matches hand-counted confusion cells", ets_matches_counts},
      {"power spectrum satisfies Parseval", parseval},
      {"zero denoiser loss near 1", zero_denoiser_loss},
      {"smallest network output finite", network_finite},
  };
  int failures = 0;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    Rng rng(mix_seed(seed, i));
    bool ok = false;
    std::string why;
    try {
      ok = checks[i].second(rng);
    } catch (const std::exception& e) {
      why = std::string(" (") + e.what() + ")";
    }
    std::printf("%s  %s%s\n", ok ? "PASS" : "FAIL", checks[i].first, why.c_str());
    failures += ok ? 0 : 1;
  }
  return failures;
}

}  // namespace tcpdiff::cli
