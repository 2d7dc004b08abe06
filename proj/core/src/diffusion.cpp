#include "tcpdiff/diffusion.hpp"

#include <algorithm>
#include <numbers>

namespace tcpdiff::diffusion {

Schedule Schedule::cosine(std::size_t steps, double beta_min, double beta_max) {
  if (steps < 2) throw ConfigError("cosine schedule needs at least 2 steps");
  if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0))
    throw ConfigError("cosine schedule bounds must satisfy 0 < beta_min < beta_max < 1");
  Schedule s;
  s.steps = steps;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  double running = 1.0;
  for (std::size_t i = 0; i < steps; ++i) {
    const double raw = 1.0 - std::cos(std::numbers::pi * static_cast<double>(i) / static_cast<double>(steps - 1));
    const double b = std::clamp(raw, beta_min, beta_max);
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    running *= 1.0 - b;
    s.alpha_bar.push_back(running);
    s.sigma.push_back(std::sqrt(b));
  }
  return s;
}

}  // namespace tcpdiff::diffusion
