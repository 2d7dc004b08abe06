#pragma once

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <string>
#include <vector>

#include "tcpdiff/error.hpp"
#include "tcpdiff/rng.hpp"
#include "tcpdiff/tensor.hpp"

/// DDPM noise schedule, forward noising and ancestral reverse sampling.
///
/// Step indices run 0..N-1; index s here is step s+1 of the usual 1..N numbering.
namespace tcpdiff::diffusion {

struct Schedule {
  std::size_t steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;
  double beta_min = 0.0;
  double beta_max = 0.0;

  static constexpr double kDefaultBetaMin = 1e-4;
  static constexpr double kDefaultBetaMax = 0.99;

  /// beta[s] = clamp(1 - cos(pi s / (N-1)), beta_min, beta_max), sigma = sqrt(beta).
  static Schedule cosine(std::size_t steps, double beta_min = kDefaultBetaMin, double beta_max = kDefaultBetaMax);

  void check_step(std::size_t s) const {
    if (s >= steps) throw RangeError("diffusion step " + std::to_string(s) + " outside [0, " + std::to_string(steps) + ")");
  }
};

template <class T>
struct NoisedTarget {
  BasicTensor<T> data;
  std::size_t step = 0;
  BasicTensor<T> noise_used;
};

/// data = sqrt(alpha_bar[s]) * target + sqrt(1 - alpha_bar[s]) * noise.
template <class T>
NoisedTarget<T> forward_noise_with(const Schedule& sched, const BasicTensor<T>& target, std::size_t s,
                                   BasicTensor<T> noise) {
  sched.check_step(s);
  if (noise.shape != target.shape) throw ShapeError("noise shape does not match target");
  const T a = static_cast<T>(std::sqrt(sched.alpha_bar[s]));
  const T b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar[s]));
  NoisedTarget<T> out;
  out.step = s;
  out.data = BasicTensor<T>(target.shape);
  for (std::size_t i = 0; i < target.size(); ++i) out.data[i] = a * target[i] + b * noise[i];
  out.noise_used = std::move(noise);
  return out;
}

template <class T>
BasicTensor<T> standard_normal(const Shape& shape, Rng& rng) {
  BasicTensor<T> out(shape);
  for (auto& v : out.data) v = static_cast<T>(rng.normal());
  return out;
}

template <class T>
NoisedTarget<T> forward_noise(const Schedule& sched, const BasicTensor<T>& target, std::size_t s, Rng& rng) {
  sched.check_step(s);
  if (!target.all_finite()) throw NumericalError("non-finite diffusion target");
  return forward_noise_with(sched, target, s, standard_normal<T>(target.shape, rng));
}

/// One reverse step with an explicit epsilon (pass an empty tensor for epsilon = 0):
/// (1/sqrt(alpha_s)) (x_s - beta_s / sqrt(1 - alpha_bar_s) * r_hat) + sigma_s * eps.
template <class T>
BasicTensor<T> reverse_step_with(const Schedule& sched, const BasicTensor<T>& x, std::size_t s,
                                 const BasicTensor<T>& predicted_noise, const BasicTensor<T>& eps) {
  sched.check_step(s);
  if (predicted_noise.shape != x.shape)
    throw ShapeError("denoiser returned " + shape_str(predicted_noise.shape) + " for state " + shape_str(x.shape));
  if (!predicted_noise.all_finite())
    throw NumericalError("denoiser produced non-finite noise prediction at step " + std::to_string(s));
  if (!eps.data.empty() && eps.shape != x.shape) throw ShapeError("epsilon shape does not match state");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[s]);
  const double coef = sched.beta[s] / std::sqrt(1.0 - sched.alpha_bar[s]);
  const double sigma = sched.sigma[s];
  BasicTensor<T> out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = inv_sqrt_alpha * (static_cast<double>(x[i]) - coef * static_cast<double>(predicted_noise[i]));
    if (!eps.data.empty()) v += sigma * static_cast<double>(eps[i]);
    out[i] = static_cast<T>(v);
  }
  return out;
}

/// Epsilon is standard normal for s > 0 and zero at the final step s == 0.
template <class T>
BasicTensor<T> reverse_step(const Schedule& sched, const BasicTensor<T>& x, std::size_t s,
                            const BasicTensor<T>& predicted_noise, Rng& rng) {
  sched.check_step(s);
  const BasicTensor<T> eps = s > 0 ? standard_normal<T>(x.shape, rng) : BasicTensor<T>{};
  return reverse_step_with(sched, x, s, predicted_noise, eps);
}

/// Closed-form inversion of the forward process given the noise:
/// (x_s - sqrt(1 - alpha_bar_s) r) / sqrt(alpha_bar_s).
template <class T>
BasicTensor<T> predict_start(const Schedule& sched, const BasicTensor<T>& x, std::size_t s,
                             const BasicTensor<T>& noise) {
  sched.check_step(s);
  const double a = std::sqrt(sched.alpha_bar[s]), b = std::sqrt(1.0 - sched.alpha_bar[s]);
  BasicTensor<T> out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = static_cast<T>((static_cast<double>(x[i]) - b * static_cast<double>(noise[i])) / a);
  return out;
}

/// Rewrites a noise prediction so the start estimate it implies,
/// (x - sqrt(1 - alpha_bar_s) r) / sqrt(alpha_bar_s), lies within [-bound, bound].
/// Cells whose estimate is already inside are left untouched. bound <= 0 disables it.
template <class T>
BasicTensor<T> clip_noise(const Schedule& sched, const BasicTensor<T>& x, std::size_t s,
                          BasicTensor<T> predicted_noise, double bound) {
  sched.check_step(s);
  if (bound <= 0.0) return predicted_noise;
  if (predicted_noise.shape != x.shape) throw ShapeError("noise prediction does not match state");
  const double a = std::sqrt(sched.alpha_bar[s]), b = std::sqrt(1.0 - sched.alpha_bar[s]);
  if (b == 0.0) return predicted_noise;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = static_cast<double>(x[i]);
    const double start = (xi - b * static_cast<double>(predicted_noise[i])) / a;
    if (std::isfinite(start) && std::abs(start) <= bound) continue;
    const double clipped = std::isnan(start) ? 0.0 : std::clamp(start, -bound, bound);
    predicted_noise[i] = static_cast<T>((xi - a * clipped) / b);
  }
  return predicted_noise;
}

template <class T>
using Denoiser = std::function<BasicTensor<T>(const BasicTensor<T>& noised, std::size_t step)>;

/// Ancestral sampling: x_N ~ N(0, I), then N reverse steps from s = N-1 down to 0.
/// The denoiser closes over its conditioning inputs and is called exactly N times.
/// Denoiser failures are rethrown nested inside an Error carrying the step index.
template <class T>
BasicTensor<T> sample(const Schedule& sched, const Denoiser<T>& denoiser, const Shape& shape, Rng& rng) {
  BasicTensor<T> x = standard_normal<T>(shape, rng);
  for (std::size_t k = sched.steps; k-- > 0;) {
    BasicTensor<T> predicted;
    try {
      predicted = denoiser(x, k);
      x = reverse_step(sched, x, k, predicted, rng);
    } catch (const std::exception& e) {
      std::throw_with_nested(Error("reverse diffusion failed at step " + std::to_string(k) + ": " + e.what()));
    }
  }
  return x;
}

}  // namespace tcpdiff::diffusion
