#pragma once

#include <functional>
#include <string>

#include "fose/diffusion/schedule.hpp"

namespace fose::diffusion {

enum class InitNoise { kZero, kRandom };

inline InitNoise parse_init_noise(const std::string& s) {
  if (s == "zero") return InitNoise::kZero;
  if (s == "random") return InitNoise::kRandom;
  throw ScheduleError("init_noise must be 'zero' or 'random', got '" + s + "'");
}

struct SamplerConfig {
  int num_steps = 50;
  InitNoise init_noise = InitNoise::kRandom;
  double eta = 0.0;  // 0 = deterministic implicit update; 1 = ancestral variance
};

/// Batched x0 predictor: (x_t, t) -> x0_hat.
using X0Fn = std::function<Tensor(const Tensor&, int)>;

/// Descending timestep grid, uniformly spaced over [1, T]:
/// t_k = round(k * T / num_steps) for k = num_steps..1.
inline std::vector<int> sampling_timesteps(int T, int num_steps) {
  std::vector<int> ts;
  ts.reserve((size_t)num_steps);
  for (int k = num_steps; k >= 1; --k) {
    int t = (int)std::llround((double)k * T / (double)num_steps);
    t = std::max(1, std::min(T, t));
    if (ts.empty() || t < ts.back()) ts.push_back(t);
  }
  return ts;
}

/// Multi-step residual sampler. At each selected timestep the denoiser
/// predicts x0, the implied noise is recovered, and the update jumps to the
/// previous selected step (to x0 itself at the end). With eta > 0 the jump
/// carries the generalized-posterior variance, which reduces exactly to the
/// DDPM reverse transition on consecutive timesteps.
inline Tensor sample_multistep(const X0Fn& denoise, const Shape& shape, const NoiseSchedule& s,
                               const SamplerConfig& cfg, Rng& rng, int* call_count = nullptr) {
  if (cfg.num_steps < 1 || cfg.num_steps > s.T)
    throw ScheduleError("sample_multistep: need 1 <= num_steps <= T");
  Tensor x = cfg.init_noise == InitNoise::kRandom ? rng.randn(shape) : Tensor(shape);
  std::vector<int> ts = sampling_timesteps(s.T, cfg.num_steps);
  int calls = 0;
  for (size_t i = 0; i < ts.size(); ++i) {
    int t = ts[i];
    int t_prev = (i + 1 < ts.size()) ? ts[i + 1] : 0;
    Tensor x0_hat = denoise(x, t);
    ++calls;
    if (!x0_hat.same_shape(x))
      throw ShapeError("sample_multistep: denoiser output shape " + shape_str(x0_hat.shape()) +
                       " != state shape " + shape_str(x.shape()));
    Tensor eps_hat = eps_from_x0(x, x0_hat, t, s);
    double ab_prev = s.alpha_bar_at(t_prev);
    double ab_t = s.alpha_bar_at(t);
    double var = 0.0;
    if (cfg.eta > 0.0 && t_prev > 0)
      var = cfg.eta * cfg.eta * (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
    double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - var));
    double a = std::sqrt(ab_prev);
    Tensor next(x.shape());
    if (var > 0.0) {
      double sd = std::sqrt(var);
      for (int64_t j = 0; j < next.numel(); ++j)
        next[j] = a * x0_hat[j] + dir * eps_hat[j] + sd * rng.normal();
    } else {
      for (int64_t j = 0; j < next.numel(); ++j) next[j] = a * x0_hat[j] + dir * eps_hat[j];
    }
    x = next;
  }
  if (call_count) *call_count = calls;
  return x;
}

/// One-step residual sampler: a single student call on the initialization.
inline Tensor sample_onestep(const X0Fn& student, const Shape& shape, InitNoise init, int t_infer,
                             Rng& rng, int* call_count = nullptr) {
  if (t_infer < 20 || t_infer > 980)
    throw ScheduleError("sample_onestep: t_infer outside the trained range [20,980]");
  Tensor x = init == InitNoise::kRandom ? rng.randn(shape) : Tensor(shape);
  Tensor x0_hat = student(x, t_infer);
  if (call_count) *call_count = 1;
  return x0_hat;
}

}  // namespace fose::diffusion
