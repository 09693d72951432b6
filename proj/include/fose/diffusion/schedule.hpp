#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "fose/core/rng.hpp"
#include "fose/core/tensor.hpp"

namespace fose::diffusion {

struct ScheduleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Variance schedule tables, 1-indexed over t in [1,T]; index 0 holds the
/// conventional alpha_bar_0 = 1 sentinel (gives posterior variance 0 at t=1).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // beta[0] unused
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // prefix products, alpha_bar[0] = 1

  double beta_at(int t) const {
    check_t(t);
    return beta[(size_t)t];
  }
  double alpha_at(int t) const {
    check_t(t);
    return alpha[(size_t)t];
  }
  double alpha_bar_at(int t) const {
    if (t < 0 || t > T) throw ScheduleError("alpha_bar: t out of range");
    return alpha_bar[(size_t)t];
  }
  void check_t(int t) const {
    if (t < 1 || t > T) throw ScheduleError("timestep out of range [1,T]");
  }
};

inline NoiseSchedule make_linear_schedule(int T, double beta_start = 1e-4,
                                          double beta_end = 0.02) {
  if (T < 1) throw ScheduleError("make_linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw ScheduleError("make_linear_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.assign((size_t)T + 1, 0.0);
  s.alpha.assign((size_t)T + 1, 1.0);
  s.alpha_bar.assign((size_t)T + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    double frac = T > 1 ? (double)(t - 1) / (double)(T - 1) : 0.0;
    s.beta[(size_t)t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[(size_t)t] = 1.0 - s.beta[(size_t)t];
    s.alpha_bar[(size_t)t] = s.alpha_bar[(size_t)t - 1] * s.alpha[(size_t)t];
  }
  return s;
}

/// Closed-form marginal: sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
inline Tensor forward_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  s.check_t(t);
  check_same_shape(x0, eps, "forward_sample");
  double ab = s.alpha_bar_at(t);
  return t_axpby(std::sqrt(ab), x0, std::sqrt(1.0 - ab), eps);
}

/// Per-sample timesteps over a batched NCHW tensor.
inline Tensor forward_sample_batch(const Tensor& x0, const std::vector<int>& ts, const Tensor& eps,
                                   const NoiseSchedule& s) {
  check_same_shape(x0, eps, "forward_sample_batch");
  int N = x0.dim(0);
  if ((int)ts.size() != N) throw ScheduleError("forward_sample_batch: one t per sample");
  Tensor y(x0.shape());
  int64_t per = x0.numel() / N;
  for (int n = 0; n < N; ++n) {
    double ab = s.alpha_bar_at(ts[(size_t)n]);
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    const double* xp = x0.data() + (int64_t)n * per;
    const double* ep = eps.data() + (int64_t)n * per;
    double* yp = y.data() + (int64_t)n * per;
    for (int64_t i = 0; i < per; ++i) yp[i] = a * xp[i] + b * ep[i];
  }
  return y;
}

/// One forward chain step: draw from N(sqrt(1-beta_t) x_{t-1}, beta_t I).
inline Tensor chain_step(const Tensor& x_prev, int t, const NoiseSchedule& s, Rng& rng) {
  s.check_t(t);
  double bt = s.beta_at(t);
  double a = std::sqrt(1.0 - bt), sd = std::sqrt(bt);
  Tensor y(x_prev.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a * x_prev[i] + sd * rng.normal();
  return y;
}

/// Invert the closed form: eps = (x_t - sqrt(abar_t) x0) / sqrt(1-abar_t).
inline Tensor eps_from_x0(const Tensor& x_t, const Tensor& x0_hat, int t, const NoiseSchedule& s) {
  s.check_t(t);
  check_same_shape(x_t, x0_hat, "eps_from_x0");
  double ab = s.alpha_bar_at(t);
  if (!(ab < 1.0)) throw ScheduleError("eps_from_x0: alpha_bar_t == 1 (division by zero)");
  double inv = 1.0 / std::sqrt(1.0 - ab), a = std::sqrt(ab);
  Tensor y(x_t.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = (x_t[i] - a * x0_hat[i]) * inv;
  return y;
}

/// Reverse-transition mean and variance at step t from a noise prediction.
inline std::pair<Tensor, double> posterior_mean_var(const Tensor& x_t, const Tensor& eps_hat,
                                                    int t, const NoiseSchedule& s) {
  s.check_t(t);
  check_same_shape(x_t, eps_hat, "posterior_mean_var");
  double bt = s.beta_at(t);
  double at = s.alpha_at(t);
  double ab = s.alpha_bar_at(t);
  double coef = bt / std::sqrt(1.0 - ab);
  double inv_sqrt_a = 1.0 / std::sqrt(at);
  Tensor mean(x_t.shape());
  for (int64_t i = 0; i < mean.numel(); ++i) mean[i] = inv_sqrt_a * (x_t[i] - coef * eps_hat[i]);
  double var = t == 1 ? 0.0 : (1.0 - s.alpha_bar_at(t - 1)) / (1.0 - ab) * bt;
  return {mean, var};
}

}  // namespace fose::diffusion
