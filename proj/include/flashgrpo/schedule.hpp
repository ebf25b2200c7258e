// SPDX-License-Identifier: Apache-2.0
#pragma once

// Uniform denoising grid t_T = 1 > ... > t_0 = t_floor. Step i (1..T) moves
// from t_i to t_{i-1} with step size dt_i = t_i - t_{i-1}, noise level
// sigma_i = sigma(t_i) and gradient scale lambda_i. After the grid, one extra
// deterministic step carries the state from t_floor to t = 0.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "flashgrpo/errors.hpp"

namespace flashgrpo {

// sqrt(dt)/sigma + sigma sqrt(dt) (1 - t) / (2 t): the factor multiplying
// eps . dv/dtheta in the score of the Gaussian transition kernel.
inline double lambda_of(double t, double dt, double sigma_t) {
  if (!(t > 0.0)) throw DomainError("lambda_of: t must be > 0 (got " + std::to_string(t) + ")");
  if (!(dt > 0.0)) throw DomainError("lambda_of: dt must be > 0");
  if (!(sigma_t > 0.0)) throw DomainError("lambda_of: sigma must be > 0");
  const double root_dt = std::sqrt(dt);
  return root_dt / sigma_t + sigma_t * root_dt * (1.0 - t) / (2.0 * t);
}

// sigma(t) = a sqrt(t / (1 - t)).
inline double sigma_of(double t, double noise_scale) {
  return noise_scale * std::sqrt(t / (1.0 - t));
}

class NoiseSchedule {
 public:
  std::size_t steps() const { return steps_; }
  double noise_scale() const { return noise_scale_; }
  double t_floor() const { return t_floor_; }
  // Largest t used inside sigma(t); the top step (t = 1) is evaluated here.
  double sigma_time_cap() const { return sigma_cap_; }

  // Grid value t_i, i = 0..T.
  double time(std::size_t i) const { return grid_.at(i); }
  const std::vector<double>& grid() const { return grid_; }

  double sigma(std::size_t step) const { return sigma_.at(check(step)); }
  double dt(std::size_t step) const { return dt_.at(check(step)); }
  double lambda(std::size_t step) const {
    return lambda_override_ ? *lambda_override_ : lambda_.at(check(step));
  }
  // Start time of step i.
  double step_time(std::size_t step) const { return grid_.at(check(step) + 1); }

  // Every grid step may carry the SDE transition; only the final hop from
  // t_floor to 0 is always deterministic.
  std::vector<std::size_t> eligible_steps() const {
    std::vector<std::size_t> s(steps_);
    for (std::size_t i = 0; i < steps_; ++i) s[i] = i + 1;
    return s;
  }

  // The T/2 highest-noise steps: T, T-1, ..., T - T/2 + 1.
  std::vector<std::size_t> first_half_steps() const {
    std::vector<std::size_t> s;
    for (std::size_t i = steps_; i > steps_ - steps_ / 2; --i) s.push_back(i);
    return s;
  }

  double terminal_dt() const { return t_floor_; }

  bool lambda_overridden() const { return lambda_override_.has_value(); }

  // Same grid, lambda pinned to `value` at every step.
  NoiseSchedule with_lambda(double value) const {
    if (!(value > 0.0) || !std::isfinite(value)) {
      throw ConfigError("with_lambda: value must be positive and finite");
    }
    NoiseSchedule s = *this;
    s.lambda_override_ = value;
    return s;
  }

  std::pair<double, double> lambda_range() const {
    double lo = lambda(1);
    double hi = lo;
    for (std::size_t i = 1; i <= steps_; ++i) {
      lo = std::min(lo, lambda(i));
      hi = std::max(hi, lambda(i));
    }
    return {lo, hi};
  }

  friend NoiseSchedule make_schedule(std::size_t steps, double noise_scale,
                                     double t_floor);

 private:
  std::size_t check(std::size_t step) const {
    if (step < 1 || step > steps_) {
      throw ContractError("schedule: step " + std::to_string(step) +
                          " outside 1.." + std::to_string(steps_));
    }
    return step - 1;
  }

  std::size_t steps_ = 0;
  double noise_scale_ = 0.0;
  double t_floor_ = 0.0;
  double sigma_cap_ = 0.0;
  std::vector<double> grid_;
  std::vector<double> sigma_;
  std::vector<double> dt_;
  std::vector<double> lambda_;
  std::optional<double> lambda_override_;
};

inline NoiseSchedule make_schedule(std::size_t steps, double noise_scale,
                                   double t_floor) {
  if (steps < 2) throw ConfigError("schedule.steps: must be >= 2");
  if (!(noise_scale > 0.0) || !std::isfinite(noise_scale)) {
    throw ConfigError("schedule.noise_scale: must be > 0");
  }
  if (!(t_floor > 0.0 && t_floor < 1.0 / static_cast<double>(steps))) {
    throw ConfigError("schedule.t_floor: must lie in (0, 1/steps)");
  }
  NoiseSchedule s;
  s.steps_ = steps;
  s.noise_scale_ = noise_scale;
  s.t_floor_ = t_floor;
  const double T = static_cast<double>(steps);
  s.grid_.resize(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) {
    s.grid_[i] = t_floor + (1.0 - t_floor) * static_cast<double>(i) / T;
  }
  s.grid_[steps] = 1.0;
  // sigma diverges at t = 1; the top step reuses the next grid time.
  s.sigma_cap_ = s.grid_[steps - 1];
  for (std::size_t i = 1; i <= steps; ++i) {
    const double t = s.grid_[i];
    const double dt = s.grid_[i] - s.grid_[i - 1];
    const double sigma = sigma_of(std::min(t, s.sigma_cap_), noise_scale);
    s.dt_.push_back(dt);
    s.sigma_.push_back(sigma);
    s.lambda_.push_back(lambda_of(t, dt, sigma));
  }
  return s;
}

}  // namespace flashgrpo
