// SPDX-License-Identifier: Apache-2.0
#pragma once

// ODE / SDE rollouts over a NoiseSchedule. Time runs from t = 1 down to 0 and
// dt is a positive magnitude, so the Euler ODE step is x - v dt and the
// marginal-preserving SDE step is
//
//   x_next = x - [v + sigma^2/(2t) (x + (1-t) v)] dt + sigma sqrt(dt) eps.
//
// Both are written as mu = x_coef * x + v_coef * v so that sigma = 0 reproduces
// the ODE step bit for bit.

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flashgrpo/diffkit.hpp"
#include "flashgrpo/errors.hpp"
#include "flashgrpo/flowmodel.hpp"
#include "flashgrpo/rng.hpp"
#include "flashgrpo/schedule.hpp"
#include "flashgrpo/tensor.hpp"
#include "json.hpp"

namespace flashgrpo {

struct KernelCoefficients {
  double x_coef;
  double v_coef;
  double noise_std;  // sigma sqrt(dt)
};

inline KernelCoefficients kernel_coefficients(double t, double dt, double sigma) {
  if (!(t > 0.0)) throw DomainError("transition kernel: t must be > 0");
  const double drift = sigma * sigma / (2.0 * t);
  return {1.0 - drift * dt, -dt * (1.0 + drift * (1.0 - t)), sigma * std::sqrt(dt)};
}

// ---------------------------------------------------------------------------
// Classifier-free guidance: (1 - s) v_uncond + s v_cond.

inline void check_guidance(double scale) {
  if (!(scale >= 0.0) || !std::isfinite(scale)) {
    throw ConfigError("cfg_scale: must be finite and >= 0");
  }
}

inline Tensor combine_guidance(const Tensor& v_uncond, const Tensor& v_cond,
                               double scale) {
  Tensor out = v_cond;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (1.0 - scale) * v_uncond[i] + scale * v_cond[i];
  }
  return out;
}

inline Tensor cfg_velocity(const VectorFieldParams& p, const Tensor& x, double t,
                           Condition c, double scale) {
  check_guidance(scale);
  Tensor v_cond = velocity(p, x, t, c);
  if (scale == 1.0) return v_cond;
  return combine_guidance(velocity(p, x, t, Condition::uncond()), v_cond, scale);
}

inline Tensor cfg_velocity_rows(const VectorFieldParams& p, const Tensor& x,
                                double t, Condition c, double scale) {
  check_guidance(scale);
  Tensor v_cond = velocity_rows(p, x, t, c);
  if (scale == 1.0) return v_cond;
  return combine_guidance(velocity_rows(p, x, t, Condition::uncond()), v_cond, scale);
}

inline Tensor cfg_velocity_rows(const FieldEvaluator& f, const Tensor& x, double t,
                                std::span<const Condition> conds, double scale) {
  check_guidance(scale);
  Tensor v_cond = f.velocity_rows(x, t, conds);
  if (scale == 1.0) return v_cond;
  const std::vector<Condition> uncond(conds.size(), Condition::uncond());
  return combine_guidance(f.velocity_rows(x, t, uncond), v_cond, scale);
}

inline diffkit::NodeId cfg_velocity(diffkit::Graph& g, const ParamNodes& pn,
                                    const VectorFieldParams& p, diffkit::NodeId x,
                                    double t, Condition c, double scale) {
  check_guidance(scale);
  const auto v_cond = velocity(g, pn, p, x, t, c);
  if (scale == 1.0) return v_cond;
  const auto v_uncond = velocity(g, pn, p, x, t, Condition::uncond());
  return g.add(g.scale(v_uncond, 1.0 - scale), g.scale(v_cond, scale));
}

// ---------------------------------------------------------------------------
// Single steps

inline Tensor ode_step(const VectorFieldParams& p, const Tensor& x, double t,
                       double dt, Condition c, double cfg_scale) {
  if (!(dt > 0.0)) throw DomainError("ode_step: dt must be > 0");
  const Tensor v = cfg_velocity(p, x, t, c, cfg_scale);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - dt * v[i];
  return out;
}

inline Tensor apply_mean(const KernelCoefficients& k, const Tensor& x,
                         const Tensor& v) {
  Tensor mu = x;
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = k.x_coef * x[i] + k.v_coef * v[i];
  return mu;
}

inline Tensor transition_mean(const VectorFieldParams& p, const Tensor& x,
                              double t, double dt, Condition c, double sigma,
                              double cfg_scale) {
  const KernelCoefficients k = kernel_coefficients(t, dt, sigma);
  return apply_mean(k, x, cfg_velocity(p, x, t, c, cfg_scale));
}

// Differentiable mean; x is a constant node.
inline diffkit::NodeId transition_mean(diffkit::Graph& g, const ParamNodes& pn,
                                       const VectorFieldParams& p,
                                       diffkit::NodeId x, double t, double dt,
                                       Condition c, double sigma,
                                       double cfg_scale) {
  const KernelCoefficients k = kernel_coefficients(t, dt, sigma);
  const auto v = cfg_velocity(g, pn, p, x, t, c, cfg_scale);
  return g.add(g.scale(x, k.x_coef), g.scale(v, k.v_coef));
}

inline double gaussian_variance(double sigma, double dt) {
  const double var = sigma * sigma * dt;
  if (!(var > 0.0) || !std::isfinite(var)) {
    throw DomainError("transition_log_prob: variance sigma^2 dt must be positive");
  }
  return var;
}

inline double log_prob_offset(double var, std::size_t d) {
  return -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * var);
}

// log N(x_next; mu, sigma^2 dt I).
inline double transition_log_prob(const Tensor& mu, double sigma, double dt,
                                  const Tensor& x_next) {
  const double var = gaussian_variance(sigma, dt);
  diffkit::kernels::require_same_shape(mu, x_next, "transition_log_prob");
  double sq = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double diff = x_next[i] - mu[i];
    sq += diff * diff;
  }
  return (-0.5 / var) * sq + log_prob_offset(var, mu.size());
}

inline diffkit::NodeId transition_log_prob(diffkit::Graph& g, diffkit::NodeId mu,
                                           double sigma, double dt,
                                           diffkit::NodeId x_next) {
  const double var = gaussian_variance(sigma, dt);
  const auto sq = g.squared_norm(g.sub(x_next, mu));
  return g.shift(g.scale(sq, -0.5 / var), log_prob_offset(var, g.value(mu).size()));
}

// One stochastic transition with its inputs and log-prob under the sampling
// parameters.
struct TransitionRecord {
  std::size_t step = 0;
  double t = 0.0;
  double dt = 0.0;
  double sigma = 0.0;
  double lambda = 0.0;
  Tensor x_t;
  Tensor x_next;
  Tensor eps;
  double logp_old = 0.0;
};

inline std::pair<Tensor, TransitionRecord> sde_step(
    const VectorFieldParams& p, const Tensor& x, double t, double dt,
    Condition c, double sigma, const Tensor& eps, double cfg_scale) {
  if (eps.size() != x.size()) throw DimensionError("sde_step: eps dimension mismatch");
  const KernelCoefficients k = kernel_coefficients(t, dt, sigma);
  const Tensor mu = apply_mean(k, x, cfg_velocity(p, x, t, c, cfg_scale));
  Tensor x_next = mu;
  for (std::size_t i = 0; i < x_next.size(); ++i) x_next[i] = mu[i] + k.noise_std * eps[i];
  TransitionRecord rec;
  rec.t = t;
  rec.dt = dt;
  rec.sigma = sigma;
  rec.lambda = sigma > 0.0 ? lambda_of(t, dt, sigma) : 0.0;
  rec.x_t = x;
  rec.x_next = x_next;
  rec.eps = eps;
  rec.logp_old = transition_log_prob(mu, sigma, dt, x_next);
  return {std::move(x_next), std::move(rec)};
}

// ---------------------------------------------------------------------------
// Rollouts

enum class RolloutKind { kOde, kSingle, kFullSde, kFirstHalfSde };

inline const char* to_string(RolloutKind k) {
  switch (k) {
    case RolloutKind::kOde: return "ode";
    case RolloutKind::kSingle: return "single";
    case RolloutKind::kFullSde: return "full-sde";
    case RolloutKind::kFirstHalfSde: return "first-half-sde";
  }
  return "?";
}

struct Trajectory {
  Condition cond = Condition::uncond();
  RolloutKind kind = RolloutKind::kOde;
  std::optional<std::size_t> transition_index;  // set for kSingle
  Tensor x_init;
  std::vector<Tensor> states;              // states[i]: x at grid time t_i
  std::vector<TransitionRecord> records;   // decreasing step order
  Tensor final_sample;                     // after the t_floor -> 0 hop

  const TransitionRecord& single_record() const {
    if (records.size() != 1) {
      throw ContractError("trajectory: expected exactly one SDE record, found " +
                          std::to_string(records.size()));
    }
    return records.front();
  }
};

// Which steps of one row run the SDE branch.
struct RolloutPlan {
  RolloutKind kind = RolloutKind::kOde;
  std::optional<std::size_t> transition_index;
  std::vector<bool> sde;  // indexed by step, size T + 1

  static RolloutPlan ode(const NoiseSchedule& s) {
    return {RolloutKind::kOde, std::nullopt, std::vector<bool>(s.steps() + 1, false)};
  }
  static RolloutPlan single(const NoiseSchedule& s, std::size_t k) {
    if (k < 1 || k > s.steps()) {
      throw ContractError("rollout: transition index " + std::to_string(k) +
                          " outside 1.." + std::to_string(s.steps()));
    }
    RolloutPlan plan{RolloutKind::kSingle, k, std::vector<bool>(s.steps() + 1, false)};
    plan.sde[k] = true;
    return plan;
  }
  static RolloutPlan full(const NoiseSchedule& s) {
    RolloutPlan plan{RolloutKind::kFullSde, std::nullopt,
                     std::vector<bool>(s.steps() + 1, true)};
    plan.sde[0] = false;
    return plan;
  }
  static RolloutPlan first_half(const NoiseSchedule& s) {
    RolloutPlan plan{RolloutKind::kFirstHalfSde, std::nullopt,
                     std::vector<bool>(s.steps() + 1, false)};
    for (std::size_t i : s.first_half_steps()) plan.sde[i] = true;
    return plan;
  }
};

// Supplies eps for (row, step); called only at SDE steps, in decreasing step order.
using EpsilonSource = std::function<Tensor(std::size_t row, std::size_t step)>;

// Runs all rows in lockstep; every row shares the condition and the guidance
// scale. Row r is bitwise identical to running it alone.
inline std::vector<Trajectory> rollout_rows(const VectorFieldParams& p,
                                            std::span<const Tensor> x_init,
                                            const NoiseSchedule& s,
                                            std::span<const RolloutPlan> plans,
                                            std::span<const Condition> conds,
                                            double cfg_scale,
                                            const EpsilonSource& eps_source) {
  const std::size_t n = x_init.size();
  if (n == 0) throw ContractError("rollout: no rows");
  if (plans.size() != n) throw ContractError("rollout: one plan per row required");
  if (conds.size() != n) throw ContractError("rollout: one condition per row required");
  const FieldEvaluator field(p);
  const std::size_t T = s.steps();
  const std::size_t d = p.arch.data_dim;
  for (const RolloutPlan& plan : plans) {
    if (plan.sde.size() != T + 1) throw ContractError("rollout: plan does not match schedule");
  }
  std::vector<Trajectory> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (x_init[r].rank() != 1 || x_init[r].size() != d) {
      throw DimensionError("rollout: initial noise must have shape [" + std::to_string(d) + "]");
    }
    out[r].cond = conds[r];
    out[r].kind = plans[r].kind;
    out[r].transition_index = plans[r].transition_index;
    out[r].x_init = x_init[r];
    out[r].states.assign(T + 1, Tensor());
    out[r].states[T] = x_init[r];
  }
  Tensor x = stack_rows(x_init);
  for (std::size_t i = T; i >= 1; --i) {
    const double t = s.step_time(i);
    const double dt = s.dt(i);
    const double sigma = s.sigma(i);
    const Tensor v = cfg_velocity_rows(field, x, t, conds, cfg_scale);
    const KernelCoefficients k = kernel_coefficients(t, dt, sigma);
    Tensor next = x;
    for (std::size_t r = 0; r < n; ++r) {
      auto xr = x.row(r);
      auto vr = v.row(r);
      auto nr = next.row(r);
      if (!plans[r].sde[i]) {
        for (std::size_t j = 0; j < d; ++j) nr[j] = xr[j] - dt * vr[j];
        continue;
      }
      Tensor eps = eps_source(r, i);
      if (eps.size() != d) throw DimensionError("rollout: eps dimension mismatch");
      Tensor mu(Tensor::Shape{d});
      for (std::size_t j = 0; j < d; ++j) mu[j] = k.x_coef * xr[j] + k.v_coef * vr[j];
      for (std::size_t j = 0; j < d; ++j) nr[j] = mu[j] + k.noise_std * eps[j];
      TransitionRecord rec;
      rec.step = i;
      rec.t = t;
      rec.dt = dt;
      rec.sigma = sigma;
      rec.lambda = s.lambda(i);
      rec.x_t = row_tensor(x, r);
      rec.x_next = row_tensor(next, r);
      rec.eps = std::move(eps);
      rec.logp_old = transition_log_prob(mu, sigma, dt, rec.x_next);
      out[r].records.push_back(std::move(rec));
    }
    x = std::move(next);
    for (std::size_t r = 0; r < n; ++r) out[r].states[i - 1] = row_tensor(x, r);
  }
  const double t_end = s.t_floor();
  const double dt_end = s.terminal_dt();
  const Tensor v = cfg_velocity_rows(field, x, t_end, conds, cfg_scale);
  for (std::size_t r = 0; r < n; ++r) {
    Tensor x0(Tensor::Shape{d});
    for (std::size_t j = 0; j < d; ++j) x0[j] = x.at(r, j) - dt_end * v.at(r, j);
    out[r].final_sample = std::move(x0);
  }
  return out;
}

inline std::vector<Trajectory> rollout_rows(const VectorFieldParams& p,
                                            std::span<const Tensor> x_init,
                                            const NoiseSchedule& s,
                                            std::span<const RolloutPlan> plans,
                                            Condition c, double cfg_scale,
                                            const EpsilonSource& eps_source) {
  const std::vector<Condition> conds(x_init.size(), c);
  return rollout_rows(p, x_init, s, plans, conds, cfg_scale, eps_source);
}

// One engine per row.
inline std::vector<Trajectory> rollout_group(const VectorFieldParams& p,
                                             std::span<const Tensor> x_init,
                                             const NoiseSchedule& s,
                                             std::span<const RolloutPlan> plans,
                                             std::span<const Condition> conds,
                                             double cfg_scale, std::vector<Rng>& rngs) {
  if (rngs.size() != x_init.size()) throw ContractError("rollout_group: one rng per row required");
  const std::size_t d = p.arch.data_dim;
  return rollout_rows(p, x_init, s, plans, conds, cfg_scale,
                      [&](std::size_t row, std::size_t) { return normal_tensor(rngs[row], {d}); });
}

inline std::vector<Trajectory> rollout_group(const VectorFieldParams& p,
                                             std::span<const Tensor> x_init,
                                             const NoiseSchedule& s,
                                             std::span<const RolloutPlan> plans,
                                             Condition c, double cfg_scale,
                                             std::vector<Rng>& rngs) {
  const std::vector<Condition> conds(x_init.size(), c);
  return rollout_group(p, x_init, s, plans, conds, cfg_scale, rngs);
}

inline Trajectory rollout_ode(const VectorFieldParams& p, const Tensor& x_init,
                              const NoiseSchedule& s, Condition c, double cfg_scale) {
  const RolloutPlan plan = RolloutPlan::ode(s);
  return rollout_rows(p, std::span<const Tensor>(&x_init, 1), s,
                      std::span<const RolloutPlan>(&plan, 1), c, cfg_scale,
                      [](std::size_t, std::size_t) -> Tensor {
                        throw ContractError("rollout_ode: unexpected SDE step");
                      })
      .front();
}

// ODE everywhere except one SDE transition at step k (Algorithm-1 rollout).
inline Trajectory rollout_mixed(const VectorFieldParams& p, const Tensor& x_init,
                                const NoiseSchedule& s, std::size_t k, Condition c,
                                double cfg_scale, Rng& rng) {
  const RolloutPlan plan = RolloutPlan::single(s, k);
  const std::size_t d = p.arch.data_dim;
  return rollout_rows(p, std::span<const Tensor>(&x_init, 1), s,
                      std::span<const RolloutPlan>(&plan, 1), c, cfg_scale,
                      [&](std::size_t, std::size_t) { return normal_tensor(rng, {d}); })
      .front();
}

enum class BaselineMode { kFullSde, kFirstHalfSde };

inline Trajectory rollout_baseline(const VectorFieldParams& p, const Tensor& x_init,
                                   const NoiseSchedule& s, BaselineMode mode,
                                   Condition c, double cfg_scale, Rng& rng) {
  const RolloutPlan plan = mode == BaselineMode::kFullSde ? RolloutPlan::full(s)
                                                          : RolloutPlan::first_half(s);
  const std::size_t d = p.arch.data_dim;
  return rollout_rows(p, std::span<const Tensor>(&x_init, 1), s,
                      std::span<const RolloutPlan>(&plan, 1), c, cfg_scale,
                      [&](std::size_t, std::size_t) { return normal_tensor(rng, {d}); })
      .front();
}

// Deterministic sampling of n points per call with fixed initial noise.
inline Tensor sample_ode(const VectorFieldParams& p, const Tensor& x_init_rows,
                         const NoiseSchedule& s, Condition c, double cfg_scale) {
  const FieldEvaluator field(p);
  const std::vector<Condition> conds(x_init_rows.rows(), c);
  Tensor x = x_init_rows;
  for (std::size_t i = s.steps(); i >= 1; --i) {
    const double dt = s.dt(i);
    const Tensor v = cfg_velocity_rows(field, x, s.step_time(i), conds, cfg_scale);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = x[j] - dt * v[j];
  }
  const Tensor v = cfg_velocity_rows(field, x, s.t_floor(), conds, cfg_scale);
  for (std::size_t j = 0; j < x.size(); ++j) x[j] = x[j] - s.terminal_dt() * v[j];
  return x;
}

// ---------------------------------------------------------------------------
// Debug dump

inline nlohmann::json tensor_json(const Tensor& t) {
  return nlohmann::json(std::vector<double>(t.values().begin(), t.values().end()));
}

inline nlohmann::json trajectory_to_json(const Trajectory& tr) {
  nlohmann::json j;
  j["condition"] = tr.cond.to_string();
  j["kind"] = to_string(tr.kind);
  j["transition_index"] = tr.transition_index ? nlohmann::json(*tr.transition_index)
                                              : nlohmann::json(nullptr);
  j["x_init"] = tensor_json(tr.x_init);
  nlohmann::json states = nlohmann::json::array();
  for (const Tensor& s : tr.states) states.push_back(tensor_json(s));
  j["states"] = std::move(states);
  nlohmann::json recs = nlohmann::json::array();
  for (const TransitionRecord& r : tr.records) {
    recs.push_back({{"step", r.step},
                    {"t", r.t},
                    {"dt", r.dt},
                    {"sigma", r.sigma},
                    {"lambda", r.lambda},
                    {"x_t", tensor_json(r.x_t)},
                    {"x_next", tensor_json(r.x_next)},
                    {"eps", tensor_json(r.eps)},
                    {"logp_old", r.logp_old}});
  }
  j["records"] = std::move(recs);
  j["final_sample"] = tensor_json(tr.final_sample);
  return j;
}

}  // namespace flashgrpo
