// SPDX-License-Identifier: Apache-2.0
#pragma once

// Verification machinery. Nothing here calls into the code path it checks:
// finite differences only run forward evaluations, the energy test only sees
// samples, and the variance decomposition only sees rewards.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flashgrpo/diffkit.hpp"
#include "flashgrpo/errors.hpp"
#include "flashgrpo/flowmodel.hpp"
#include "flashgrpo/grpo.hpp"
#include "flashgrpo/rewards.hpp"
#include "flashgrpo/rng.hpp"
#include "flashgrpo/sampler.hpp"
#include "flashgrpo/schedule.hpp"
#include "json.hpp"

namespace flashgrpo::oracle {

struct VerificationReport {
  std::string name;
  bool passed = false;
  std::map<std::string, double> measured;
  double tolerance = 0.0;
  std::map<std::string, std::size_t> samples;
  std::uint64_t seed = 0;
  std::string note;

  nlohmann::json to_json() const {
    nlohmann::json j{{"check", name},
                     {"passed", passed},
                     {"measured", measured},
                     {"tolerance", tolerance},
                     {"samples", samples},
                     {"seed", seed}};
    if (!note.empty()) j["note"] = note;
    return j;
  }
};

// Cost accounting: transition-kernel gradient evaluations seen by backward().
inline std::uint64_t backward_pass_counter() {
  return diffkit::counters().kernel_gradients.load();
}
inline void reset_counter() { diffkit::reset_counters(); }

// |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor = 0.0) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  if (denom == 0.0) return 0.0;
  return std::abs(a - b) / denom;
}

// ---------------------------------------------------------------------------
// Finite differences

// Central difference of f at x along every coordinate.
inline std::vector<double> central_difference(
    const std::function<double(std::span<const double>)>& f, std::vector<double> x,
    double h) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Central difference of f along a direction u.
inline double directional_difference(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, std::span<const double> u,
                                     double h) {
  std::vector<double> plus(x.begin(), x.end());
  std::vector<double> minus(x.begin(), x.end());
  for (std::size_t i = 0; i < x.size(); ++i) {
    plus[i] += h * u[i];
    minus[i] -= h * u[i];
  }
  return (f(plus) - f(minus)) / (2.0 * h);
}

// Max elementwise relative error between an analytic and a numeric gradient.
// The floor scales with |f| so entries that are zero up to cancellation noise
// are compared absolutely.
inline double max_gradient_error(std::span<const double> analytic,
                                 std::span<const double> numeric, double f_scale) {
  const double floor = 1e-6 * std::max(1.0, std::abs(f_scale));
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, relative_error(analytic[i], numeric[i], floor));
  }
  return worst;
}

// A scalar function of a list of leaf tensors, built on a graph.
using GraphFunction =
    std::function<diffkit::NodeId(diffkit::Graph&, const std::vector<diffkit::NodeId>&)>;

// Compares backward() on `fn` with central differences over every leaf entry.
inline VerificationReport check_op_gradient(const std::string& name, const GraphFunction& fn,
                                            const std::vector<Tensor>& leaves, double h = 1e-5,
                                            double tol = 1e-4) {
  auto eval = [&](const std::vector<Tensor>& values) {
    diffkit::Graph g;
    std::vector<diffkit::NodeId> ids;
    for (std::size_t i = 0; i < values.size(); ++i) ids.push_back(g.parameter(i, values[i]));
    const auto out = fn(g, ids);
    return std::make_pair(std::move(g), out);
  };
  std::vector<double> analytic;
  double f0 = 0.0;
  {
    auto [g, out] = eval(leaves);
    f0 = g.value(out).item();
    analytic = diffkit::backward(g, out).flatten();
  }
  std::vector<double> flat;
  for (const Tensor& t : leaves) flat.insert(flat.end(), t.values().begin(), t.values().end());
  auto forward = [&](std::span<const double> x) {
    std::vector<Tensor> values = leaves;
    std::size_t k = 0;
    for (Tensor& t : values) {
      for (double& v : t.values()) v = x[k++];
    }
    auto [g, out] = eval(values);
    return g.value(out).item();
  };
  const std::vector<double> numeric = central_difference(forward, flat, h);
  const double err = max_gradient_error(analytic, numeric, f0);
  VerificationReport r;
  r.name = "fd/" + name;
  r.passed = err <= tol;
  r.measured["max_rel_err"] = err;
  r.tolerance = tol;
  r.samples["entries"] = flat.size();
  return r;
}

// Directional check of a model-parameter gradient: analytic u.grad against
// the central difference along u, for several random directions.
inline VerificationReport check_param_gradient(
    const std::string& name, const VectorFieldParams& params,
    const std::function<double(const VectorFieldParams&)>& forward,
    const std::function<std::vector<double>(const VectorFieldParams&)>& analytic,
    std::size_t directions, std::uint64_t seed, double h = 1e-5, double tol = 1e-4) {
  Rng rng = make_stream(seed, {0xFD});
  const std::vector<double> x = params.flatten();
  const std::vector<double> grad = analytic(params);
  auto f = [&](std::span<const double> flat) {
    VectorFieldParams p = params;
    p.assign_flat(flat);
    return forward(p);
  };
  const double f0 = forward(params);
  double worst = 0.0;
  for (std::size_t k = 0; k < directions; ++k) {
    std::vector<double> u(x.size());
    for (double& v : u) v = standard_normal(rng);
    const double norm = std::sqrt(dot(u, u));
    for (double& v : u) v /= norm;
    const double num = directional_difference(f, x, u, h);
    worst = std::max(worst, relative_error(dot(grad, u), num, 1e-6 * std::max(1.0, std::abs(f0))));
  }
  VerificationReport r;
  r.name = "fd/" + name;
  r.passed = worst <= tol;
  r.measured["max_rel_err"] = worst;
  r.tolerance = tol;
  r.samples["directions"] = directions;
  r.seed = seed;
  return r;
}

namespace detail {

inline Tensor uniform_tensor(Rng& rng, Tensor::Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

}  // namespace detail

// Every differentiable op, each reduced to a scalar through random weights,
// plus the model-level compositions. Inputs are drawn from [-10, 10] (log
// from [0.1, 10]).
inline std::vector<VerificationReport> finite_difference_suite(
    std::uint64_t seed, const VectorFieldParams* model = nullptr,
    std::size_t directions = 8) {
  using diffkit::Graph;
  using diffkit::NodeId;
  using Leaves = std::vector<NodeId>;
  Rng rng = make_stream(seed, {0xFD5});
  auto u = [&](Tensor::Shape shape, double lo = -10.0, double hi = 10.0) {
    return detail::uniform_tensor(rng, std::move(shape), lo, hi);
  };
  // sum(w * y) for a fixed random w.
  auto project = [](Graph& g, NodeId y, const Tensor& w) {
    return g.sum(g.mul(y, g.constant(w)));
  };
  std::vector<VerificationReport> out;
  auto add = [&](const std::string& name, const GraphFunction& fn,
                 const std::vector<Tensor>& leaves) {
    VerificationReport r = check_op_gradient(name, fn, leaves);
    r.seed = seed;
    out.push_back(std::move(r));
  };

  {
    const Tensor w4 = u({4}, -1, 1);
    add("affine", [&](Graph& g, const Leaves& l) { return project(g, g.affine(l[0], l[1], l[2]), w4); },
        {u({3}), u({4, 3}, -1, 1), u({4})});
    const Tensor w54 = u({5, 4}, -1, 1);
    add("affine_batched",
        [&](Graph& g, const Leaves& l) { return project(g, g.affine(l[0], l[1], l[2]), w54); },
        {u({5, 3}), u({4, 3}, -1, 1), u({4})});
  }
  {
    const Tensor w = u({6}, -1, 1);
    add("tanh", [&](Graph& g, const Leaves& l) { return project(g, g.tanh(l[0]), w); },
        {u({6}, -3, 3)});
    add("tanh_wide", [&](Graph& g, const Leaves& l) { return project(g, g.tanh(l[0]), w); },
        {u({6})});
    add("add", [&](Graph& g, const Leaves& l) { return project(g, g.add(l[0], l[1]), w); },
        {u({6}), u({6})});
    add("sub", [&](Graph& g, const Leaves& l) { return project(g, g.sub(l[0], l[1]), w); },
        {u({6}), u({6})});
    add("mul", [&](Graph& g, const Leaves& l) { return project(g, g.mul(l[0], l[1]), w); },
        {u({6}), u({6})});
    add("scale", [&](Graph& g, const Leaves& l) { return project(g, g.scale(l[0], -2.5), w); },
        {u({6})});
    add("scale_by",
        [&](Graph& g, const Leaves& l) { return project(g, g.scale_by(l[0], l[1]), w); },
        {u({6}), u({})});
    add("shift", [&](Graph& g, const Leaves& l) { return project(g, g.shift(l[0], 3.0), w); },
        {u({6})});
    add("sum", [&](Graph& g, const Leaves& l) { return g.sum(l[0]); }, {u({6})});
    add("squared_norm", [&](Graph& g, const Leaves& l) { return g.squared_norm(l[0]); },
        {u({6})});
    add("exp", [&](Graph& g, const Leaves& l) { return project(g, g.exp(l[0]), w); }, {u({6})});
    add("log", [&](Graph& g, const Leaves& l) { return project(g, g.log(l[0]), w); },
        {u({6}, 0.1, 10.0)});
  }
  {
    const Tensor w = u({7}, -1, 1);
    add("concat", [&](Graph& g, const Leaves& l) { return project(g, g.concat(l[0], l[1]), w); },
        {u({3}), u({4})});
    const Tensor w2 = u({2, 7}, -1, 1);
    add("concat_rows",
        [&](Graph& g, const Leaves& l) { return project(g, g.concat(l[0], l[1]), w2); },
        {u({2, 3}), u({2, 4})});
    const Tensor w3 = u({3, 4}, -1, 1);
    add("gather_rows",
        [&](Graph& g, const Leaves& l) { return project(g, g.gather_rows(l[0], {2, 0, 2}, false), w3); },
        {u({3, 4})});
  }
  {
    // Two-layer tanh network with a squared-error loss.
    const Tensor x = u({5, 3}, -1, 1);
    const Tensor y = u({5, 2}, -1, 1);
    add("mlp2_loss",
        [&](Graph& g, const Leaves& l) {
          const NodeId h = g.tanh(g.affine(g.constant(x), l[0], l[1]));
          const NodeId o = g.affine(h, l[2], l[3]);
          return g.scale(g.squared_norm(g.sub(o, g.constant(y))), 0.5);
        },
        {u({6, 3}, -1, 1), u({6}, -1, 1), u({2, 6}, -1, 1), u({2}, -1, 1)});
    add("clipped_ratio_chain",
        [&](Graph& g, const Leaves& l) {
          const NodeId ratio = g.exp(g.scale(g.squared_norm(l[0]), -0.05));
          return g.log(g.shift(g.scale_by(ratio, l[1]), 20.0));
        },
        {u({4}, -3, 3), u({})});
  }
  if (model != nullptr) {
    const VectorFieldParams& p = *model;
    const NoiseSchedule s = make_schedule(20, 0.7, 1e-3);
    const std::size_t k = 7;
    const Tensor x = normal_tensor(rng, {p.arch.data_dim});
    const Tensor x_next = normal_tensor(rng, {p.arch.data_dim});
    const Tensor probe = normal_tensor(rng, {p.arch.data_dim});
    const Condition c = Condition::of(0);
    auto grad_of = [](auto build) {
      return [build](const VectorFieldParams& q) {
        diffkit::Graph g;
        const ParamNodes pn = register_params(g, q);
        return diffkit::backward(g, build(g, pn, q)).flatten();
      };
    };
    auto value_of = [](auto build) {
      return [build](const VectorFieldParams& q) {
        diffkit::Graph g;
        const ParamNodes pn = register_params(g, q);
        return g.value(build(g, pn, q)).item();
      };
    };
    auto velocity_probe = [&](diffkit::Graph& g, const ParamNodes& pn, const VectorFieldParams& q) {
      const NodeId v = cfg_velocity(g, pn, q, g.constant(x), s.step_time(k), c, 4.5);
      return g.sum(g.mul(v, g.constant(probe)));
    };
    auto log_prob = [&](diffkit::Graph& g, const ParamNodes& pn, const VectorFieldParams& q) {
      const NodeId mu = transition_mean(g, pn, q, g.constant(x), s.step_time(k), s.dt(k), c, s.sigma(k), 4.5);
      return transition_log_prob(g, mu, s.sigma(k), s.dt(k), g.constant(x_next));
    };
    Rng batch_rng = make_stream(seed, {0xFD6});
    const FlowMatchingBatch batch = draw_fm_batch(default_data_spec(), 16, 0.1, batch_rng);
    auto fm = [&](diffkit::Graph& g, const ParamNodes& pn, const VectorFieldParams& q) {
      return fm_loss(g, pn, q, batch);
    };
    const std::vector<std::pair<std::string, std::function<NodeId(Graph&, const ParamNodes&,
                                                                   const VectorFieldParams&)>>>
        model_checks{{"model_velocity", velocity_probe},
                     {"model_transition_log_prob", log_prob},
                     {"model_fm_loss", fm}};
    for (const auto& [name, build] : model_checks) {
      out.push_back(check_param_gradient(name, p, value_of(build), grad_of(build), directions,
                                         seed));
    }
    // Policy loss of one iso group on the current model.
    RolloutGroup group;
    group.cond = c;
    group.mode = GroupingMode::kIso;
    group.steps.assign(4, k);
    std::vector<Tensor> x_init;
    std::vector<Rng> rngs;
    std::vector<RolloutPlan> plans;
    for (std::size_t i = 0; i < 4; ++i) {
      x_init.push_back(normal_tensor(rng, {p.arch.data_dim}));
      rngs.push_back(make_stream(seed, {0xFD7, i}));
      plans.push_back(RolloutPlan::single(s, k));
    }
    group.trajectories = rollout_group(p, x_init, s, plans, c, 4.5, rngs);
    group.rewards = {0.1, 0.7, 0.4, 0.9};
    group.advantages = compute_advantages(group.rewards, 0.0);
    LossOptions o;
    o.clip_epsilon = 0.5;
    const std::span<const RolloutGroup> batch_groups(&group, 1);
    auto policy_value = [&](const VectorFieldParams& q) {
      return flash_loss(batch_groups, q, s, o).value;
    };
    auto policy_grad = [&](const VectorFieldParams& q) {
      PolicyLoss l = flash_loss(batch_groups, q, s, o);
      return diffkit::backward(l.graph, l.loss).flatten();
    };
    out.push_back(check_param_gradient("model_flash_loss", p, policy_value, policy_grad,
                                       directions, seed));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Score identity: grad_theta log p(x_next | x_t) = -lambda(t) eps . dv/dtheta.
// The minus sign comes from integrating t downwards (dmu/dv = -dt (...)).

inline constexpr double kScoreSign = -1.0;

// A velocity field exposed as a graph builder; leaves are registered by the
// builder and their ids follow the order of `flat_params`.
struct VelocityProbe {
  std::function<diffkit::NodeId(diffkit::Graph&, diffkit::NodeId x, double t)> velocity;
  std::size_t param_scalars = 0;
};

struct IdentityTrial {
  double autodiff = 0.0;  // u . grad log p
  double predicted = 0.0; // sign * lambda * u . grad (eps . v)
};

inline IdentityTrial grad_identity_trial(const VelocityProbe& probe, const Tensor& x_t,
                                         const Tensor& eps, double t, double dt, double sigma,
                                         double lambda, std::span<const double> direction) {
  const KernelCoefficients k = kernel_coefficients(t, dt, sigma);
  IdentityTrial out;
  {
    diffkit::Graph g;
    const auto x = g.constant(x_t);
    const auto v = probe.velocity(g, x, t);
    const auto mu = g.add(g.scale(x, k.x_coef), g.scale(v, k.v_coef));
    Tensor x_next = g.value(mu);
    for (std::size_t i = 0; i < x_next.size(); ++i) x_next[i] += k.noise_std * eps[i];
    const auto logp = transition_log_prob(g, mu, sigma, dt, g.constant(x_next));
    out.autodiff = dot(diffkit::backward(g, logp).flatten(), direction);
  }
  {
    diffkit::Graph g;
    const auto x = g.constant(x_t);
    const auto v = probe.velocity(g, x, t);
    const auto proj = g.sum(g.mul(v, g.constant(eps)));
    out.predicted = kScoreSign * lambda * dot(diffkit::backward(g, proj).flatten(), direction);
  }
  return out;
}

inline VelocityProbe model_probe(const VectorFieldParams& params, Condition c, double cfg_scale) {
  VelocityProbe probe;
  probe.param_scalars = params.scalar_count();
  probe.velocity = [&params, c, cfg_scale](diffkit::Graph& g, diffkit::NodeId x, double t) {
    const ParamNodes pn = register_params(g, params);
    return cfg_velocity(g, pn, params, x, t, c, cfg_scale);
  };
  return probe;
}

// `lambda_multiplier` != 1 injects a deliberate fault.
inline VerificationReport check_grad_identity(const VectorFieldParams& params,
                                              const NoiseSchedule& s, std::size_t n_trials,
                                              std::uint64_t seed, double cfg_scale,
                                              double lambda_multiplier = 1.0,
                                              double tol = 1e-6) {
  if (n_trials < 1) throw ConfigError("check_grad_identity: n_trials must be >= 1");
  Rng rng = make_stream(seed, {0x9D});
  const auto eligible = s.eligible_steps();
  double worst = 0.0;
  for (std::size_t trial = 0; trial < n_trials; ++trial) {
    const std::size_t k = eligible[uniform_index(rng, 0, eligible.size() - 1)];
    const Condition c = Condition::of(uniform_index(rng, 0, params.arch.num_classes - 1));
    const Tensor x_t = normal_tensor(rng, {params.arch.data_dim});
    const Tensor eps = normal_tensor(rng, {params.arch.data_dim});
    std::vector<double> u(params.scalar_count());
    for (double& v : u) v = standard_normal(rng);
    const auto probe = model_probe(params, c, cfg_scale);
    const IdentityTrial r = grad_identity_trial(probe, x_t, eps, s.step_time(k), s.dt(k),
                                                s.sigma(k), lambda_multiplier * s.lambda(k), u);
    // Relative to the autodiff value, so a wrong factor f shows up as |1 - f|.
    const double denom = std::abs(r.autodiff) > 0.0 ? std::abs(r.autodiff) : 1.0;
    worst = std::max(worst, std::abs(r.autodiff - r.predicted) / denom);
  }
  VerificationReport rep;
  rep.name = "grad_identity";
  rep.passed = worst <= tol;
  rep.measured["max_rel_err"] = worst;
  rep.measured["lambda_multiplier"] = lambda_multiplier;
  rep.tolerance = tol;
  rep.samples["trials"] = n_trials;
  rep.seed = seed;
  return rep;
}

// ---------------------------------------------------------------------------
// Rectification law: grad(flash loss) == grad(same loss with lambda = 1) / lambda.

inline VerificationReport check_rectification_law(const VectorFieldParams& params_old,
                                                  const VectorFieldParams& params,
                                                  const NoiseSchedule& s, std::size_t group_size,
                                                  std::size_t trials, std::uint64_t seed,
                                                  const LossOptions& options,
                                                  double tol = 1e-12) {
  Rng rng = make_stream(seed, {0x7E});
  const auto eligible = s.eligible_steps();
  double worst = 0.0;
  double worst_entry = 0.0;
  std::size_t clipped = 0;
  std::size_t checked = 0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    RolloutGroup group;
    group.cond = Condition::of(uniform_index(rng, 0, params.arch.num_classes - 1));
    group.mode = GroupingMode::kIso;
    const std::size_t k = eligible[uniform_index(rng, 0, eligible.size() - 1)];
    group.steps.assign(group_size, k);
    std::vector<Tensor> x_init;
    std::vector<Rng> rngs;
    std::vector<RolloutPlan> plans;
    for (std::size_t i = 0; i < group_size; ++i) {
      x_init.push_back(normal_tensor(rng, {params.arch.data_dim}));
      rngs.push_back(make_stream(seed, {0x7F, trial, i}));
      plans.push_back(RolloutPlan::single(s, k));
    }
    group.trajectories = rollout_group(params_old, x_init, s, plans, group.cond,
                                       options.cfg_scale, rngs);
    std::vector<double> rewards(group_size);
    for (double& r : rewards) r = standard_normal(rng);
    group.rewards = rewards;
    group.advantages = compute_advantages(rewards, 0.0);

    const std::span<const RolloutGroup> batch(&group, 1);
    PolicyLoss rect = flash_loss(batch, params, s, options);
    PolicyLoss unit = flash_loss(batch, params, s.with_lambda(1.0), options);
    clipped += rect.clipped_terms + unit.clipped_terms;
    const auto g_rect = diffkit::backward(rect.graph, rect.loss).flatten();
    const auto g_unit = diffkit::backward(unit.graph, unit.loss).flatten();
    const double lam = s.lambda(k);
    double scale = 0.0;
    for (double v : g_rect) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < g_rect.size(); ++i) {
      const double expected = g_unit[i] / lam;
      worst_entry = std::max(worst_entry, relative_error(g_rect[i], expected));
      if (scale > 0.0) worst = std::max(worst, std::abs(g_rect[i] - expected) / scale);
    }
    checked += g_rect.size();
  }
  VerificationReport rep;
  rep.name = "rectification_law";
  rep.passed = worst <= tol && clipped == 0;
  // Entries are compared against the gradient's max-norm. Per-entry relative
  // error is reported too; it is dominated by entries near cancellation.
  rep.measured["max_rel_err"] = worst;
  rep.measured["max_entry_rel_err"] = worst_entry;
  rep.measured["clipped_terms"] = static_cast<double>(clipped);
  rep.tolerance = tol;
  rep.samples["trials"] = trials;
  rep.samples["gradient_entries"] = checked;
  rep.seed = seed;
  if (clipped != 0) rep.note = "clipped branch active; law only holds on unclipped batches";
  return rep;
}

// ---------------------------------------------------------------------------
// Timestep confounding: within-group reward variance under naive vs iso steps.

inline double population_variance(std::span<const double> xs) {
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double v = 0.0;
  for (double x : xs) v += (x - mean) * (x - mean);
  return v / n;
}

inline VerificationReport variance_decomposition(const RewardSpec& spec,
                                                 const VectorFieldParams& params,
                                                 const NoiseSchedule& s, std::size_t group_size,
                                                 std::size_t n_groups, std::uint64_t seed,
                                                 double cfg_scale) {
  if (spec.kind != RewardKind::kTimeProbe) {
    throw ConfigError("variance_decomposition: needs the t-probe reward");
  }
  if (group_size < 2 || n_groups < 1) throw ConfigError("variance_decomposition: empty design");
  const auto eligible = s.eligible_steps();
  const std::size_t d = params.arch.data_dim;
  double naive_sum = 0.0;
  double iso_sum = 0.0;
  double iso_probe_spread = 0.0;
  for (std::size_t n = 0; n < n_groups; ++n) {
    Rng rng = make_stream(seed, {0xDEC0, n});
    const Condition c = Condition::of(uniform_index(rng, 0, params.arch.num_classes - 1));
    std::vector<Tensor> x_init;
    for (std::size_t i = 0; i < group_size; ++i) x_init.push_back(normal_tensor(rng, {d}));
    const std::size_t shared = eligible[uniform_index(rng, 0, eligible.size() - 1)];
    std::vector<RolloutPlan> iso_plans;
    std::vector<RolloutPlan> naive_plans;
    for (std::size_t i = 0; i < group_size; ++i) {
      iso_plans.push_back(RolloutPlan::single(s, shared));
      naive_plans.push_back(
          RolloutPlan::single(s, eligible[uniform_index(rng, 0, eligible.size() - 1)]));
    }
    std::vector<Rng> iso_rngs;
    std::vector<Rng> naive_rngs;
    for (std::size_t i = 0; i < group_size; ++i) {
      iso_rngs.push_back(make_stream(seed, {0xDEC1, n, i}));
      naive_rngs.push_back(make_stream(seed, {0xDEC2, n, i}));
    }
    const auto iso = rollout_group(params, x_init, s, iso_plans, c, cfg_scale, iso_rngs);
    const auto naive = rollout_group(params, x_init, s, naive_plans, c, cfg_scale, naive_rngs);
    const auto r_iso = evaluate_trajectories(spec, iso);
    const auto r_naive = evaluate_trajectories(spec, naive);
    iso_sum += population_variance(r_iso);
    naive_sum += population_variance(r_naive);
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& tr : iso) {
      lo = std::min(lo, spec.probe(transition_time(tr)));
      hi = std::max(hi, spec.probe(transition_time(tr)));
    }
    iso_probe_spread = std::max(iso_probe_spread, hi - lo);
  }
  VerificationReport rep;
  rep.name = "variance_decomposition";
  const double naive_var = naive_sum / static_cast<double>(n_groups);
  const double iso_var = iso_sum / static_cast<double>(n_groups);
  rep.measured["naive_variance"] = naive_var;
  rep.measured["iso_variance"] = iso_var;
  rep.measured["ratio"] = iso_var > 0.0 ? naive_var / iso_var
                                        : std::numeric_limits<double>::infinity();
  rep.measured["iso_probe_spread"] = iso_probe_spread;
  rep.measured["probe_amplitude"] = spec.probe_amplitude;
  rep.passed = iso_probe_spread == 0.0;
  rep.samples["groups"] = n_groups;
  rep.samples["group_size"] = group_size;
  rep.seed = seed;
  return rep;
}

// Probe amplitude such that the spread of beta * g(t) over the grid is
// `dominance` times the base within-group reward std (pilot run, beta = 0).
inline RewardSpec calibrate_probe(RewardSpec spec, const VectorFieldParams& params,
                                  const NoiseSchedule& s, std::size_t group_size,
                                  std::size_t pilot_groups, std::uint64_t seed,
                                  double cfg_scale, double dominance) {
  spec.kind = RewardKind::kTimeProbe;
  spec.probe_amplitude = 0.0;
  const VerificationReport pilot =
      variance_decomposition(spec, params, s, group_size, pilot_groups, seed, cfg_scale);
  const double base_std = std::sqrt(pilot.measured.at("iso_variance"));
  std::vector<double> g;
  for (std::size_t k : s.eligible_steps()) g.push_back(spec.probe(s.step_time(k)));
  const double g_std = std::sqrt(population_variance(g));
  if (!(base_std > 0.0) || !(g_std > 0.0)) {
    throw NumericError("calibrate_probe: degenerate pilot variance");
  }
  spec.probe_amplitude = dominance * base_std / g_std;
  return spec;
}

// ---------------------------------------------------------------------------
// Two-sample energy-distance permutation test.

struct EnergyStatistic {
  double statistic = 0.0;
  double p_value = 1.0;
};

namespace detail {

// Pairwise distances of the pooled sample, condensed upper triangle.
class PairwiseDistances {
 public:
  explicit PairwiseDistances(const Tensor& pooled) : n_(pooled.rows()) {
    const std::size_t d = pooled.cols();
    dist_.resize(n_ * (n_ - 1) / 2);
    std::size_t k = 0;
    for (std::size_t i = 0; i < n_; ++i) {
      const double* a = pooled.data() + i * d;
      for (std::size_t j = i + 1; j < n_; ++j) {
        const double* b = pooled.data() + j * d;
        double acc = 0.0;
        for (std::size_t m = 0; m < d; ++m) acc += (a[m] - b[m]) * (a[m] - b[m]);
        dist_[k++] = static_cast<float>(std::sqrt(acc));
      }
    }
  }

  // Energy statistic (V-statistic form) for a 0/1 labelling.
  double statistic(const std::vector<float>& label, std::size_t n_a, std::size_t n_b) const {
    double same_a = 0.0;
    double same_b = 0.0;
    double total = 0.0;
    std::size_t k = 0;
    for (std::size_t i = 0; i < n_; ++i) {
      double row_total = 0.0;
      double row_b = 0.0;
      for (std::size_t j = i + 1; j < n_; ++j, ++k) {
        const float dij = dist_[k];
        row_total += dij;
        row_b += dij * label[j];
      }
      total += row_total;
      if (label[i] == 0.0f) {
        same_a += row_total - row_b;
      } else {
        same_b += row_b;
      }
    }
    const double cross = total - same_a - same_b;
    const double na = static_cast<double>(n_a);
    const double nb = static_cast<double>(n_b);
    return 2.0 * cross / (na * nb) - 2.0 * same_a / (na * na) - 2.0 * same_b / (nb * nb);
  }

 private:
  std::size_t n_;
  std::vector<float> dist_;
};

}  // namespace detail

// Samples are rows of [n, d] tensors.
inline EnergyStatistic energy_distance(const Tensor& a, const Tensor& b,
                                       std::size_t n_permutations, std::uint64_t seed) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw ConfigError("energy_distance: samples must be [n, d] with equal d");
  }
  if (a.rows() < 256 || b.rows() < 256) {
    throw ConfigError("energy_distance: need at least 256 samples per set");
  }
  std::vector<double> pooled_values(a.values().begin(), a.values().end());
  pooled_values.insert(pooled_values.end(), b.values().begin(), b.values().end());
  const Tensor pooled = Tensor::matrix(a.rows() + b.rows(), a.cols(), std::move(pooled_values));
  const detail::PairwiseDistances dist(pooled);
  std::vector<float> label(pooled.rows(), 0.0f);
  for (std::size_t i = a.rows(); i < label.size(); ++i) label[i] = 1.0f;
  EnergyStatistic out;
  out.statistic = dist.statistic(label, a.rows(), b.rows());
  Rng rng = make_stream(seed, {0xED});
  std::size_t exceed = 0;
  for (std::size_t p = 0; p < n_permutations; ++p) {
    for (std::size_t j = label.size(); j > 1; --j) {
      std::swap(label[j - 1], label[uniform_index(rng, 0, j - 1)]);
    }
    if (dist.statistic(label, a.rows(), b.rows()) >= out.statistic) ++exceed;
  }
  out.p_value = static_cast<double>(1 + exceed) / static_cast<double>(1 + n_permutations);
  return out;
}

inline VerificationReport energy_distance_test(const Tensor& a, const Tensor& b,
                                               std::size_t n_permutations, double alpha,
                                               std::uint64_t seed,
                                               std::string name = "energy_distance") {
  const EnergyStatistic e = energy_distance(a, b, n_permutations, seed);
  VerificationReport rep;
  rep.name = std::move(name);
  rep.passed = e.p_value > alpha;
  rep.measured["statistic"] = e.statistic;
  rep.measured["p_value"] = e.p_value;
  rep.tolerance = alpha;
  rep.samples["n_a"] = a.rows();
  rep.samples["n_b"] = b.rows();
  rep.samples["permutations"] = n_permutations;
  rep.seed = seed;
  return rep;
}

// Terminal samples of n rollouts per class from shared initial noise.
inline Tensor terminal_samples(const VectorFieldParams& params, const NoiseSchedule& s,
                               Condition c, double cfg_scale, std::size_t n, RolloutKind kind,
                               std::uint64_t seed) {
  Rng noise = make_stream(seed, {0x5A, static_cast<std::uint64_t>(kind)});
  std::vector<Tensor> x_init;
  std::vector<Rng> rngs;
  std::vector<RolloutPlan> plans;
  for (std::size_t i = 0; i < n; ++i) {
    x_init.push_back(normal_tensor(noise, {params.arch.data_dim}));
    rngs.push_back(make_stream(seed, {0x5B, i}));
    switch (kind) {
      case RolloutKind::kOde: plans.push_back(RolloutPlan::ode(s)); break;
      case RolloutKind::kFullSde: plans.push_back(RolloutPlan::full(s)); break;
      case RolloutKind::kFirstHalfSde: plans.push_back(RolloutPlan::first_half(s)); break;
      case RolloutKind::kSingle: throw ContractError("terminal_samples: single needs a step");
    }
  }
  const auto trs = rollout_group(params, x_init, s, plans, c, cfg_scale, rngs);
  std::vector<Tensor> finals;
  for (const auto& tr : trs) finals.push_back(tr.final_sample);
  return stack_rows(finals);
}

}  // namespace flashgrpo::oracle
