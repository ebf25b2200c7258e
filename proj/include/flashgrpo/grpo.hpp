// SPDX-License-Identifier: Apache-2.0
#pragma once

// Group-relative policy optimization over SDE transitions.
//
// Three update rules share one surrogate builder:
//   flash     - one SDE step per rollout, shared by the whole group, advantage
//               divided by lambda(t_k) before the clipped surrogate;
//   fast1     - one SDE step per rollout drawn independently, no rectification;
//   flowgrpo  - SDE at every (or every first-half) step, uniform 1/(G T_sup).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flashgrpo/diffkit.hpp"
#include "flashgrpo/errors.hpp"
#include "flashgrpo/flowmodel.hpp"
#include "flashgrpo/group.hpp"
#include "flashgrpo/log.hpp"
#include "flashgrpo/rewards.hpp"
#include "flashgrpo/rng.hpp"
#include "flashgrpo/sampler.hpp"
#include "flashgrpo/schedule.hpp"
#include "json.hpp"

namespace flashgrpo {

inline constexpr double kDegenerateStd = 1e-8;
inline constexpr double kRatioExponentClamp = 30.0;

enum class Method { kFlash, kFlowGrpoFull, kFlowGrpoHalf, kFast1 };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::kFlash: return "flash";
    case Method::kFlowGrpoFull: return "flowgrpo-full";
    case Method::kFlowGrpoHalf: return "flowgrpo-half";
    case Method::kFast1: return "fast1";
  }
  return "?";
}

inline Method parse_method(std::string_view name) {
  if (name == "flash") return Method::kFlash;
  if (name == "flowgrpo-full") return Method::kFlowGrpoFull;
  if (name == "flowgrpo-half") return Method::kFlowGrpoHalf;
  if (name == "fast1") return Method::kFast1;
  throw ConfigError("unknown method '" + std::string(name) +
                    "' (expected flash, flowgrpo-full, flowgrpo-half, fast1)");
}

// ---------------------------------------------------------------------------
// Timestep assignment

// Splits the eligible steps into B contiguous strata, draws one step inside
// each and hands the strata to prompts in random order.
inline TimestepAssignment assign_timesteps_iso(std::size_t prompts,
                                               const NoiseSchedule& s, Rng& rng) {
  const std::vector<std::size_t> eligible = s.eligible_steps();
  const std::size_t e = eligible.size();
  if (prompts < 1) throw ConfigError("grpo.prompts_per_batch: must be >= 1");
  if (prompts > e) {
    throw ConfigError("grpo.prompts_per_batch: " + std::to_string(prompts) +
                      " exceeds the " + std::to_string(e) + " eligible steps");
  }
  std::vector<std::size_t> draws(prompts);
  for (std::size_t j = 0; j < prompts; ++j) {
    const std::size_t lo = j * e / prompts;
    const std::size_t hi = (j + 1) * e / prompts - 1;
    draws[j] = eligible[uniform_index(rng, lo, hi)];
  }
  for (std::size_t j = prompts; j > 1; --j) {
    std::swap(draws[j - 1], draws[uniform_index(rng, 0, j - 1)]);
  }
  TimestepAssignment a{GroupingMode::kIso, {}};
  for (std::size_t k : draws) a.steps.push_back({k});
  return a;
}

// Every rollout draws its own step uniformly.
inline TimestepAssignment assign_timesteps_naive(std::size_t prompts,
                                                 std::size_t group_size,
                                                 const NoiseSchedule& s, Rng& rng) {
  if (prompts < 1 || group_size < 1) throw ConfigError("assign_timesteps_naive: empty batch");
  const std::vector<std::size_t> eligible = s.eligible_steps();
  TimestepAssignment a{GroupingMode::kNaive, {}};
  for (std::size_t b = 0; b < prompts; ++b) {
    std::vector<std::size_t> row(group_size);
    for (auto& k : row) k = eligible[uniform_index(rng, 0, eligible.size() - 1)];
    a.steps.push_back(std::move(row));
  }
  return a;
}

// Deterministic window of size one: every rollout of iteration `it` uses the
// same step, walking from high noise to low noise.
inline TimestepAssignment assign_timesteps_sliding(std::size_t prompts,
                                                   std::size_t group_size,
                                                   const NoiseSchedule& s,
                                                   std::size_t iteration) {
  const std::vector<std::size_t> eligible = s.eligible_steps();
  const std::size_t k = eligible[eligible.size() - 1 - iteration % eligible.size()];
  TimestepAssignment a{GroupingMode::kNaive, {}};
  for (std::size_t b = 0; b < prompts; ++b) a.steps.emplace_back(group_size, k);
  return a;
}

// ---------------------------------------------------------------------------
// Advantages, ratios, surrogate

// (R - mean) / std with population std. Groups whose std falls below
// max(1e-8, std_floor) carry no signal and get all-zero advantages.
inline std::vector<double> compute_advantages(std::span<const double> rewards,
                                              double std_floor) {
  if (rewards.size() < 2) throw ContractError("compute_advantages: group size must be >= 2");
  if (!(std_floor >= 0.0)) throw ConfigError("grpo.std_floor: must be >= 0");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> adv(rewards.size(), 0.0);
  if (!(sd >= std::max(kDegenerateStd, std_floor))) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

inline double clamp_log_ratio(double diff) {
  if (diff > kRatioExponentClamp || diff < -kRatioExponentClamp) {
    warn("policy ratio exponent " + std::to_string(diff) + " clamped to +-30");
    return std::clamp(diff, -kRatioExponentClamp, kRatioExponentClamp);
  }
  return diff;
}

inline double policy_ratio(double logp_new, double logp_old) {
  return std::exp(clamp_log_ratio(logp_new - logp_old));
}

inline double clipped_surrogate(double ratio, double adv, double eps_clip) {
  if (!(eps_clip > 0.0)) throw ConfigError("grpo.clip_epsilon: must be > 0");
  const double clipped = std::clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip);
  return std::min(ratio * adv, clipped * adv);
}

// Single-sample estimate of beta KL(pi_theta || pi_ref).
inline double kl_penalty(double logp_new, double logp_ref, double beta) {
  if (!(beta >= 0.0)) throw ConfigError("grpo.kl_beta: must be >= 0");
  if (beta == 0.0) return 0.0;
  return beta * (logp_new - logp_ref);
}

// ---------------------------------------------------------------------------
// Losses

struct LossOptions {
  double clip_epsilon = 1e-3;
  double kl_beta = 0.0;
  double cfg_scale = 4.5;
  const VectorFieldParams* reference = nullptr;  // required when kl_beta > 0
};

struct PolicyLoss {
  diffkit::Graph graph;
  ParamNodes params;
  diffkit::NodeId loss = 0;
  double value = 0.0;
  std::size_t kernel_evaluations = 0;  // transition kernels in the graph
  std::size_t clipped_terms = 0;
  double lambda_min = std::numeric_limits<double>::infinity();
  double lambda_max = 0.0;
  std::vector<double> ratios;          // value of every supervised ratio
  std::vector<double> effective_ratios;  // ratio after the min/clip selection
};

enum class FlowGrpoMode { kFull, kFirstHalf };

namespace detail {

enum class Supervision { kSingle, kFull, kFirstHalf };

inline void check_supervision(const RolloutGroup& group, const NoiseSchedule& s,
                              Supervision sup, bool require_iso) {
  if (group.size() < 1) throw ContractError("policy loss: empty group");
  if (group.advantages.size() != group.size()) {
    throw ContractError("policy loss: advantages missing for group");
  }
  if (require_iso) {
    if (group.mode != GroupingMode::kIso || !group.shared_step() ||
        group.steps.size() != group.size()) {
      throw ContractError("flash_loss: group is not iso-temporal");
    }
  }
  for (std::size_t i = 0; i < group.size(); ++i) {
    const Trajectory& tr = group.trajectories[i];
    switch (sup) {
      case Supervision::kSingle: {
        const TransitionRecord& rec = tr.single_record();
        if (!group.steps.empty() && rec.step != group.steps.at(i)) {
          throw ContractError("policy loss: record step differs from assignment");
        }
        break;
      }
      case Supervision::kFull:
        if (tr.records.size() != s.steps()) {
          throw ContractError("flowgrpo_loss: full mode needs " + std::to_string(s.steps()) +
                              " SDE records, trajectory has " +
                              std::to_string(tr.records.size()));
        }
        break;
      case Supervision::kFirstHalf:
        if (tr.records.size() != s.steps() / 2 || tr.kind != RolloutKind::kFirstHalfSde) {
          throw ContractError("flowgrpo_loss: first-half mode needs " +
                              std::to_string(s.steps() / 2) + " SDE records");
        }
        break;
    }
  }
}

inline PolicyLoss build_policy_loss(std::span<const RolloutGroup> groups,
                                    const VectorFieldParams& p,
                                    const NoiseSchedule& s, const LossOptions& o,
                                    Supervision sup, bool rectify) {
  if (groups.empty()) throw ContractError("policy loss: no groups");
  if (!(o.clip_epsilon > 0.0)) throw ConfigError("grpo.clip_epsilon: must be > 0");
  if (!(o.kl_beta >= 0.0)) throw ConfigError("grpo.kl_beta: must be >= 0");
  if (o.kl_beta > 0.0 && o.reference == nullptr) {
    throw ContractError("policy loss: kl_beta > 0 needs reference parameters");
  }
  for (const RolloutGroup& g : groups) check_supervision(g, s, sup, rectify);

  PolicyLoss out;
  diffkit::Graph& g = out.graph;
  out.params = register_params(g, p);
  std::optional<diffkit::NodeId> total;
  const double batch_weight = 1.0 / static_cast<double>(groups.size());
  for (const RolloutGroup& group : groups) {
    for (std::size_t i = 0; i < group.size(); ++i) {
      const Trajectory& tr = group.trajectories[i];
      const double weight =
          batch_weight / (static_cast<double>(group.size()) * static_cast<double>(tr.records.size()));
      const double adv = group.advantages[i];
      for (const TransitionRecord& rec : tr.records) {
        const auto x = g.constant(rec.x_t);
        const auto mu = transition_mean(g, out.params, p, x, rec.t, rec.dt, group.cond,
                                        rec.sigma, o.cfg_scale);
        const auto logp = transition_log_prob(g, mu, rec.sigma, rec.dt, g.constant(rec.x_next));
        g.mark_kernel(logp);
        ++out.kernel_evaluations;

        const double lam = rectify ? s.lambda(rec.step) : 1.0;
        out.lambda_min = std::min(out.lambda_min, s.lambda(rec.step));
        out.lambda_max = std::max(out.lambda_max, s.lambda(rec.step));
        const double adv_eff = adv / lam;

        const double diff = g.value(logp).item() - rec.logp_old;
        diffkit::NodeId ratio;
        if (std::abs(diff) <= kRatioExponentClamp) {
          ratio = g.exp(g.shift(logp, -rec.logp_old));
        } else {
          ratio = g.constant(Tensor::scalar(std::exp(clamp_log_ratio(diff))));
        }
        const double r = g.value(ratio).item();
        out.ratios.push_back(r);
        const double clipped_r = std::clamp(r, 1.0 - o.clip_epsilon, 1.0 + o.clip_epsilon);
        diffkit::NodeId term;
        if (r * adv_eff <= clipped_r * adv_eff) {
          term = g.scale(ratio, adv_eff);
          out.effective_ratios.push_back(r);
        } else {
          term = g.constant(Tensor::scalar(clipped_r * adv_eff));
          out.effective_ratios.push_back(clipped_r);
          ++out.clipped_terms;
        }
        if (o.kl_beta > 0.0) {
          const Tensor mu_ref = transition_mean(*o.reference, rec.x_t, rec.t, rec.dt,
                                                group.cond, rec.sigma, o.cfg_scale);
          const double logp_ref = transition_log_prob(mu_ref, rec.sigma, rec.dt, rec.x_next);
          term = g.sub(term, g.scale(g.shift(logp, -logp_ref), o.kl_beta));
        }
        const auto weighted = g.scale(term, weight);
        total = total ? g.add(*total, weighted) : weighted;
      }
    }
  }
  out.loss = g.scale(*total, -1.0);
  out.value = g.value(out.loss).item();
  return out;
}

}  // namespace detail

// Rectified single-step loss on iso-temporal groups:
// -(1/B) sum_b (1/G) sum_i min(r A/lambda, clip(r) A/lambda) (+ KL).
inline PolicyLoss flash_loss(std::span<const RolloutGroup> groups,
                             const VectorFieldParams& p, const NoiseSchedule& s,
                             const LossOptions& o) {
  return detail::build_policy_loss(groups, p, s, o, detail::Supervision::kSingle, true);
}

inline PolicyLoss flowgrpo_loss(std::span<const RolloutGroup> groups,
                                const VectorFieldParams& p, const NoiseSchedule& s,
                                const LossOptions& o, FlowGrpoMode mode) {
  return detail::build_policy_loss(
      groups, p, s, o,
      mode == FlowGrpoMode::kFull ? detail::Supervision::kFull : detail::Supervision::kFirstHalf,
      false);
}

inline PolicyLoss fast1_loss(std::span<const RolloutGroup> groups,
                             const VectorFieldParams& p, const NoiseSchedule& s,
                             const LossOptions& o) {
  return detail::build_policy_loss(groups, p, s, o, detail::Supervision::kSingle, false);
}

inline PolicyLoss policy_loss(Method m, std::span<const RolloutGroup> groups,
                              const VectorFieldParams& p, const NoiseSchedule& s,
                              const LossOptions& o) {
  switch (m) {
    case Method::kFlash: return flash_loss(groups, p, s, o);
    case Method::kFlowGrpoFull: return flowgrpo_loss(groups, p, s, o, FlowGrpoMode::kFull);
    case Method::kFlowGrpoHalf: return flowgrpo_loss(groups, p, s, o, FlowGrpoMode::kFirstHalf);
    case Method::kFast1: return fast1_loss(groups, p, s, o);
  }
  throw ContractError("policy_loss: unknown method");
}

// ---------------------------------------------------------------------------
// Optimization step

struct MetricsRecord {
  std::size_t iteration = 0;
  std::string method;
  double mean_reward = 0.0;
  std::optional<double> eval_reward;
  double grad_norm = 0.0;
  double loss = 0.0;
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  std::size_t kernel_evaluations = 0;
  std::uint64_t backward_passes_cumulative = 0;
  double wall_ms = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"iter", iteration},
                     {"method", method},
                     {"mean_reward", mean_reward},
                     {"grad_norm", grad_norm},
                     {"loss", loss},
                     {"lambda_min", lambda_min},
                     {"lambda_max", lambda_max},
                     {"backward_passes_cumulative", backward_passes_cumulative},
                     {"wall_ms", wall_ms}};
    if (eval_reward) j["eval_reward"] = *eval_reward;
    return j;
  }

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

inline MetricsRecord train_step(VectorFieldParams& params, Adam& optimizer,
                                std::span<const RolloutGroup> groups, Method method,
                                const NoiseSchedule& s, const LossOptions& o,
                                std::size_t iteration) {
  const auto start = std::chrono::steady_clock::now();
  PolicyLoss loss = policy_loss(method, groups, params, s, o);
  if (!std::isfinite(loss.value)) {
    throw NumericError("train_step: non-finite loss at iteration " + std::to_string(iteration));
  }
  const diffkit::GradientSet grads = diffkit::backward(loss.graph, loss.loss);
  const double norm = grads.l2_norm();
  if (!std::isfinite(norm)) {
    throw NumericError("train_step: non-finite gradient at iteration " +
                       std::to_string(iteration) + " (loss " + std::to_string(loss.value) +
                       ", lambda range [" + std::to_string(loss.lambda_min) + ", " +
                       std::to_string(loss.lambda_max) + "])");
  }
  optimizer.step(params.tensors, grads);

  MetricsRecord m;
  m.iteration = iteration;
  m.method = to_string(method);
  double reward_sum = 0.0;
  std::size_t reward_count = 0;
  for (const RolloutGroup& g : groups) {
    for (double r : g.rewards) {
      reward_sum += r;
      ++reward_count;
    }
  }
  m.mean_reward = reward_count ? reward_sum / static_cast<double>(reward_count) : 0.0;
  m.grad_norm = norm;
  m.loss = loss.value;
  m.lambda_min = loss.lambda_min;
  m.lambda_max = loss.lambda_max;
  m.kernel_evaluations = loss.kernel_evaluations;
  m.backward_passes_cumulative = diffkit::counters().kernel_gradients.load();
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                  .count();
  return m;
}

// ---------------------------------------------------------------------------
// Alignment loop

struct AlignConfig {
  Method method = Method::kFlash;
  std::size_t group_size = 8;
  std::size_t prompts_per_batch = 4;
  double clip_epsilon = 1e-3;
  double kl_beta = 0.0;
  double cfg_scale = 4.5;
  double learning_rate = 1e-4;
  double std_floor = 1e-4;
  bool fast1_sliding = false;

  void validate(const NoiseSchedule& s) const {
    if (group_size < 2) throw ConfigError("grpo.group_size: must be >= 2");
    if (prompts_per_batch < 1) throw ConfigError("grpo.prompts_per_batch: must be >= 1");
    if (method == Method::kFlash && prompts_per_batch > s.eligible_steps().size()) {
      throw ConfigError("grpo.prompts_per_batch: exceeds eligible step count");
    }
    if (!(clip_epsilon > 0.0)) throw ConfigError("grpo.clip_epsilon: must be > 0");
    if (!(kl_beta >= 0.0)) throw ConfigError("grpo.kl_beta: must be >= 0");
    if (!(cfg_scale >= 0.0)) throw ConfigError("grpo.cfg_scale: must be >= 0");
    if (!(learning_rate >= 0.0)) throw ConfigError("grpo.learning_rate: must be >= 0");
    if (!(std_floor >= 0.0)) throw ConfigError("grpo.std_floor: must be >= 0");
  }
};

struct EvalConfig {
  std::size_t samples_per_class = 256;
  std::size_t steps = 50;
};

// Mean mode-preference reward of deterministic samples from fixed held-out
// noise, averaged over classes.
inline double evaluate_policy(const VectorFieldParams& p, const RewardSpec& reward_spec,
                              const NoiseSchedule& eval_schedule, double cfg_scale,
                              std::size_t samples_per_class, std::uint64_t seed) {
  RewardSpec base = reward_spec;
  base.kind = RewardKind::kModePreference;
  double total = 0.0;
  const std::size_t classes = p.arch.num_classes;
  for (std::size_t c = 0; c < classes; ++c) {
    Rng rng = make_stream(seed, {0xE7A1, c});
    const Tensor x_init = normal_tensor(rng, {samples_per_class, p.arch.data_dim});
    const Tensor x0 = sample_ode(p, x_init, eval_schedule, Condition::of(c), cfg_scale);
    double sum = 0.0;
    for (std::size_t r = 0; r < samples_per_class; ++r) {
      sum += reward(base, row_tensor(x0, r), Condition::of(c), 0.0);
    }
    total += sum / static_cast<double>(samples_per_class);
  }
  return total / static_cast<double>(classes);
}

// Owns the policy, optimizer and sampling streams of one alignment run.
class Aligner {
 public:
  Aligner(VectorFieldParams initial, AlignConfig cfg, RewardSpec reward_spec,
          NoiseSchedule schedule, std::uint64_t seed)
      : params_(initial),
        reference_(std::move(initial)),
        cfg_(cfg),
        reward_(std::move(reward_spec)),
        schedule_(std::move(schedule)),
        seed_(seed),
        optimizer_(AdamConfig{cfg.learning_rate}, params_.tensors) {
    cfg_.validate(schedule_);
    reward_.validate();
    if (reward_.preferred_means.size() != params_.arch.num_classes) {
      throw ConfigError("reward: preferred means do not match the class count");
    }
  }

  // Rollouts, rewards and advantages for one iteration (Algorithm-1 sampling).
  std::vector<RolloutGroup> collect(std::size_t iteration) const {
    const std::size_t B = cfg_.prompts_per_batch;
    const std::size_t G = cfg_.group_size;
    const std::size_t d = params_.arch.data_dim;
    Rng rng = make_stream(seed_, {1, iteration});
    std::vector<std::size_t> classes(B);
    for (auto& c : classes) c = uniform_index(rng, 0, params_.arch.num_classes - 1);

    std::optional<TimestepAssignment> assignment;
    switch (cfg_.method) {
      case Method::kFlash:
        assignment = assign_timesteps_iso(B, schedule_, rng);
        break;
      case Method::kFast1:
        assignment = cfg_.fast1_sliding ? assign_timesteps_sliding(B, G, schedule_, iteration)
                                        : assign_timesteps_naive(B, G, schedule_, rng);
        break;
      default:
        break;
    }

    // All B*G rollouts advance in one batch; noise streams stay per (b, i).
    std::vector<RolloutGroup> groups(B);
    std::vector<RolloutPlan> plans;
    std::vector<Condition> conds;
    std::vector<Tensor> x_init;
    std::vector<Rng> rngs;
    for (std::size_t b = 0; b < B; ++b) {
      RolloutGroup& group = groups[b];
      group.cond = Condition::of(classes[b]);
      if (cfg_.method == Method::kFlash) {
        group.mode = GroupingMode::kIso;
        group.steps.assign(G, assignment->steps[b].front());
      } else if (cfg_.method == Method::kFast1) {
        group.mode = GroupingMode::kNaive;
        group.steps = assignment->steps[b];
      } else {
        group.mode = GroupingMode::kTrajectory;
      }
      Rng noise = make_stream(seed_, {2, iteration, b});
      for (std::size_t i = 0; i < G; ++i) {
        if (cfg_.method == Method::kFlowGrpoFull) {
          plans.push_back(RolloutPlan::full(schedule_));
        } else if (cfg_.method == Method::kFlowGrpoHalf) {
          plans.push_back(RolloutPlan::first_half(schedule_));
        } else {
          plans.push_back(RolloutPlan::single(schedule_, group.steps[i]));
        }
        conds.push_back(group.cond);
        x_init.push_back(normal_tensor(noise, {d}));
        rngs.push_back(make_stream(seed_, {3, iteration, b, i}));
      }
    }
    std::vector<Trajectory> all =
        rollout_group(params_, x_init, schedule_, plans, conds, cfg_.cfg_scale, rngs);
    for (std::size_t b = 0; b < B; ++b) {
      RolloutGroup& group = groups[b];
      group.trajectories.assign(std::make_move_iterator(all.begin() + b * G),
                                std::make_move_iterator(all.begin() + (b + 1) * G));
      evaluate_group(reward_, group);
      group.advantages = compute_advantages(group.rewards, cfg_.std_floor);
    }
    return groups;
  }

  MetricsRecord step() {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<RolloutGroup> groups = collect(iteration_);
    LossOptions o{cfg_.clip_epsilon, cfg_.kl_beta, cfg_.cfg_scale,
                  cfg_.kl_beta > 0.0 ? &reference_ : nullptr};
    MetricsRecord m = train_step(params_, optimizer_, groups, cfg_.method, schedule_, o, iteration_);
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                    .count();
    ++iteration_;
    return m;
  }

  const VectorFieldParams& params() const { return params_; }
  const VectorFieldParams& reference() const { return reference_; }
  const AlignConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const RewardSpec& reward_spec() const { return reward_; }
  std::size_t iteration() const { return iteration_; }

 private:
  VectorFieldParams params_;
  VectorFieldParams reference_;
  AlignConfig cfg_;
  RewardSpec reward_;
  NoiseSchedule schedule_;
  std::uint64_t seed_;
  Adam optimizer_;
  std::size_t iteration_ = 0;
};

}  // namespace flashgrpo
