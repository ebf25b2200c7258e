// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "flashgrpo/errors.hpp"
#include "flashgrpo/flowmodel.hpp"
#include "flashgrpo/group.hpp"
#include "flashgrpo/tensor.hpp"

namespace flashgrpo {

enum class RewardKind { kModePreference, kTimeProbe };

// g(t) for the probe reward.
enum class ProbeShape { kLinear, kComplement };

struct RewardSpec {
  RewardKind kind = RewardKind::kModePreference;
  std::vector<std::vector<double>> preferred_means;  // one per class
  double gamma = 0.5;
  double probe_amplitude = 0.0;
  ProbeShape probe_shape = ProbeShape::kLinear;

  void validate() const {
    if (preferred_means.empty()) throw ConfigError("reward: no preferred means");
    if (!(gamma > 0.0)) throw ConfigError("reward.gamma: must be > 0");
    if (!(probe_amplitude >= 0.0)) throw ConfigError("reward.probe_amplitude: must be >= 0");
  }

  double probe(double t) const {
    return probe_shape == ProbeShape::kLinear ? t : 1.0 - t;
  }

  // Supremum of the mode-preference part, reached at x0 = preferred mean.
  static constexpr double optimum() { return 1.0; }
};

inline RewardSpec reward_spec_from(const DataSpec& data, double gamma) {
  RewardSpec spec;
  for (std::size_t c = 0; c < data.num_classes(); ++c) {
    spec.preferred_means.push_back(data.preferred_mean(c));
  }
  spec.gamma = gamma;
  return spec;
}

inline double reward(const RewardSpec& spec, const Tensor& x0, Condition c,
                     double t_used) {
  if (c.unconditional() || c.class_id() >= spec.preferred_means.size()) {
    throw LookupError("reward: unknown class " + c.to_string());
  }
  const auto& target = spec.preferred_means[c.class_id()];
  if (target.size() != x0.size()) throw DimensionError("reward: sample dimension mismatch");
  const double base = std::exp(-spec.gamma * squared_distance(x0.values(), target));
  if (spec.kind == RewardKind::kModePreference) return base;
  return base + spec.probe_amplitude * spec.probe(t_used);
}

// Transition time a trajectory's reward is attributed to (probe kind only).
inline double transition_time(const Trajectory& tr) {
  return tr.single_record().t;
}

inline std::vector<double> evaluate_trajectories(const RewardSpec& spec,
                                                 std::span<const Trajectory> trs) {
  std::vector<double> out;
  out.reserve(trs.size());
  for (const Trajectory& tr : trs) {
    const double t = spec.kind == RewardKind::kTimeProbe ? transition_time(tr) : 0.0;
    out.push_back(reward(spec, tr.final_sample, tr.cond, t));
  }
  return out;
}

inline const std::vector<double>& evaluate_group(const RewardSpec& spec,
                                                 RolloutGroup& group) {
  group.rewards = evaluate_trajectories(spec, group.trajectories);
  return group.rewards;
}

}  // namespace flashgrpo
