// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "flashgrpo/flowmodel.hpp"
#include "flashgrpo/sampler.hpp"

namespace flashgrpo {

// kIso: every rollout transitions at the group's shared step.
// kNaive: each rollout draws its own step.
// kTrajectory: SDE at all (or the first half of the) steps.
enum class GroupingMode { kIso, kNaive, kTrajectory };

struct RolloutGroup {
  Condition cond = Condition::uncond();
  GroupingMode mode = GroupingMode::kIso;
  std::vector<std::size_t> steps;  // per rollout; empty for kTrajectory
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;

  std::size_t size() const { return trajectories.size(); }

  std::optional<std::size_t> shared_step() const {
    if (steps.empty()) return std::nullopt;
    for (std::size_t s : steps) {
      if (s != steps.front()) return std::nullopt;
    }
    return steps.front();
  }
};

// Per prompt: one step (iso) or one step per rollout (naive).
struct TimestepAssignment {
  GroupingMode mode = GroupingMode::kIso;
  std::vector<std::vector<std::size_t>> steps;
};

}  // namespace flashgrpo
