// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "flashgrpo/config.hpp"
#include "flashgrpo/diffkit.hpp"
#include "flashgrpo/errors.hpp"
#include "flashgrpo/flowmodel.hpp"
#include "flashgrpo/group.hpp"
#include "flashgrpo/grpo.hpp"
#include "flashgrpo/log.hpp"
#include "flashgrpo/oracle.hpp"
#include "flashgrpo/rewards.hpp"
#include "flashgrpo/rng.hpp"
#include "flashgrpo/runner.hpp"
#include "flashgrpo/sampler.hpp"
#include "flashgrpo/schedule.hpp"
#include "flashgrpo/tensor.hpp"
