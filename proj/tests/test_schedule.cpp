#include <gtest/gtest.h>

#include <cmath>

#include "flashgrpo/schedule.hpp"

using namespace flashgrpo;

TEST(LambdaOf, HandValues) {
  EXPECT_EQ(lambda_of(1.0, 0.04, 0.2), std::sqrt(0.04) / 0.2);
  EXPECT_NEAR(lambda_of(1.0, 0.04, 0.2), 1.0, 1e-15);
  EXPECT_NEAR(lambda_of(0.5, 0.05, 0.3), 0.778897, 1e-6);
}

TEST(LambdaOf, QuadruplingStepDoublesLambda) {
  for (double t : {0.05, 0.3, 0.77, 1.0}) {
    for (double dt : {1e-3, 0.05}) {
      EXPECT_EQ(lambda_of(t, 4.0 * dt, 0.4), 2.0 * lambda_of(t, dt, 0.4));
    }
  }
}

TEST(LambdaOf, DomainErrors) {
  EXPECT_THROW(lambda_of(0.0, 0.05, 0.3), DomainError);
  EXPECT_THROW(lambda_of(-0.1, 0.05, 0.3), DomainError);
  EXPECT_THROW(lambda_of(0.5, 0.0, 0.3), DomainError);
  EXPECT_THROW(lambda_of(0.5, 0.05, 0.0), DomainError);
}

TEST(MakeSchedule, GridShape) {
  const NoiseSchedule s = make_schedule(20, 0.7, 1e-3);
  EXPECT_EQ(s.steps(), 20u);
  ASSERT_EQ(s.grid().size(), 21u);
  EXPECT_EQ(s.time(20), 1.0);
  EXPECT_EQ(s.time(0), 1e-3);
  double total = 0.0;
  for (std::size_t i = 1; i <= 20; ++i) {
    EXPECT_GT(s.time(i), s.time(i - 1));
    EXPECT_GT(s.dt(i), 0.0);
    total += s.dt(i);
  }
  EXPECT_NEAR(total, 1.0 - 1e-3, 1e-14);
  EXPECT_EQ(s.terminal_dt(), s.t_floor());
}

TEST(MakeSchedule, StoredValuesMatchFormulas) {
  const NoiseSchedule s = make_schedule(20, 0.7, 1e-3);
  for (std::size_t i = 1; i <= 20; ++i) {
    const double t = s.step_time(i);
    const double sigma = sigma_of(std::min(t, s.sigma_time_cap()), 0.7);
    EXPECT_EQ(s.sigma(i), sigma);
    EXPECT_EQ(s.lambda(i), lambda_of(t, s.dt(i), sigma));
    EXPECT_TRUE(std::isfinite(s.lambda(i)));
  }
  EXPECT_EQ(s.sigma_time_cap(), s.time(19));
}

TEST(MakeSchedule, LambdaVariesStronglyAcrossSteps) {
  const auto [lo, hi] = make_schedule(20, 0.7, 1e-3).lambda_range();
  EXPECT_GT(hi / lo, 3.0);
  EXPECT_NEAR(lo, 0.0732, 1e-3);
  EXPECT_NEAR(hi, 1.7156, 1e-3);
}

TEST(MakeSchedule, Steps) {
  const NoiseSchedule s = make_schedule(20, 0.7, 1e-3);
  const auto eligible = s.eligible_steps();
  ASSERT_EQ(eligible.size(), 20u);
  EXPECT_EQ(eligible.front(), 1u);
  EXPECT_EQ(eligible.back(), 20u);
  const auto half = s.first_half_steps();
  ASSERT_EQ(half.size(), 10u);
  EXPECT_EQ(half.front(), 20u);
  EXPECT_EQ(half.back(), 11u);
  EXPECT_THROW(s.lambda(0), ContractError);
  EXPECT_THROW(s.dt(21), ContractError);
}

TEST(MakeSchedule, InvalidRanges) {
  EXPECT_THROW(make_schedule(1, 0.7, 1e-3), ConfigError);
  EXPECT_THROW(make_schedule(20, 0.0, 1e-3), ConfigError);
  EXPECT_THROW(make_schedule(20, -1.0, 1e-3), ConfigError);
  EXPECT_THROW(make_schedule(20, 0.7, 0.0), ConfigError);
  EXPECT_THROW(make_schedule(20, 0.7, 0.06), ConfigError);
}

TEST(MakeSchedule, LambdaOverride) {
  const NoiseSchedule s = make_schedule(20, 0.7, 1e-3).with_lambda(1.0);
  EXPECT_TRUE(s.lambda_overridden());
  for (std::size_t i = 1; i <= 20; ++i) EXPECT_EQ(s.lambda(i), 1.0);
  EXPECT_THROW(s.with_lambda(0.0), ConfigError);
}
