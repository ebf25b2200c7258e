#include <gtest/gtest.h>

#include <cmath>

#include "flashgrpo/oracle.hpp"

using namespace flashgrpo;

namespace {

Architecture small_arch() {
  Architecture a;
  a.hidden_width = 16;
  a.depth = 2;
  return a;
}

Tensor normal_rows(std::uint64_t seed, std::size_t n, double shift) {
  Rng rng = make_stream(seed, {});
  Tensor t = normal_tensor(rng, {n, 1});
  for (double& v : t.values()) v += shift;
  return t;
}

}  // namespace

TEST(RelativeError, Basics) {
  EXPECT_EQ(oracle::relative_error(1.0, 1.0), 0.0);
  EXPECT_EQ(oracle::relative_error(0.0, 0.0), 0.0);
  EXPECT_NEAR(oracle::relative_error(1.0, 2.0), 0.5, 1e-15);
  EXPECT_NEAR(oracle::relative_error(1e-9, 0.0, 1e-6), 1e-3, 1e-15);
}

TEST(GradIdentity, LinearVelocityHoldsExactly) {
  // v = W x with W a 2x2 leaf: eps . dv/dW is eps x^T in closed form.
  const Tensor w = Tensor::matrix(2, 2, {0.3, -1.2, 0.8, 0.5});
  const Tensor zero_bias = Tensor::vector({0.0, 0.0});
  oracle::VelocityProbe probe;
  probe.param_scalars = 4;
  probe.velocity = [&](diffkit::Graph& g, diffkit::NodeId x, double) {
    return g.affine(x, g.parameter(0, w), g.constant(zero_bias));
  };
  const NoiseSchedule s = make_schedule(20, 0.7, 1e-3);
  Rng rng = make_stream(3, {});
  for (std::size_t k : {1u, 10u, 20u}) {
    const Tensor x = normal_tensor(rng, {2});
    const Tensor eps = normal_tensor(rng, {2});
    std::vector<double> u{1.0, -0.5, 0.25, 2.0};
    const auto r = oracle::grad_identity_trial(probe, x, eps, s.step_time(k), s.dt(k), s.sigma(k),
                                               s.lambda(k), u);
    double closed = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < 2; ++j) closed += u[i * 2 + j] * eps[i] * x[j];
    }
    EXPECT_NEAR(r.predicted, oracle::kScoreSign * s.lambda(k) * closed, 1e-12);
    EXPECT_NEAR(r.autodiff, r.predicted, 1e-10 * std::max(1.0, std::abs(r.autodiff)));
  }
}

TEST(GradIdentity, ModelPasses) {
  const VectorFieldParams p = init_params(5, small_arch());
  const auto rep = oracle::check_grad_identity(p, make_schedule(20, 0.7, 1e-3), 30, 5, 4.5);
  EXPECT_TRUE(rep.passed) << rep.measured.at("max_rel_err");
  EXPECT_LT(rep.measured.at("max_rel_err"), 1e-6);
}

TEST(GradIdentity, DoubledLambdaFaultIsDetected) {
  const VectorFieldParams p = init_params(5, small_arch());
  const auto rep = oracle::check_grad_identity(p, make_schedule(20, 0.7, 1e-3), 10, 5, 4.5, 2.0);
  EXPECT_FALSE(rep.passed);
  EXPECT_NEAR(rep.measured.at("max_rel_err"), 1.0, 1e-6);
}

TEST(RectificationLaw, HoldsOnSmallModel) {
  const VectorFieldParams p = init_params(5, small_arch());
  LossOptions o;
  const auto rep =
      oracle::check_rectification_law(p, p, make_schedule(20, 0.7, 1e-3), 8, 4, 5, o);
  EXPECT_TRUE(rep.passed) << rep.measured.at("max_rel_err");
}

TEST(EnergyDistance, IdenticalSets) {
  const Tensor a = normal_rows(1, 300, 0.0);
  const auto e = oracle::energy_distance(a, a, 50, 1);
  EXPECT_NEAR(e.statistic, 0.0, 1e-9);
  EXPECT_GT(e.p_value, 0.9);
}

TEST(EnergyDistance, NullPassesAndShiftFails) {
  const Tensor a = normal_rows(1, 1024, 0.0);
  const Tensor b = normal_rows(2, 1024, 0.0);
  const Tensor c = normal_rows(3, 1024, 3.0);
  EXPECT_TRUE(oracle::energy_distance_test(a, b, 100, 0.01, 4).passed);
  const auto shifted = oracle::energy_distance_test(a, c, 100, 0.01, 4);
  EXPECT_FALSE(shifted.passed);
  EXPECT_LT(shifted.measured.at("p_value"), 0.01);
}

TEST(EnergyDistance, UndersizedInputIsConfigError) {
  EXPECT_THROW(oracle::energy_distance(normal_rows(1, 100, 0.0), normal_rows(2, 300, 0.0), 10, 1),
               ConfigError);
}

TEST(VarianceDecomposition, NoProbeMeansNoConfounding) {
  const VectorFieldParams p = init_params(5, small_arch());
  RewardSpec spec = reward_spec_from(default_data_spec(), 0.5);
  spec.kind = RewardKind::kTimeProbe;
  spec.probe_amplitude = 0.0;
  const auto rep =
      oracle::variance_decomposition(spec, p, make_schedule(20, 0.7, 1e-3), 8, 300, 5, 4.5);
  const double ratio = rep.measured.at("ratio");
  EXPECT_GT(ratio, 0.8);
  EXPECT_LT(ratio, 1.25);
}

TEST(VarianceDecomposition, DominantProbeInflatesNaiveVariance) {
  const VectorFieldParams p = init_params(5, small_arch());
  const NoiseSchedule s = make_schedule(20, 0.7, 1e-3);
  const RewardSpec probe = oracle::calibrate_probe(reward_spec_from(default_data_spec(), 0.5), p, s,
                                                   8, 100, 9, 4.5, 10.0);
  const auto rep = oracle::variance_decomposition(probe, p, s, 8, 300, 5, 4.5);
  EXPECT_TRUE(rep.passed);
  EXPECT_GT(rep.measured.at("ratio"), 2.0);
  EXPECT_THROW(oracle::variance_decomposition(reward_spec_from(default_data_spec(), 0.5), p, s, 8,
                                              10, 5, 4.5),
               ConfigError);
}

TEST(Report, JsonCarriesFields) {
  oracle::VerificationReport r;
  r.name = "x";
  r.passed = true;
  r.measured["err"] = 0.5;
  r.samples["n"] = 3;
  r.seed = 7;
  const auto j = r.to_json();
  EXPECT_EQ(j["check"], "x");
  EXPECT_EQ(j["passed"], true);
  EXPECT_EQ(j["measured"]["err"], 0.5);
  EXPECT_EQ(j["samples"]["n"], 3);
  EXPECT_EQ(j["seed"], 7);
}
