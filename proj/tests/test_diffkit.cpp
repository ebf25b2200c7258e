#include <gtest/gtest.h>

#include <cmath>

#include "flashgrpo/diffkit.hpp"
#include "flashgrpo/oracle.hpp"

using namespace flashgrpo;
using diffkit::Graph;

TEST(Affine, IdentityWeight) {
  const Tensor w = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor y = diffkit::kernels::affine(Tensor::vector({3, 4}), w, Tensor::vector({0, 0}));
  EXPECT_EQ(y[0], 3.0);
  EXPECT_EQ(y[1], 4.0);
}

TEST(Affine, HandSum) {
  const Tensor y = diffkit::kernels::affine(Tensor::vector({2, 3}), Tensor::matrix(1, 2, {1, 1}),
                                            Tensor::vector({1}));
  ASSERT_EQ(y.size(), 1u);
  EXPECT_EQ(y[0], 6.0);
}

TEST(Affine, ShapeMismatchThrows) {
  EXPECT_THROW(diffkit::kernels::affine(Tensor::vector({1, 2, 3}), Tensor::matrix(1, 2, {1, 1}),
                                        Tensor::vector({0})),
               DimensionError);
  Graph g;
  const auto a = g.constant(Tensor::vector({1, 2}));
  const auto b = g.constant(Tensor::vector({1, 2, 3}));
  EXPECT_THROW(g.add(a, b), DimensionError);
}

TEST(Affine, BatchedRowsMatchSingleRows) {
  Rng rng = make_stream(3, {});
  const Tensor w = normal_tensor(rng, {7, 5});
  const Tensor b = normal_tensor(rng, {7});
  const Tensor x = normal_tensor(rng, {6, 5});
  const Tensor batched = diffkit::kernels::affine(x, w, b);
  for (std::size_t r = 0; r < 6; ++r) {
    const Tensor single = diffkit::kernels::affine(row_tensor(x, r), w, b);
    for (std::size_t o = 0; o < 7; ++o) EXPECT_EQ(batched.at(r, o), single[o]);
  }
}

TEST(Affine, RandomGradientMatchesFiniteDifferences) {
  Rng rng = make_stream(11, {});
  const std::vector<Tensor> leaves{normal_tensor(rng, {3}), normal_tensor(rng, {4, 3}),
                                   normal_tensor(rng, {4})};
  const Tensor weights = normal_tensor(rng, {4});
  const auto rep = oracle::check_op_gradient(
      "affine_4x3",
      [&](Graph& g, const std::vector<diffkit::NodeId>& in) {
        return g.sum(g.mul(g.affine(in[0], in[1], in[2]), g.constant(weights)));
      },
      leaves, 1e-5, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.measured.at("max_rel_err");
}

TEST(Tanh, ZeroAndUnitSlope) {
  const Tensor zero = Tensor::vector({0.0});
  Graph g;
  const auto x = g.parameter(0, zero);
  const auto y = g.sum(g.tanh(x));
  EXPECT_EQ(g.value(y).item(), 0.0);
  const auto grads = diffkit::backward(g, y);
  EXPECT_EQ(grads.at(0)[0], 1.0);
}

TEST(Tanh, ScalarKernelTracksStdTanh) {
  double worst = 0.0;
  for (double x = -25.0; x <= 25.0; x += 0.001) {
    const double ref = std::tanh(x);
    const double got = diffkit::kernels::tanh_scalar(x);
    worst = std::max(worst, std::abs(got - ref) / std::max(std::abs(ref), 1e-300));
  }
  EXPECT_LT(worst, 1e-14);
  EXPECT_EQ(diffkit::kernels::tanh_scalar(0.0), 0.0);
}

TEST(Tanh, RandomGradientMatchesFiniteDifferences) {
  Rng rng = make_stream(12, {});
  const Tensor weights = normal_tensor(rng, {9});
  const auto rep = oracle::check_op_gradient(
      "tanh", [&](Graph& g, const std::vector<diffkit::NodeId>& in) {
        return g.sum(g.mul(g.tanh(in[0]), g.constant(weights)));
      },
      {normal_tensor(rng, {9})}, 1e-5, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.measured.at("max_rel_err");
}

TEST(Backward, ConstantOutputGivesZeroGradients) {
  const Tensor p = Tensor::vector({1.0, -2.0});
  Graph g;
  const auto leaf = g.parameter(0, p);
  (void)leaf;
  const auto out = g.sum(g.constant(Tensor::vector({5.0, 6.0})));
  const auto grads = diffkit::backward(g, out);
  ASSERT_TRUE(grads.contains(0));
  EXPECT_EQ(grads.at(0)[0], 0.0);
  EXPECT_EQ(grads.at(0)[1], 0.0);
}

TEST(Backward, HalfSquaredNormGradientIsIdentity) {
  const Tensor theta = Tensor::vector({0.3, -1.7, 2.5, 11.0});
  Graph g;
  const auto leaf = g.parameter(0, theta);
  const auto out = g.scale(g.squared_norm(leaf), 0.5);
  const auto grads = diffkit::backward(g, out);
  for (std::size_t i = 0; i < theta.size(); ++i) EXPECT_EQ(grads.at(0)[i], theta[i]);
}

TEST(Backward, NonScalarOutputIsContractError) {
  const Tensor theta = Tensor::vector({1.0, 2.0});
  Graph g;
  const auto leaf = g.parameter(0, theta);
  EXPECT_THROW(diffkit::backward(g, g.tanh(leaf)), ContractError);
}

TEST(Backward, TwoLayerNetworkMatchesFiniteDifferences) {
  Rng rng = make_stream(13, {});
  const std::vector<Tensor> leaves{normal_tensor(rng, {5, 3}), normal_tensor(rng, {5}),
                                   normal_tensor(rng, {2, 5}), normal_tensor(rng, {2})};
  const Tensor x = normal_tensor(rng, {4, 3});
  const Tensor target = normal_tensor(rng, {4, 2});
  const auto rep = oracle::check_op_gradient(
      "mlp2", [&](Graph& g, const std::vector<diffkit::NodeId>& p) {
        const auto h = g.tanh(g.affine(g.constant(x), p[0], p[1]));
        return g.squared_norm(g.sub(g.affine(h, p[2], p[3]), g.constant(target)));
      },
      leaves, 1e-5, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.measured.at("max_rel_err");
}

namespace {

diffkit::GradientSet random_network_gradient(const std::vector<Tensor>& p, const Tensor& x,
                                             double scale) {
  Graph g;
  std::vector<diffkit::NodeId> ids;
  for (std::size_t i = 0; i < p.size(); ++i) ids.push_back(g.parameter(i, p[i]));
  const auto h = g.tanh(g.affine(g.constant(x), ids[0], ids[1]));
  const auto out = g.scale(g.sum(g.exp(g.scale(h, 0.3))), scale);
  return diffkit::backward(g, out);
}

}  // namespace

TEST(Backward, DeterministicBitwise) {
  Rng rng = make_stream(14, {});
  const std::vector<Tensor> p{normal_tensor(rng, {6, 4}), normal_tensor(rng, {6})};
  const Tensor x = normal_tensor(rng, {3, 4});
  EXPECT_EQ(random_network_gradient(p, x, 1.0).flatten(),
            random_network_gradient(p, x, 1.0).flatten());
}

TEST(Backward, LinearInOutputScale) {
  Rng rng = make_stream(15, {});
  const std::vector<Tensor> p{normal_tensor(rng, {6, 4}), normal_tensor(rng, {6})};
  const Tensor x = normal_tensor(rng, {3, 4});
  const auto g1 = random_network_gradient(p, x, 1.0).flatten();
  const auto g3 = random_network_gradient(p, x, 3.0).flatten();
  for (std::size_t i = 0; i < g1.size(); ++i) {
    EXPECT_NEAR(g3[i], 3.0 * g1[i], 1e-12 * std::max(1.0, std::abs(g3[i])));
  }
}

TEST(Backward, SharedLeafAccumulates) {
  const Tensor theta = Tensor::vector({2.0});
  Graph g;
  const auto a = g.parameter(0, theta);
  const auto out = g.sum(g.mul(a, a));
  EXPECT_EQ(diffkit::backward(g, out).at(0)[0], 4.0);
}

TEST(Counters, CountKernelTaggedNodes) {
  oracle::reset_counter();
  EXPECT_EQ(oracle::backward_pass_counter(), 0u);
  const Tensor theta = Tensor::vector({1.0, 2.0});
  Graph g;
  const auto a = g.parameter(0, theta);
  const auto k1 = g.scale(a, 2.0);
  const auto k2 = g.scale(a, 3.0);
  const auto dead = g.scale(a, 4.0);
  g.mark_kernel(k1);
  g.mark_kernel(k2);
  g.mark_kernel(dead);
  diffkit::backward(g, g.sum(g.add(k1, k2)));
  EXPECT_EQ(oracle::backward_pass_counter(), 2u);
  EXPECT_EQ(diffkit::counters().backward_calls.load(), 1u);
  oracle::reset_counter();
  EXPECT_EQ(oracle::backward_pass_counter(), 0u);
}

TEST(FiniteDifferenceSuite, EveryOpPasses) {
  for (const auto& rep : oracle::finite_difference_suite(5)) {
    EXPECT_TRUE(rep.passed) << rep.name << " err " << rep.measured.at("max_rel_err");
  }
}
