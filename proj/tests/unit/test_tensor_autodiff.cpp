#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "gradcheck.hpp"
#include "unlearn/autodiff.hpp"
#include "unlearn/tensor.hpp"

using namespace unlearn;

TEST(Tensor, SizeMatchesShape) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(t.reshaped({5, 5}), ShapeError);
  EXPECT_EQ(t.reshaped({4, 6}).shape(), (Shape{4, 6}));
}

TEST(Tensor, GradBufferMatchesData) {
  Tensor t({3, 2}, 1.0);
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.mutable_grad().size(), t.size());
  for (double g : t.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Autodiff, ReluExample) {
  Tape tape;
  auto y = ops::relu(tape.constant(Tensor({3}, {-1.0, 0.0, 2.0})));
  EXPECT_EQ(y.value().values(), (std::vector<double>{0.0, 0.0, 2.0}));
}

TEST(Autodiff, MatmulIdentity) {
  Tape tape;
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor a({3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  auto y = ops::matmul(tape.constant(eye), tape.constant(a));
  EXPECT_EQ(y.value().values(), a.values());
}

TEST(Autodiff, MatmulShapeMismatchNamesShapes) {
  Tape tape;
  try {
    ops::matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({4, 2})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos) << e.what();
  }
}

TEST(Autodiff, ConvAllOnesGivesNine) {
  Tape tape;
  auto y = ops::conv2d(tape.constant(Tensor({1, 1, 3, 3}, 1.0)), tape.constant(Tensor({1, 1, 3, 3}, 1.0)), std::nullopt);
  ASSERT_EQ(y.value().size(), 1u);
  EXPECT_DOUBLE_EQ(y.value()[0], 9.0);
}

TEST(Autodiff, SumOfSquaresGradient) {
  Tape tape;
  auto w = tape.variable(Tensor({2}, {1.0, 2.0}));
  tape.backward(ops::sum(ops::mul(w, w)));
  EXPECT_EQ(tape.grad(w), (std::vector<double>{2.0, 4.0}));
}

TEST(Autodiff, ExternalLeafReceivesGradient) {
  Tensor w({2}, {1.0, 2.0});
  w.set_requires_grad(true);
  Tape tape;
  auto v = tape.leaf(w);
  tape.backward(ops::sum(ops::mul(v, v)));
  ASSERT_TRUE(w.has_grad());
  EXPECT_EQ(w.grad()[0], 2.0);
  EXPECT_EQ(w.grad()[1], 4.0);
}

TEST(Autodiff, IndependentLossGivesZeroGradient) {
  Tape tape;
  auto w = tape.variable(Tensor({3}, {1.0, 2.0, 3.0}));
  auto c = tape.constant(Tensor({2}, {4.0, 5.0}));
  tape.backward(ops::sum(ops::mul(c, c)));
  EXPECT_EQ(tape.grad(w), (std::vector<double>(3, 0.0)));
}

TEST(Autodiff, RepeatedBackwardDoesNotAccumulate) {
  Tape tape;
  auto w = tape.variable(Tensor({2}, {1.0, -3.0}));
  auto loss = ops::sum(ops::mul(w, w));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_EQ(tape.grad(w), (std::vector<double>{2.0, -6.0}));
}

TEST(Autodiff, NonScalarLossRejected) {
  Tape tape;
  auto w = tape.variable(Tensor({2}, 1.0));
  EXPECT_THROW(tape.backward(ops::relu(w)), std::invalid_argument);
  Tape empty;
  EXPECT_THROW(empty.backward(Var{&empty, 0}), std::invalid_argument);
}

TEST(Autodiff, BatchNormTrainingRejectsSingleSample) {
  Tape tape;
  auto stats = BatchNormStats::fresh(2);
  auto x = tape.constant(Tensor({1, 2, 3, 3}, 0.5));
  auto g = tape.constant(Tensor({2}, 1.0));
  auto b = tape.constant(Tensor({2}, 0.0));
  EXPECT_THROW(ops::batchnorm2d(x, g, b, stats, true), std::invalid_argument);
  EXPECT_NO_THROW(ops::batchnorm2d(x, g, b, stats, false));
}

TEST(Autodiff, BatchNormRunningStatistics) {
  Tape tape;
  auto stats = BatchNormStats::fresh(1);
  // channel values 1 and 3: batch mean 2, unbiased variance 2
  Tensor x({2, 1, 1, 1}, {1.0, 3.0});
  ops::batchnorm2d(tape.constant(x), tape.constant(Tensor({1}, 1.0)), tape.constant(Tensor({1}, 0.0)), stats, true);
  EXPECT_NEAR(stats.running_mean[0], 0.1 * 2.0, 1e-15);
  EXPECT_NEAR(stats.running_var[0], 0.9 * 1.0 + 0.1 * 2.0, 1e-15);
}

TEST(Autodiff, BatchNormEvalIsAffine) {
  auto rng = make_rng(5);
  auto stats = BatchNormStats::fresh(3);
  stats.running_mean = {0.3, -0.2, 1.0};
  stats.running_var = {0.5, 2.0, 1.5};
  const auto gamma = test_support::random_tensor({3}, rng);
  const auto beta = test_support::random_tensor({3}, rng);
  auto apply = [&](const Tensor& x) {
    Tape tape;
    auto s = stats;
    return ops::batchnorm2d(tape.constant(x), tape.constant(gamma), tape.constant(beta), s, false).value();
  };
  const auto a = test_support::random_tensor({2, 3, 2, 2}, rng);
  const auto b = test_support::random_tensor({2, 3, 2, 2}, rng);
  Tensor mix(a.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 0.25 * a[i] + 0.75 * b[i];
  const auto fa = apply(a), fb = apply(b), fm = apply(mix);
  for (std::size_t i = 0; i < mix.size(); ++i) EXPECT_NEAR(fm[i], 0.25 * fa[i] + 0.75 * fb[i], 1e-12);
}

TEST(Autodiff, PoolingDropsIncompleteWindows) {
  Tape tape;
  Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto m = ops::maxpool2d(tape.constant(x), 2);
  auto a = ops::avgpool2d(tape.constant(x), 2);
  EXPECT_EQ(m.value().shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(m.value()[0], 5.0);
  EXPECT_EQ(a.value()[0], 3.0);
}

TEST(LogLoss, UniformLogits) {
  Tape tape;
  const int label = 0;
  auto l = log_loss(tape.constant(Tensor({2}, {0.0, 0.0})), std::span(&label, 1));
  EXPECT_NEAR(l.value().item(), std::log(2.0), 1e-15);
}

TEST(LogLoss, SaturatedLogitsStayFinite) {
  Tape tape;
  const int label = 0;
  auto l = log_loss(tape.constant(Tensor({2}, {1000.0, 0.0})), std::span(&label, 1));
  EXPECT_TRUE(std::isfinite(l.value().item()));
  EXPECT_NEAR(l.value().item(), 0.0, 1e-300);
  const int other = 1;
  EXPECT_NEAR(log_loss_value(std::vector<double>{1000.0, 0.0}, other), 1000.0, 1e-9);
}

TEST(LogLoss, MatchesLongDoubleOracle) {
  const long double lse = std::log(std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L));
  const double expected = static_cast<double>(lse - 3.0L);
  Tape tape;
  const int label = 2;
  auto l = log_loss(tape.constant(Tensor({3}, {1.0, 2.0, 3.0})), std::span(&label, 1));
  EXPECT_NEAR(l.value().item(), expected, 1e-12);
  EXPECT_NEAR(log_loss_value(std::vector<double>{1.0, 2.0, 3.0}, 2), expected, 1e-12);
}

TEST(LogLoss, BatchAveragesAndRejectsBadLabels) {
  Tape tape;
  const std::vector<int> labels{0, 1};
  auto l = log_loss(tape.constant(Tensor({2, 2}, {0.0, 0.0, 0.0, std::log(3.0)})), labels);
  EXPECT_NEAR(l.value().item(), 0.5 * (std::log(2.0) + std::log(4.0 / 3.0)), 1e-14);
  const std::vector<int> bad{0, 2};
  EXPECT_THROW(log_loss(tape.constant(Tensor({2, 2})), bad), std::out_of_range);
}

TEST(Autodiff, DeterministicForwardAndBackward) {
  auto run = [] {
    auto c = test_support::make_grad_case("conv2d", 99, 3);
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : c.inputs) vars.push_back(tape.variable(t));
    auto loss = c.build(tape, vars);
    tape.backward(loss);
    auto g = tape.grad(vars[1]);
    g.push_back(loss.value().item());
    return g;
  };
  EXPECT_EQ(run(), run());
}

class GradCheck : public ::testing::TestWithParam<std::string> {};

TEST_P(GradCheck, MatchesCentralDifferences) {
  for (std::size_t i = 0; i < 10; ++i) {
    const auto c = test_support::make_grad_case(GetParam(), 7, i);
    EXPECT_LT(test_support::gradient_error(c), 1e-4) << c.label;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, GradCheck, ::testing::ValuesIn(test_support::gradcheck_ops()),
                         [](const auto& info) { return info.param; });
