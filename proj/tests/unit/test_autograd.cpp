#include "multitalk/autograd.hpp"
#include "multitalk/nn.hpp"
#include "multitalk/optim.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace multitalk;
using ad::Matrix;
using ad::Var;

namespace {

// Builds loss = mean_square(op(x) - target) and compares the tape gradient
// against central differences.
void check_unary(const std::function<Var(ad::Graph&, const Var&)>& op, Matrix x,
                 double tol = 1e-6) {
  std::mt19937_64 rng(7);
  ad::Graph probe;
  const Matrix out_shape = op(probe, probe.constant(x)).value();
  const Matrix target = mt_test::random_matrix(out_shape.rows(), out_shape.cols(), rng);

  ad::ParameterStore store;
  ad::Parameter& p = store.add("x", x);
  {
    ad::Graph g;
    Var v = g.param(p);
    Var loss = ad::mean_square(ad::sub(op(g, v), g.constant(target)));
    g.backward(loss);
  }
  auto f = [&](const Matrix& m) {
    ad::Graph g;
    return ad::mean_square(ad::sub(op(g, g.constant(m)), g.constant(target))).value()(0, 0);
  };
  const Matrix num = mt_test::numeric_grad(f, x);
  EXPECT_LT((num - p.grad).cwiseAbs().maxCoeff(), tol);
}

}  // namespace

TEST(Autograd, ElementwiseOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(1);
  const Matrix x = mt_test::random_matrix(3, 4, rng);
  const Matrix other = mt_test::random_matrix(3, 4, rng);
  check_unary([&](ad::Graph& g, const Var& v) { return ad::add(v, g.constant(other)); }, x);
  check_unary([&](ad::Graph& g, const Var& v) { return ad::sub(g.constant(other), v); }, x);
  check_unary([&](ad::Graph& g, const Var& v) { return ad::mul(v, g.constant(other)); }, x);
  check_unary([&](ad::Graph&, const Var& v) { return ad::mul(v, v); }, x);
  check_unary([](ad::Graph&, const Var& v) { return ad::scale(v, -2.5); }, x);
  check_unary([](ad::Graph&, const Var& v) { return ad::gelu(v); }, x);
  check_unary([](ad::Graph&, const Var& v) { return ad::tanh(v); }, x);
  check_unary([](ad::Graph&, const Var& v) { return ad::transpose(v); }, x);
}

TEST(Autograd, ReluAwayFromKink) {
  Matrix x(2, 3);
  x << 0.5, -0.7, 1.2, -0.3, 0.9, -1.1;
  check_unary([](ad::Graph&, const Var& v) { return ad::relu(v); }, x);
}

TEST(Autograd, MatmulBothSides) {
  std::mt19937_64 rng(2);
  const Matrix a = mt_test::random_matrix(3, 5, rng);
  const Matrix b = mt_test::random_matrix(5, 2, rng);
  check_unary([&](ad::Graph& g, const Var& v) { return ad::matmul(v, g.constant(b)); }, a);
  check_unary([&](ad::Graph& g, const Var& v) { return ad::matmul(g.constant(a), v); }, b);
}

TEST(Autograd, AddRowBroadcastsBias) {
  std::mt19937_64 rng(3);
  const Matrix a = mt_test::random_matrix(4, 3, rng);
  const Matrix bias = mt_test::random_matrix(1, 3, rng);
  check_unary([&](ad::Graph& g, const Var& v) { return ad::add_row(g.constant(a), v); }, bias);
  check_unary([&](ad::Graph& g, const Var& v) { return ad::add_row(v, g.constant(bias)); }, a);
}

TEST(Autograd, LayerNormAllInputs) {
  std::mt19937_64 rng(4);
  const Matrix x = mt_test::random_matrix(3, 6, rng);
  const Matrix gamma = mt_test::random_matrix(1, 6, rng);
  const Matrix beta = mt_test::random_matrix(1, 6, rng);
  check_unary(
      [&](ad::Graph& g, const Var& v) {
        return ad::layer_norm(v, g.constant(gamma), g.constant(beta));
      },
      x);
  check_unary(
      [&](ad::Graph& g, const Var& v) { return ad::layer_norm(g.constant(x), v, g.constant(beta)); },
      gamma);
  check_unary(
      [&](ad::Graph& g, const Var& v) { return ad::layer_norm(g.constant(x), g.constant(gamma), v); },
      beta);
}

TEST(Autograd, SoftmaxRowsWithCausalMask) {
  std::mt19937_64 rng(5);
  const Matrix x = mt_test::random_matrix(4, 4, rng);
  const Matrix mask = nn::causal_mask(4);
  check_unary([](ad::Graph&, const Var& v) { return ad::softmax_rows(v); }, x);
  check_unary([&](ad::Graph&, const Var& v) { return ad::softmax_rows(v, &mask); }, x);

  ad::Graph g;
  const Matrix s = ad::softmax_rows(g.constant(x), &mask).value();
  for (int r = 0; r < 4; ++r) {
    EXPECT_NEAR(s.row(r).sum(), 1.0, 1e-12);
    for (int c = r + 1; c < 4; ++c) EXPECT_EQ(s(r, c), 0.0);
  }
}

TEST(Autograd, ShapeOps) {
  std::mt19937_64 rng(6);
  const Matrix x = mt_test::random_matrix(5, 4, rng);
  const Matrix y = mt_test::random_matrix(2, 4, rng);
  check_unary([](ad::Graph&, const Var& v) { return ad::slice_rows(v, 1, 3); }, x);
  check_unary([](ad::Graph&, const Var& v) { return ad::slice_cols(v, 1, 2); }, x);
  check_unary([&](ad::Graph& g, const Var& v) { return ad::concat_rows({v, g.constant(y)}); }, x);
  check_unary([&](ad::Graph& g, const Var& v) {
    return ad::concat_cols({g.constant(x.topRows(2)), v});
  }, y);
  check_unary([](ad::Graph&, const Var& v) { return ad::stack_rows(v, 2); }, x);
  check_unary([](ad::Graph&, const Var& v) { return ad::unstack_rows(v, 2); }, x);
  check_unary([](ad::Graph&, const Var& v) { return ad::gather_rows(v, {4, 0, 4, 2}); }, x);
}

TEST(Autograd, StackRowsPadsFinalGroup) {
  Matrix x(3, 2);
  x << 1, 2, 3, 4, 5, 6;
  ad::Graph g;
  const Matrix s = ad::stack_rows(g.constant(x), 2).value();
  ASSERT_EQ(s.rows(), 2);
  ASSERT_EQ(s.cols(), 4);
  EXPECT_EQ(s(0, 2), 3);
  EXPECT_EQ(s(1, 0), 5);
  EXPECT_EQ(s(1, 2), 0);
  EXPECT_EQ(s(1, 3), 0);
  const Matrix u = ad::unstack_rows(g.constant(s), 2).value();
  EXPECT_EQ(u.rows(), 4);
  EXPECT_TRUE(u.topRows(3).isApprox(x));
}

TEST(Autograd, Reductions) {
  Matrix x(1, 4);
  x << 1, -2, 3, -4;
  ad::Graph g;
  EXPECT_DOUBLE_EQ(ad::mean_abs(g.constant(x)).value()(0, 0), 2.5);
  EXPECT_DOUBLE_EQ(ad::mean_square(g.constant(x)).value()(0, 0), 7.5);

  std::mt19937_64 rng(8);
  const Matrix y = mt_test::random_matrix(3, 3, rng);
  check_unary([](ad::Graph&, const Var& v) { return ad::scale(ad::mean_abs(v), 3.0); }, y);
}

TEST(Autograd, DetachBlocksGradient) {
  ad::ParameterStore store;
  Matrix x(1, 3);
  x << 1, 2, 3;
  ad::Parameter& p = store.add("x", x);
  ad::Graph g;
  Var v = g.param(p);
  g.backward(ad::add(ad::mean_square(ad::detach(v)), ad::mean_abs(v)));
  EXPECT_TRUE(p.grad.isApprox(Matrix::Constant(1, 3, 1.0 / 3.0)));
}

TEST(Autograd, StraightThroughForwardsReplacementBackwardsIdentity) {
  ad::ParameterStore store;
  Matrix x(1, 2);
  x << 0.2, -0.4;
  Matrix r(1, 2);
  r << 1.0, 1.0;
  ad::Parameter& p = store.add("x", x);
  ad::Graph g;
  Var st = ad::straight_through(g.param(p), r);
  EXPECT_EQ(st.value(), r);
  g.backward(ad::mean_square(st));
  // d/dx mean((r)^2) under identity backward = 2 r / n
  EXPECT_TRUE(p.grad.isApprox(r));
}

TEST(Autograd, FrozenParameterGetsNoGradient) {
  ad::ParameterStore store;
  ad::Parameter& a = store.add("a", Matrix::Constant(1, 1, 2.0));
  ad::Parameter& b = store.add("b", Matrix::Constant(1, 1, 3.0));
  ad::Graph g;
  g.backward(ad::mul(g.param(a), g.param(b, false)));
  EXPECT_TRUE(a.touched);
  EXPECT_DOUBLE_EQ(a.grad(0, 0), 3.0);
  EXPECT_FALSE(b.touched);
}

TEST(Autograd, AttentionAndDecoderBlockGradients) {
  std::mt19937_64 rng(9);
  ad::ParameterStore store;
  nn::init_decoder_block(store, "blk", 8, 12, rng);
  const Matrix x = mt_test::random_matrix(5, 8, rng);
  const Matrix mem = mt_test::random_matrix(3, 8, rng);
  const Matrix mask = nn::causal_mask(5);
  check_unary(
      [&](ad::Graph& g, const Var& v) {
        nn::Scope s(g, static_cast<const ad::ParameterStore&>(store));
        return nn::decoder_block(s, "blk", v, g.constant(mem), 2, &mask);
      },
      x);
  check_unary(
      [&](ad::Graph& g, const Var& v) {
        nn::Scope s(g, static_cast<const ad::ParameterStore&>(store));
        return nn::decoder_block(s, "blk", g.constant(x), v, 2, &mask);
      },
      mem);
}

TEST(Optim, FirstAdamStepMovesByLearningRate) {
  ad::ParameterStore store;
  ad::Parameter& p = store.add("w", Matrix::Zero(1, 3));
  p.grad = Matrix(1, 3);
  p.grad << 0.5, -2.0, 1e3;
  p.touched = true;
  Adam adam({0.01, 0.9, 0.999, 1e-12, 0.0});
  adam.step(store);
  EXPECT_NEAR(p.value(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(p.value(0, 1), 0.01, 1e-9);
  EXPECT_NEAR(p.value(0, 2), -0.01, 1e-9);
}

TEST(Optim, UntouchedParametersAreSkipped) {
  ad::ParameterStore store;
  ad::Parameter& p = store.add("w", Matrix::Constant(2, 2, 1.0));
  p.grad = Matrix::Constant(2, 2, 1.0);
  p.touched = false;
  Adam adam({0.1, 0.9, 0.999, 1e-8, 0.5});
  adam.step(store);
  EXPECT_EQ(p.value, Matrix::Constant(2, 2, 1.0));
}

TEST(Optim, DecoupledWeightDecay) {
  ad::ParameterStore store;
  ad::Parameter& p = store.add("w", Matrix::Constant(1, 1, 2.0));
  p.grad = Matrix::Zero(1, 1);
  p.touched = true;
  Adam adam({0.1, 0.9, 0.999, 1e-8, 0.5});
  adam.step(store);
  EXPECT_NEAR(p.value(0, 0), 2.0 * (1 - 0.05), 1e-12);
}
