// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "memprop/autograd.hpp"
#include "oracles.hpp"

using namespace memprop;

namespace {

std::mt19937_64 rng(11);

// Reduces an arbitrary Var to a scalar with fixed random weights so every
// output element contributes a distinct gradient.
std::function<Var(const Var&)> weighted(std::function<Var(const Var&)> f, Shape out_shape) {
  Tensor w = oracle::random_tensor(std::move(out_shape), rng);
  return [f, w](const Var& x) { return ag::sum(ag::mul(f(x), ag::constant(w))); };
}

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor t({2, 3, 4, 5}, 1.5);
  EXPECT_EQ(t.numel(), 120u);
  EXPECT_EQ(t.dim(-1), 5);
  t.at(1, 2, 3, 4) = 7.0;
  EXPECT_EQ(t[119], 7.0);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), ShapeError);
  EXPECT_THROW(t.reshaped({7}), ShapeError);
  EXPECT_EQ(t.slice0(1).shape(), (Shape{1, 3, 4, 5}));
}

TEST(Tensor, Concat0) {
  Tensor a({1, 2}, 1.0), b({2, 2}, 2.0);
  std::vector<Tensor> parts{a, b};
  Tensor c = concat0(parts);
  EXPECT_EQ(c.shape(), (Shape{3, 2}));
  EXPECT_EQ(c[1], 1.0);
  EXPECT_EQ(c[2], 2.0);
}

TEST(Autograd, ElementwiseGradients) {
  const Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
  const Tensor other = oracle::random_tensor({2, 3, 4, 4}, rng);
  const Shape s = x.shape();
  EXPECT_LT(oracle::gradcheck(weighted([&](const Var& v) { return ag::mul(v, ag::constant(other)); }, s), x), 1e-6);
  EXPECT_LT(oracle::gradcheck(weighted([](const Var& v) { return ag::sigmoid(v); }, s), x), 1e-6);
  EXPECT_LT(oracle::gradcheck(weighted([](const Var& v) { return ag::mul(v, v); }, s), x), 1e-6);
  EXPECT_LT(oracle::gradcheck(weighted([](const Var& v) { return ag::one_minus(ag::scale(v, 3.0)); }, s), x), 1e-6);
}

TEST(Autograd, ConvGradients) {
  const Tensor x = oracle::random_tensor({2, 3, 8, 8}, rng);
  const Tensor w = oracle::random_tensor({4, 3, 3, 3}, rng);
  const Tensor b = oracle::random_tensor({4}, rng);
  for (int stride : {1, 2}) {
    const int ho = (8 + 2 - 3) / stride + 1;
    EXPECT_LT(oracle::gradcheck(weighted([&](const Var& v) { return ag::conv2d(v, ag::constant(w), ag::constant(b), stride, 1); },
                                         {2, 4, ho, ho}),
                                x),
              1e-6);
    EXPECT_LT(oracle::gradcheck(weighted([&](const Var& v) { return ag::conv2d(ag::constant(x), v, ag::constant(b), stride, 1); },
                                         {2, 4, ho, ho}),
                                w),
              1e-6);
  }
}

TEST(Autograd, ConvMatchesDirectSum) {
  const Tensor x = oracle::random_tensor({1, 2, 5, 5}, rng);
  const Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = oracle::random_tensor({3}, rng);
  const Tensor y = ag::conv2d(ag::constant(x), ag::constant(w), ag::constant(b), 2, 1).value();
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double s = b[o];
        for (int c = 0; c < 2; ++c)
          for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
              const int yy = oy * 2 - 1 + i, xx = ox * 2 - 1 + j;
              if (yy < 0 || yy >= 5 || xx < 0 || xx >= 5) continue;
              s += w.at(o, c, i, j) * x.at(0, c, yy, xx);
            }
        EXPECT_NEAR(y.at(0, o, oy, ox), s, 1e-12);
      }
}

TEST(Autograd, PoolingAndResamplingGradients) {
  const Tensor x = oracle::random_tensor({1, 2, 8, 8}, rng);
  EXPECT_LT(oracle::gradcheck(weighted([](const Var& v) { return ag::avg_pool(v, 4); }, {1, 2, 2, 2}), x), 1e-6);
  EXPECT_LT(oracle::gradcheck(weighted([](const Var& v) { return ag::upsample_bilinear2x(v); }, {1, 2, 16, 16}), x), 1e-6);
  EXPECT_LT(oracle::gradcheck(weighted([](const Var& v) { return ag::blur5_reflect(v); }, {1, 2, 8, 8}), x), 1e-6);
  EXPECT_LT(oracle::gradcheck(weighted([](const Var& v) { return ag::subsample2(v); }, {1, 2, 4, 4}), x), 1e-6);
  EXPECT_LT(oracle::gradcheck(weighted([](const Var& v) { return ag::zero_upsample2(v); }, {1, 2, 16, 16}), x), 1e-6);
}

TEST(Autograd, AttentionPrimitivesGradients) {
  const Tensor q = oracle::random_tensor({2, 5, 4}, rng);
  const Tensor k = oracle::random_tensor({2, 7, 4}, rng);
  EXPECT_LT(oracle::gradcheck(weighted([&](const Var& v) { return ag::softmax_last(ag::neg_sq_dist(v, ag::constant(k), 0.5)); },
                                       {2, 5, 7}),
                              q),
            1e-6);
  EXPECT_LT(oracle::gradcheck(weighted([&](const Var& v) { return ag::neg_sq_dist(ag::constant(q), v, 0.5); }, {2, 5, 7}), k),
            1e-6);
  EXPECT_LT(oracle::gradcheck(weighted([&](const Var& v) { return ag::bmm_nt(v, ag::constant(k)); }, {2, 5, 7}), q), 1e-6);
  const Tensor w = oracle::random_tensor({4, 3}, rng);  // [in, out]
  const Tensor b = oracle::random_tensor({3}, rng);
  EXPECT_LT(oracle::gradcheck(weighted([&](const Var& v) { return ag::linear(v, ag::constant(w), ag::constant(b)); }, {2, 5, 3}), q),
            1e-6);
}

TEST(Autograd, NoGradGuardSkipsGraph) {
  Var p = ag::parameter(Tensor({2}, 1.0));
  {
    NoGradGuard g;
    EXPECT_FALSE(grad_enabled());
    Var y = ag::mul(p, p);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
  Var y = ag::sum(ag::mul(p, p));
  backward(y);
  EXPECT_DOUBLE_EQ(p.grad()[0], 2.0);
}

TEST(Autograd, DetachStopsGradient) {
  Var p = ag::parameter(Tensor({3}, 2.0));
  Var y = ag::sum(ag::mul(p, p.detach()));
  backward(y);
  EXPECT_DOUBLE_EQ(p.grad()[0], 2.0);
}

TEST(Autograd, ShapeMismatchThrows) {
  Var a = ag::constant(Tensor({2, 3}));
  Var b = ag::constant(Tensor({3, 2}));
  EXPECT_THROW(ag::add(a, b), ShapeError);
  EXPECT_THROW(ag::bmm(ag::constant(Tensor({1, 2, 3})), ag::constant(Tensor({1, 2, 3}))), ShapeError);
}
