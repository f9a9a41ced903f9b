#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace rfcnn;
using rfcnn::testing::TensorD;

TEST(Shake, EvalIsHalfAndBitDeterministic) {
  RngStream rng(1);
  auto x = TensorD::randn({4, 3}, rng), b1 = TensorD::randn({4, 3}, rng), b2 = TensorD::randn({4, 3}, rng);
  const auto y = shake_combine(x, b1, b2, ShakeCoefficients::eval(4));
  for (std::size_t i = 0; i < y.numel(); ++i) {
    EXPECT_EQ(y.values()[i], x.values()[i] + 0.5 * b1.values()[i] + 0.5 * b2.values()[i]);
  }
  RngStream other(99);
  EXPECT_EQ(shake_combine(x, b1, b2, sample_coefficients(4, other, Mode::Eval)).values(), y.values());
}

TEST(Shake, EvalRejectsOtherAlpha) {
  auto c = ShakeCoefficients::eval(1);
  c.alpha_forward[0] = 0.3;
  auto t = TensorD::zeros({1, 2});
  EXPECT_THROW(shake_combine(t, t, t, c), ContractError);
}

TEST(Shake, ShapeMismatch) {
  EXPECT_THROW(shake_combine(TensorD::zeros({1, 2}), TensorD::zeros({1, 3}), TensorD::zeros({1, 2}),
                             ShakeCoefficients::eval(1)),
               DimensionError);
}

TEST(Shake, MonteCarloMoments) {
  RngStream rng(7);
  const int n = 100000;
  double sa = 0, saa = 0, sb = 0, sab = 0;
  const auto c = sample_coefficients(n, rng);
  for (int i = 0; i < n; ++i) {
    const double a = c.alpha_forward[std::size_t(i)], b = c.beta_backward[std::size_t(i)];
    ASSERT_TRUE(a >= 0 && a <= 1 && b >= 0 && b <= 1);
    sa += a;
    saa += a * a;
    sb += b;
    sab += a * b;
  }
  const double ma = sa / n, mb = sb / n;
  EXPECT_NEAR(ma, 0.5, 0.01);
  EXPECT_NEAR(mb, 0.5, 0.01);
  EXPECT_NEAR(saa / n - ma * ma, 1.0 / 12.0, 0.002);
  EXPECT_NEAR(sab / n - ma * mb, 0.0, 0.002);  // independent draws
}

TEST(Shake, BackwardUsesBetaNotAlpha) {
  // scalar two-branch model: y = x + a*w1 + (1-a)*w2
  RngStream rng(11);
  for (int t = 0; t < 50; ++t) {
    auto x = TensorD::scalar(0.3, true), w1 = TensorD::scalar(1.7, true), w2 = TensorD::scalar(-0.4, true);
    const auto c = sample_coefficients(1, rng);
    backward(sum(shake_combine(x, w1, w2, c)));
    const double beta = c.beta_backward[0];
    EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(w1.grad()[0], beta);
    EXPECT_DOUBLE_EQ(w2.grad()[0], 1.0 - beta);
    if (beta < 1.0) {
      EXPECT_NEAR(w1.grad()[0] / w2.grad()[0], beta / (1.0 - beta), 1e-12);
    }
    // forward used alpha
    const double a = c.alpha_forward[0];
    NoGradGuard g;
    EXPECT_DOUBLE_EQ(shake_combine(x, w1, w2, c).item(), 0.3 + a * 1.7 + (1 - a) * -0.4);
  }
}

TEST(Shake, PerSampleCoefficients) {
  ShakeCoefficients c{{0.0, 1.0}, {0.25, 0.75}, Mode::Train};
  auto x = TensorD::zeros({2, 1}, true), b1 = TensorD({2, 1}, {1.0, 1.0}, true), b2 = TensorD({2, 1}, {3.0, 3.0}, true);
  auto y = shake_combine(x, b1, b2, c);
  EXPECT_EQ(y.values(), (std::vector<double>{3.0, 1.0}));
  backward(sum(y));
  EXPECT_EQ(std::vector<double>(b1.grad().begin(), b1.grad().end()), (std::vector<double>{0.25, 0.75}));
}
