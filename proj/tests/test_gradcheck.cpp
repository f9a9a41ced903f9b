#include <gtest/gtest.h>

#include "gradcheck_suite.hpp"

using namespace rfcnn;
using namespace rfcnn::testing;

TEST(GradCheck, EveryOpOverTenSeeds) {
  for (const auto& c : run_gradcheck_suite(10)) {
    EXPECT_EQ(c.seeds, 10);
    EXPECT_LT(c.max_rel_error, 1e-4) << c.op;
  }
}

TEST(GradCheck, ComposedOpsChain) {
  for (std::uint64_t s = 1; s <= 10; ++s) {
    RngStream r(s);
    auto res = grad_check({TensorD::randn({2, 1, 6, 6}, r), TensorD::randn({2, 1, 3, 3}, r), TensorD::randn({2}, r)},
                          [s](std::vector<TensorD>& in) {
                            auto h = channel_bias(conv2d(in[0], in[1], 1, 1), in[2]);
                            return project(global_avg_pool(sigmoid(h)), s);
                          });
    EXPECT_LT(res.max_rel_error, 1e-4);
  }
}

TEST(GradCheck, WholeModelInDouble) {
  for (auto kind : {ArchKind::CpResnet, ArchKind::Vgg}) {
    const int param = kind == ArchKind::Vgg ? 19 : 1;
    Model<double> model(build_arch(kind, param, 2, {2, 2, 2}), 3);
    RngStream r(4);
    auto x = TensorD::randn({2, 1, 16, 16}, r);
    std::vector<double> y{1, 0, 0, 1};
    auto loss_of = [&] { return bce_with_logits<double>(model.forward(x, Mode::Train), y); };
    model.zero_grad();
    backward(loss_of());
    double worst = 0;
    // a few entries of every parameter; deep narrow nets have many near-zero
    // gradients, where central differences only resolve ~eps*|L|/h
    for (auto& p : model.parameters()) {
      for (std::size_t i = 0; i < std::min<std::size_t>(p.tensor.numel(), 3); ++i) {
        const double orig = p.tensor.values()[i], h = 1e-5;
        double fp, fm;
        {
          NoGradGuard g;
          p.tensor.values()[i] = orig + h;
          fp = loss_of().item();
          p.tensor.values()[i] = orig - h;
          fm = loss_of().item();
          p.tensor.values()[i] = orig;
        }
        const double n = (fp - fm) / (2 * h), a = p.tensor.has_grad() ? p.tensor.grad()[i] : 0.0;
        const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-5});
        worst = std::max(worst, rel);
      }
    }
    EXPECT_LT(worst, 1e-4) << to_string(kind);
  }
}
