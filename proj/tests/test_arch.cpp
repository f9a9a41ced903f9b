#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace rfcnn;
using rfcnn::testing::TensorD;

namespace {

// Independent parameter count for the residual family (1 branch).
std::size_t expected_cp_params(int rho, int n_classes, const Widths& w) {
  auto unit = [](std::size_t in, std::size_t out, std::size_t k) { return out * in * k * k + 2 * out; };
  std::size_t n = unit(1, static_cast<std::size_t>(w.stage1), 5);
  std::size_t ch = static_cast<std::size_t>(w.stage1);
  for (int b = 0; b < 12; ++b) {
    const std::size_t out = static_cast<std::size_t>(b < 4 ? w.stage1 : b < 8 ? w.stage2 : w.stage3);
    const int k1 = b == 0 ? 3 : slot_kernel(rho, 2 * b - 1), k2 = b == 0 ? 1 : slot_kernel(rho, 2 * b);
    n += unit(ch, out, static_cast<std::size_t>(k1)) + unit(out, out, static_cast<std::size_t>(k2));
    if (out != ch) n += unit(ch, out, 1);
    ch = out;
  }
  return n + static_cast<std::size_t>(n_classes) * ch + static_cast<std::size_t>(n_classes);
}

}  // namespace

TEST(Arch, CpResnetLayout) {
  const auto s = build_cp_resnet(7, 10);
  ASSERT_EQ(s.blocks.size(), 12u);
  EXPECT_EQ(s.input_conv, (InputConvSpec{5, 2, 128}));
  EXPECT_EQ(s.blocks[0].conv_kernels, (std::vector<int>{3, 1}));
  EXPECT_EQ(s.blocks[1].conv_kernels, (std::vector<int>{3, 3}));
  EXPECT_EQ(s.blocks[3].conv_kernels, (std::vector<int>{3, 3}));
  EXPECT_EQ(s.blocks[4].conv_kernels, (std::vector<int>{3, 1}));
  EXPECT_EQ(s.blocks[5].conv_kernels, (std::vector<int>{1, 1}));
  for (int b = 0; b < 12; ++b) {
    EXPECT_EQ(s.blocks[std::size_t(b)].followed_by_pool, b == 0 || b == 1 || b == 3);
    EXPECT_EQ(s.blocks[std::size_t(b)].channels, b < 4 ? 128 : b < 8 ? 256 : 512);
  }
}

TEST(Arch, SlotKernelsFollowRho) {
  for (int rho = 0; rho <= 21; ++rho) {
    const auto s = build_cp_resnet(rho, 1);
    int threes = 0;
    for (const auto& b : s.blocks)
      for (int k : b.conv_kernels) threes += k == 3;
    EXPECT_EQ(threes, 1 + rho);
  }
}

TEST(Arch, VggHasNoResidualsAndTrailingOneByOne) {
  const auto s = build_vgg(0, 5);
  int threes = 0, ones = 0;
  for (const auto& b : s.blocks) {
    EXPECT_FALSE(b.residual);
    for (int k : b.conv_kernels) (k == 3 ? threes : ones)++;
  }
  EXPECT_EQ(threes, 22);
  EXPECT_EQ(ones, 1);  // block 1's fixed 1x1
  EXPECT_EQ(build_vgg(21, 5).blocks[1].conv_kernels.size(), 0u);
}

TEST(Arch, TextRoundTrip) {
  RngStream rng(1);
  std::vector<ArchSpec> specs{build_cp_resnet(0, 3), build_ss_resnet(12, 7, {8, 16, 32}), build_vgg(9, 2)};
  for (int i = 0; i < 5; ++i) specs.push_back(rfcnn::testing::random_small_spec(rng, i));
  for (const auto& s : specs) EXPECT_EQ(parse_arch_text(to_text(s)), s);
  EXPECT_THROW(parse_arch_text("arch x\nkind cp_resnet\n"), FormatError);
  EXPECT_THROW(parse_arch_text("arch x\nbogus 1\nend\n"), FormatError);
}

TEST(Arch, ValidateRejectsBadSpecs) {
  auto s = build_cp_resnet(0, 1);
  s.blocks[2].conv_kernels = {2};
  EXPECT_THROW(validate(s), ArgumentError);
  s = build_cp_resnet(0, 1);
  s.blocks[2].shake_branches = 3;
  EXPECT_THROW(validate(s), ArgumentError);
  s = build_cp_resnet(0, 1);
  s.blocks[2].conv_kernels.clear();
  EXPECT_THROW(validate(s), ArgumentError);
}

TEST(Model, ParameterCountMatchesFormula) {
  for (int rho : {0, 7, 21}) {
    const Widths w{4, 6, 8};
    Model<float> m(build_cp_resnet(rho, 3, w), 0);
    EXPECT_EQ(m.parameter_count(), expected_cp_params(rho, 3, w)) << rho;
  }
}

TEST(Model, ForwardShapes) {
  for (auto kind : {ArchKind::CpResnet, ArchKind::SsResnet, ArchKind::Vgg}) {
    Model<float> m(build_arch(kind, 3, 5, {4, 4, 8}), 1);
    RngStream rng(2);
    auto x = Tensor<float>::randn({3, 1, 32, 40}, rng);
    EXPECT_EQ(m.forward(x, Mode::Train, 9).shape(), (Shape{3, 5}));
    EXPECT_EQ(m.predict(x).size(), 15u);
  }
  Model<float> m(build_cp_resnet(0, 2, {4, 4, 4}), 1);
  EXPECT_THROW(m.forward(Tensor<float>::zeros({1, 2, 32, 32}), Mode::Eval), DimensionError);
}

TEST(Model, SeedDeterminesInitialization) {
  Model<float> a(build_cp_resnet(2, 2, {4, 4, 4}), 5), b(build_cp_resnet(2, 2, {4, 4, 4}), 5),
      c(build_cp_resnet(2, 2, {4, 4, 4}), 6);
  EXPECT_EQ(a.param("block3.branch1.conv1.weight").values(), b.param("block3.branch1.conv1.weight").values());
  EXPECT_NE(a.param("block3.branch1.conv1.weight").values(), c.param("block3.branch1.conv1.weight").values());
}

TEST(Model, ZeroBranchesMakeBlocksIdentity) {
  // equal widths -> no projections; zeroed branch outputs leave relu(x) = x
  Model<double> m(build_cp_resnet(3, 2, {3, 3, 3}), 2);
  for (auto& p : m.parameters()) {
    if (p.name.find(".conv2.bn_") != std::string::npos) std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.0);
  }
  RngStream rng(3);
  auto x = TensorD::randn({2, 1, 32, 32}, rng);
  const auto y = m.forward(x, Mode::Eval);

  RunningStats<double> st(3);
  auto h = relu(batchnorm2d(conv2d(x, m.param("input_conv.weight"), 2, 2), m.param("input_conv.bn_gamma"),
                            m.param("input_conv.bn_beta"), st, Mode::Eval));
  for (int i = 0; i < 3; ++i) h = maxpool2d(h, 2, 2);
  auto ref = global_avg_pool(channel_bias(conv2d(h, m.param("head.weight"), 1, 0), m.param("head.bias")));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.values()[i], ref.values()[i], 1e-12);
}

TEST(Model, ShakeWithTiedBranchesEqualsPlainResidual) {
  const Widths w{3, 4, 5};
  Model<double> cp(build_cp_resnet(5, 2, w), 1), ss(build_ss_resnet(5, 2, w), 2);
  for (auto& p : ss.parameters()) {
    auto name = p.name;
    const auto pos = name.find(".branch2.");
    if (pos != std::string::npos) name.replace(pos, 9, ".branch1.");
    p.tensor.values() = cp.param(name).values();
  }
  RngStream rng(4);
  auto x = TensorD::randn({2, 1, 32, 32}, rng);
  for (auto mode : {Mode::Eval, Mode::Train}) {
    const auto a = cp.forward(x, mode), b = ss.forward(x, mode, 77);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-9);
  }
}

TEST(Model, ShakeKeyControlsTrainingNoise) {
  Model<float> m(build_ss_resnet(1, 2, {4, 4, 4}), 1);
  RngStream rng(5);
  auto x = Tensor<float>::randn({2, 1, 32, 32}, rng);
  const auto a = m.forward(x, Mode::Train, 10).values();
  EXPECT_EQ(a, m.forward(x, Mode::Train, 10).values());
  EXPECT_NE(a, m.forward(x, Mode::Train, 11).values());
  EXPECT_EQ(m.forward(x, Mode::Eval, 1).values(), m.forward(x, Mode::Eval, 2).values());
}

TEST(Model, PredictLeavesRunningStatsAlone) {
  Model<float> m(build_cp_resnet(0, 2, {4, 4, 4}), 1);
  RngStream rng(6);
  auto x = Tensor<float>::randn({2, 1, 32, 32}, rng);
  std::vector<std::vector<float>> before;
  for (auto& b : m.buffers()) before.push_back(*b.values);
  m.predict(x);
  auto bufs = m.buffers();
  for (std::size_t i = 0; i < bufs.size(); ++i) EXPECT_EQ(*bufs[i].values, before[i]);
}
