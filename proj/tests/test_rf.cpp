#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace rfcnn;

namespace {
const std::int64_t kTable[22] = {23,  31,  39,  55,  71,  87,  103, 135, 167, 199, 231,
                                 263, 295, 327, 359, 391, 423, 455, 487, 519, 551, 583};
}

TEST(Rf, CpResnetTable) {
  for (int rho = 0; rho <= 21; ++rho) EXPECT_EQ(compute_rf(build_cp_resnet(rho, 10)).max_rf, kTable[rho]) << rho;
}

TEST(Rf, ShakeVariantHasSameRf) {
  for (int rho = 0; rho <= 21; ++rho) EXPECT_EQ(compute_rf(build_ss_resnet(rho, 10)).max_rf, kTable[rho]);
}

TEST(Rf, VggBaseAndRemovals) {
  EXPECT_EQ(compute_rf(build_vgg(0, 10)).max_rf, 583);
  EXPECT_EQ(compute_rf(build_vgg(14, 10)).max_rf, 135);
  EXPECT_EQ(compute_rf(build_vgg(21, 10)).max_rf, 23);
  for (int n = 0; n <= 21; ++n) EXPECT_EQ(compute_rf(build_vgg(n, 10)).max_rf, kTable[21 - n]) << n;
}

TEST(Rf, MonotoneInRhoAndStepsBy8Or16Or32) {
  for (int rho = 1; rho <= 21; ++rho) {
    const auto d = rf_for_rho(rho) - rf_for_rho(rho - 1);
    EXPECT_TRUE(d == 8 || d == 16 || d == 32) << rho;
  }
}

TEST(Rf, TraceIsConsistent) {
  for (int rho : {0, 5, 21}) {
    const auto r = compute_rf(build_cp_resnet(rho, 1));
    ASSERT_EQ(r.traces.front().rf, 1);
    for (std::size_t i = 1; i < r.traces.size(); ++i) {
      const auto& t = r.traces[i];
      EXPECT_EQ(t.input_stride, r.traces[i - 1].cumulative_stride);
      EXPECT_EQ(t.cumulative_stride, t.input_stride * t.stride);
      EXPECT_EQ(t.rf, r.traces[i - 1].rf + (t.kernel - 1) * t.input_stride);
      EXPECT_GE(t.rf, r.traces[i - 1].rf);
    }
    EXPECT_EQ(r.traces.back().cumulative_stride, 16);
  }
}

TEST(Rf, OneByOneConvsAddNothing) {
  auto spec = build_cp_resnet(4, 1);
  const auto before = compute_rf(spec).max_rf;
  spec.blocks[11].conv_kernels = {1, 1};
  EXPECT_EQ(compute_rf(spec).max_rf, before);
}

TEST(Rf, InverseRho) {
  EXPECT_EQ(inverse_rho(135), 7);
  EXPECT_EQ(inverse_rho(140), 7);
  EXPECT_EQ(inverse_rho(23), 0);
  EXPECT_EQ(inverse_rho(10000), 21);
  EXPECT_THROW(inverse_rho(22), NoSolutionError);
  for (int rho = 0; rho <= 21; ++rho) EXPECT_EQ(inverse_rho(rf_for_rho(rho)), rho);
}

TEST(Rf, BuilderRanges) {
  EXPECT_THROW(build_cp_resnet(22, 1), ArgumentError);
  EXPECT_THROW(build_cp_resnet(-1, 1), ArgumentError);
  EXPECT_THROW(build_vgg(22, 1), ArgumentError);
  EXPECT_THROW(build_cp_resnet(3, 0), ArgumentError);
}

TEST(Rf, PrintedTableEndsWithMaxRf) {
  std::ostringstream os;
  print_rf_table(os, compute_rf(build_cp_resnet(7, 1)));
  const auto s = os.str();
  EXPECT_NE(s.find("max RF 135x135\n"), std::string::npos);
  EXPECT_EQ(s.substr(s.rfind("max RF")), "max RF 135x135\n");
  std::ostringstream csv;
  write_rf_csv(csv, compute_rf(build_cp_resnet(7, 1)));
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "layer_index,label,kind,kernel,stride,input_stride,cumulative_stride,rf");
}

TEST(EmpiricalRf, MatchesAnalyticForSmallRho) {
  for (int rho : {0, 1, 2, 3}) {
    const auto spec = build_cp_resnet(rho, 1, {1, 1, 1});
    const auto rf = compute_rf(spec).max_rf;
    EXPECT_EQ(empirical_rf(spec, static_cast<std::size_t>(rf + 48)), rf) << rho;
  }
}

TEST(EmpiricalRf, MatchesAnalyticOnRandomSpecs) {
  RngStream rng(2024);
  for (int i = 0; i < 20; ++i) {
    const auto spec = rfcnn::testing::random_small_spec(rng, i);
    const auto r = compute_rf(spec);
    std::int64_t stride = 1;
    for (const auto& t : r.traces) stride = std::max(stride, t.cumulative_stride);
    const auto size = static_cast<std::size_t>(2 * r.max_rf + 4 * stride + 1);
    EXPECT_EQ(empirical_rf(spec, size), r.max_rf) << to_text(spec);
  }
}

TEST(EmpiricalRf, ClippedInputThrows) {
  const auto spec = build_cp_resnet(0, 1, {1, 1, 1});
  EXPECT_THROW(empirical_rf(spec, 23), ClippedRfError);
  EXPECT_THROW(empirical_rf(spec, 16), ClippedRfError);
}
