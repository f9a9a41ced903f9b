#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

using namespace rfcnn;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("rfcnn_test_" + name);
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(Mixup, DegenerateAndMidpoint) {
  std::vector<float> x1{1, 2, 3}, x2{0, 2, 4}, y1{1, 0}, y2{0, 1};
  auto m = mixup_batch(x1, y1, x2, y2, 1.0);
  EXPECT_EQ(m.x, x1);
  EXPECT_EQ(m.y, y1);
  m = mixup_batch(x1, y1, x2, y2, 0.0);
  EXPECT_EQ(m.x, x2);
  std::vector<float> z{0}, two{2};
  EXPECT_EQ(mixup_batch(z, y1, two, y2, 0.5).x[0], 1.0f);
  EXPECT_THROW(mixup_batch(x1, y1, x2, y2, 1.5), ArgumentError);
}

TEST(Mixup, IsAffine) {
  RngStream rng(3);
  for (int t = 0; t < 100; ++t) {
    std::vector<float> x1(8), x2(8), y1(3), y2(3);
    for (auto& v : x1) v = float(rng.normal());
    for (auto& v : x2) v = float(rng.normal());
    for (auto& v : y1) v = float(rng.uniform());
    for (auto& v : y2) v = float(rng.uniform());
    const double lam = rng.uniform();
    const auto m = mixup_batch(x1, y1, x2, y2, lam);
    for (std::size_t i = 0; i < 8; ++i) {
      EXPECT_NEAR(m.x[i], lam * x1[i] + (1 - lam) * x2[i], 1e-6);
      // bit-exact against the same float expression
      EXPECT_EQ(m.x[i], float(lam) * x1[i] + float(1 - lam) * x2[i]);
    }
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(m.y[i], lam * y1[i] + (1 - lam) * y2[i], 1e-6);
  }
}

TEST(Mixup, UnknownMaskIsUnion) {
  std::vector<float> x{0}, y{0, 0, 0, 0};
  std::vector<std::uint8_t> m1{1, 1, 0, 0}, m2{1, 0, 1, 0};
  EXPECT_EQ(mixup_batch(x, y, x, y, 0.3, m1, m2).mask, (std::vector<std::uint8_t>{1, 0, 0, 0}));
}

TEST(Mixup, LambdaDistribution) {
  RngStream rng(11);
  double s = 0;
  int extreme = 0;
  for (int i = 0; i < 10000; ++i) {
    const double l = sample_mixup_lambda(rng, 0.2);
    ASSERT_TRUE(l >= 0 && l <= 1);
    s += l;
    extreme += l < 0.1 || l > 0.9;
  }
  EXPECT_NEAR(s / 10000, 0.5, 0.02);
  EXPECT_GT(extreme, 5000);  // Beta(0.2,0.2) is U-shaped
  EXPECT_THROW(sample_mixup_lambda(rng, 0.0), ArgumentError);
}

TEST(Window, ConstantHasZeroStd) {
  std::vector<double> v(10, 0.7);
  const auto w = window_stat(v);
  EXPECT_DOUBLE_EQ(w.mean, 0.7);
  EXPECT_NEAR(w.std, 0.0, 1e-15);
  std::vector<double> u{1, 3};
  EXPECT_DOUBLE_EQ(window_stat(u).std, 1.0);
}

TEST(TrainConfigTest, Validation) {
  TrainConfig c;
  c.epochs = 5;
  c.eval_window = 6;
  EXPECT_THROW(c.validate(), ArgumentError);
  c.eval_window = 5;
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(Train, LossDecreasesOnSeparableData) {
  // class 0 = bright clip, class 1 = dark clip
  TaggingDataset ds;
  ds.n_classes = 2;
  RngStream rng(1);
  for (int i = 0; i < 32; ++i) {
    const bool bright = i % 2 == 0;
    Sample s{"s" + std::to_string(i), 16, 16, {}, {bright ? 1.0f : 0.0f, bright ? 0.0f : 1.0f}, {1, 1}};
    for (int k = 0; k < 256; ++k) s.values.push_back(float((bright ? 1.0 : -1.0) + 0.3 * rng.normal()));
    (i < 24 ? ds.train : ds.test).push_back(s);
  }
  auto st = instantiate<float>(build_cp_resnet(0, 2, {4, 4, 4}), 0);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.eval_window = 5;
  cfg.batch_size = 8;
  cfg.learning_rate = 3e-3;
  const auto r = train(st, ds, cfg);
  ASSERT_EQ(r.history.size(), 5u);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  EXPECT_EQ(st.adam.step_count, 15u);
}

TEST(Train, SameSeedSameTrajectory) {
  const auto data = prepare_dataset(rfcnn::testing::tiny_experiment("unused"));
  auto run = [&](TrainConfig cfg) {
    auto st = instantiate<float>(build_ss_resnet(1, data.n_classes, {4, 4, 4}), 3);
    return train(st, data, cfg).history;
  };
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.eval_window = 2;
  cfg.batch_size = 8;
  cfg.mixup_enabled = true;
  cfg.crop_frames = 24;
  cfg.seed = 5;
  const auto a = run(cfg), b = run(cfg);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].train_loss, b[i].train_loss);
    EXPECT_EQ(a[i].test_loss, b[i].test_loss);
  }
  cfg.seed = 6;
  EXPECT_NE(run(cfg)[0].train_loss, a[0].train_loss);
}

TEST(Experiment, ConfigRoundTripAndErrors) {
  const auto c = rfcnn::testing::tiny_experiment("out", 3);
  const auto back = parse_experiment_config(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(run_id(back), run_id(c));
  EXPECT_EQ(run_id(c).size(), 12u);
  auto j = to_json(c);
  j["train"]["seed"] = 99;
  EXPECT_NE(run_id(parse_experiment_config(j)), run_id(c));

  EXPECT_THROW(parse_experiment_config(nlohmann::json{{"arch", "cp_resnet"}}), ArgumentError);  // no rho
  EXPECT_THROW(parse_experiment_config(nlohmann::json{{"arch", "vgg"}, {"rho", 2}}), ArgumentError);
  EXPECT_THROW(parse_experiment_config(nlohmann::json{{"arch", "cp_resnet"}, {"rho", 1}, {"bogus", 1}}), ArgumentError);
  EXPECT_THROW(parse_experiment_config(nlohmann::json{{"arch", "cp_resnet"}, {"rho", "x"}}), ArgumentError);
  EXPECT_THROW(parse_experiment_config(nlohmann::json{{"arch", "cp_resnet"}, {"rho", 1}, {"widths", {1, 2}}}),
               ArgumentError);
  const auto sw = parse_experiment_config(nlohmann::json{{"arch", "vgg"}, {"sweep", {{"params", {0, 7}}}}});
  EXPECT_EQ(sw.sweep_params, (std::vector<int>{0, 7}));
}

TEST(Experiment, MissingContainerIsArgumentError) {
  auto c = rfcnn::testing::tiny_experiment("out");
  c.dataset.type = DatasetSource::Type::Container;
  c.dataset.container = "/nonexistent/x.rfdata";
  c.dataset.manifest = "/nonexistent/x.csv";
  EXPECT_THROW(prepare_dataset(c), ArgumentError);
}

TEST(Experiment, RunDirectoryContentsAndDeterminism) {
  const auto dir = scratch("run");
  auto c = rfcnn::testing::tiny_experiment(dir.string(), 1);
  c.train.epochs = 3;
  c.train.eval_window = 2;
  c.train.checkpoint_every = 2;
  const auto data = prepare_dataset(c);
  const auto r = run_experiment(c, data);
  EXPECT_EQ(r.run_dir, dir / ("cp_resnet_rho1_" + r.run_id));
  for (const char* f : {"config.json", "metrics.csv", "summary.csv", "checkpoint_epoch002.bin", "checkpoint_epoch003.bin",
                        "checkpoint_final.bin"}) {
    EXPECT_TRUE(fs::exists(r.run_dir / f)) << f;
  }
  const auto csv = slurp(r.run_dir / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "run_id,epoch,rf,arch,metric_name,value");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 5);

  // the snapshot reproduces the run bit for bit
  const auto snap = load_experiment_config((r.run_dir / "config.json").string());
  EXPECT_EQ(run_id(snap), r.run_id);
  fs::rename(r.run_dir, dir / "first");
  run_experiment(snap, prepare_dataset(snap));
  EXPECT_EQ(slurp(r.run_dir / "metrics.csv"), slurp(dir / "first" / "metrics.csv"));
  EXPECT_EQ(slurp(r.run_dir / "checkpoint_final.bin"), slurp(dir / "first" / "checkpoint_final.bin"));

  // the final checkpoint evaluates to the logged last-epoch test loss
  auto st = load_checkpoint<float>((r.run_dir / "checkpoint_final.bin").string());
  const auto ev = evaluate(st.model, data.test, data.n_classes, c.train.batch_size);
  EXPECT_NEAR(ev.loss, r.report.history.back().test_loss, 1e-12);
  fs::remove_all(dir);
}

TEST(Experiment, SweepWritesOneGroupPerSetting) {
  const auto dir = scratch("sweep");
  auto c = rfcnn::testing::tiny_experiment(dir.string());
  c.train.checkpoint_every = 0;
  for (int parallel : {1, 2}) {
    const auto res = run_sweep(c, {0, 2, 4}, parallel);
    ASSERT_EQ(res.size(), 3u);
    EXPECT_EQ(res[0].rf, 23);
    EXPECT_EQ(res[1].rf, 39);
    EXPECT_EQ(res[2].rf, 71);
    const auto csv = slurp(dir / "sweep.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "rf,arch,train_loss,test_loss,macro_pr_auc,f1_classical,f1_posneg,epoch");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 2);
  }
  EXPECT_THROW(run_sweep(c, {0, 22}), ArgumentError);
  fs::remove_all(dir);
}
