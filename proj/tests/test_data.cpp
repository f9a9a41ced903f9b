#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "test_util.hpp"

using namespace rfcnn;

namespace {

std::vector<float> tone(double hz, double sr, std::size_t n) {
  std::vector<float> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = static_cast<float>(std::sin(2 * std::numbers::pi * hz * i / sr));
  return w;
}

// Best template correlation inside the class band, over all time offsets.
double matched_score(const Sample& s, const SyntheticTaggingDataset& ds, std::size_t c) {
  const auto P = ds.config.pattern_size;
  const auto& tpl = ds.templates[c];
  double best = -1e300;
  for (std::size_t t0 = 0; t0 + P <= s.n_frames; ++t0) {
    double acc = 0;
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t j = 0; j < P; ++j) acc += tpl[i * P + j] * s.values[(ds.band_offsets[c] + i) * s.n_frames + t0 + j];
    best = std::max(best, acc);
  }
  return best;
}

}  // namespace

TEST(Spectrogram, FrameCount) {
  EXPECT_EQ(frame_count(220500, 2048, 512), 427u);
  SpectrogramConfig cfg;
  EXPECT_EQ(cfg.hop(), 512);
  cfg.overlap = 0.25;
  EXPECT_EQ(cfg.hop(), 1536);
  EXPECT_THROW(frame_count(100, 2048, 512), ArgumentError);
}

TEST(Spectrogram, TenSecondClipShape) {
  SpectrogramConfig cfg;
  cfg.n_mels = 64;
  const auto s = compute_mel_spectrogram(tone(1000, 22050, 220500), cfg);
  EXPECT_EQ(s.n_frames, 427u);
  EXPECT_EQ(s.n_bins, 64u);
}

TEST(Spectrogram, ToneLandsInItsBand) {
  SpectrogramConfig cfg;
  cfg.n_mels = 40;
  const auto centers = mel_band_centers(cfg.n_mels, cfg.sample_rate);
  for (int m : {5, 12, 20, 33}) {
    const auto s = compute_mel_spectrogram(tone(centers[std::size_t(m)], cfg.sample_rate, 8192), cfg);
    for (std::size_t f = 0; f < s.n_frames; ++f) {
      std::size_t arg = 0;
      for (std::size_t b = 1; b < s.n_bins; ++b)
        if (s.at(b, f) > s.at(arg, f)) arg = b;
      EXPECT_EQ(arg, std::size_t(m));
    }
  }
}

TEST(Spectrogram, SilenceIsTheLogFloor) {
  SpectrogramConfig cfg;
  cfg.n_mels = 16;
  const auto s = compute_mel_spectrogram(std::vector<float>(4096, 0.0f), cfg);
  for (float v : s.values) EXPECT_FLOAT_EQ(v, static_cast<float>(std::log(cfg.log_floor)));
}

TEST(Spectrogram, BadHop) {
  SpectrogramConfig cfg;
  cfg.window_size = 1000;
  cfg.overlap = 0.3333;
  EXPECT_THROW(cfg.hop(), ArgumentError);
}

TEST(Normalization, TrainStatisticsOnly) {
  auto ds = generate_synthetic(rfcnn::testing::tiny_synthetic(3)).data;
  const auto st = compute_normalization(ds.train);
  normalize(ds.train, st);
  normalize(ds.test, st);
  const auto after = compute_normalization(ds.train);
  for (std::size_t b = 0; b < after.mean.size(); ++b) {
    EXPECT_LT(std::abs(after.mean[b]), 1e-5);
    EXPECT_NEAR(after.std[b], 1.0, 1e-4);
  }
  // the shifted test split keeps a visible offset: stats were not refit on it
  const auto test = compute_normalization(ds.test);
  double mean_abs = 0;
  for (double m : test.mean) mean_abs += std::abs(m);
  EXPECT_GT(mean_abs / static_cast<double>(test.mean.size()), 0.05);
}

TEST(Normalization, ConstantBinBecomesZero) {
  Sample s{"a", 2, 3, {5, 5, 5, 1, 2, 3}, {1}, {1}};
  std::vector<Sample> v{s, s};
  const auto st = compute_normalization(v);
  normalize(v, st);
  for (std::size_t f = 0; f < 3; ++f) EXPECT_EQ(v[0].values[f], 0.0f);
}

TEST(Crop, IdentityAtFullLength) {
  Sample s{"a", 2, 4, {1, 2, 3, 4, 5, 6, 7, 8}, {1}, {1}};
  RngStream rng(1);
  EXPECT_EQ(random_crop(s, 4, rng).values, s.values);
  EXPECT_THROW(random_crop(s, 5, rng), ArgumentError);
  const auto c = random_crop(s, 2, rng);
  EXPECT_EQ(c.n_frames, 2u);
  EXPECT_EQ(c.values[2] - c.values[0], 4.0f);
}

TEST(Crop, StartPositionsAreUniform) {
  Sample s;
  s.n_bins = 1;
  s.n_frames = 20;
  for (int i = 0; i < 20; ++i) s.values.push_back(float(i));
  RngStream rng(5);
  const std::size_t k = 11;  // valid starts 0..10
  std::vector<double> counts(k, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(random_crop(s, 10, rng).values[0])] += 1;
  double chi2 = 0, e = double(n) / k;
  for (double c : counts) chi2 += (c - e) * (c - e) / e;
  const double dof = k - 1;
  EXPECT_LT(chi2, dof + 3 * std::sqrt(2 * dof));
  RngStream a(9), b(9);
  EXPECT_EQ(random_crop(s, 10, a).values, random_crop(s, 10, b).values);
}

TEST(Synthetic, DeterministicAndShaped) {
  const auto cfg = rfcnn::testing::tiny_synthetic(4);
  const auto a = generate_synthetic(cfg), b = generate_synthetic(cfg);
  ASSERT_EQ(a.data.train.size(), cfg.n_train);
  ASSERT_EQ(a.data.test.size(), cfg.n_test);
  EXPECT_EQ(a.data.train[3].values, b.data.train[3].values);
  EXPECT_EQ(a.data.train[0].values.size(), cfg.n_bins * cfg.n_frames);
  auto other = cfg;
  other.seed = 5;
  EXPECT_NE(generate_synthetic(other).data.train[3].values, a.data.train[3].values);
}

TEST(Synthetic, LabelDensityAndTemplates) {
  SyntheticConfig cfg;
  cfg.n_train = 400;
  cfg.n_test = 10;
  const auto ds = generate_synthetic(cfg);
  double pos = 0;
  for (const auto& s : ds.data.train)
    for (float y : s.labels) pos += y;
  const double rate = pos / (400.0 * cfg.n_classes);
  EXPECT_NEAR(rate, cfg.label_density, 0.03);
  for (const auto& t : ds.templates) {
    double sum = 0, peak = 0;
    for (float v : t) {
      sum += v;
      peak = std::max(peak, double(std::abs(v)));
    }
    EXPECT_NEAR(sum, 0.0, 1e-4);
    EXPECT_NEAR(peak, 1.0, 1e-6);
  }
}

TEST(Synthetic, MatchedFilterSolvesTheTestSplit) {
  const auto ds = generate_synthetic(SyntheticConfig{});
  PredictionSet p;
  p.n_samples = ds.data.test.size();
  p.n_classes = ds.data.n_classes;
  std::vector<double> raw;
  for (const auto& s : ds.data.test)
    for (std::size_t c = 0; c < p.n_classes; ++c) {
      raw.push_back(matched_score(s, ds, c));
      p.labels.push_back(s.labels[c] >= 0.5f);
    }
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  for (double r : raw) p.scores.push_back((r - *lo) / (*hi - *lo));
  EXPECT_GT(macro_pr_auc(p), 0.95);
}

TEST(Synthetic, RejectsImpossibleLayouts) {
  auto cfg = rfcnn::testing::tiny_synthetic();
  cfg.n_classes = 10;
  EXPECT_THROW(generate_synthetic(cfg), ArgumentError);
  cfg = rfcnn::testing::tiny_synthetic();
  cfg.context_min_distance = 40;
  EXPECT_THROW(generate_synthetic(cfg), ArgumentError);
}

TEST(Container, RoundTripAndManifest) {
  auto ds = generate_synthetic(rfcnn::testing::tiny_synthetic(2)).data;
  ds.train[0].labels[1] = 0.25f;
  ds.train[0].mask[2] = 0;
  const auto dir = std::filesystem::temp_directory_path() / "rfcnn_container_test";
  std::filesystem::create_directories(dir);
  const auto c = (dir / "d.rfdata").string(), m = (dir / "d.csv").string();
  save_dataset(c, m, ds);
  const auto back = load_dataset(c, m);
  ASSERT_EQ(back.train.size(), ds.train.size());
  ASSERT_EQ(back.test.size(), ds.test.size());
  EXPECT_EQ(back.n_classes, ds.n_classes);
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    EXPECT_EQ(back.train[i].id, ds.train[i].id);
    EXPECT_EQ(back.train[i].values, ds.train[i].values);
    EXPECT_EQ(back.train[i].labels, ds.train[i].labels);
    EXPECT_EQ(back.train[i].mask, ds.train[i].mask);
  }
  // byte-exact rewrite
  std::ostringstream a, b;
  std::vector<const Sample*> pa, pb;
  for (const auto& s : ds.train) pa.push_back(&s);
  for (const auto& s : back.train) pb.push_back(&s);
  write_dataset_container(a, ds.n_classes, pa);
  write_dataset_container(b, back.n_classes, pb);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str().substr(0, 7), "RFDATA1");

  std::ofstream(m) << "id,split\ntrain_0,train\n";
  EXPECT_THROW(load_dataset(c, m), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Container, TruncatedFails) {
  auto ds = generate_synthetic(rfcnn::testing::tiny_synthetic()).data;
  std::ostringstream os;
  std::vector<const Sample*> p{&ds.train[0]};
  write_dataset_container(os, ds.n_classes, p);
  std::istringstream is(os.str().substr(0, os.str().size() - 1));
  std::size_t n = 0;
  EXPECT_THROW(read_dataset_container(is, n), FormatError);
}
