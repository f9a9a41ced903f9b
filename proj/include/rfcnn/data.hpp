#pragma once

// Spectrogram front end, normalization, dataset containers and a synthetic
// tagging task.
//
// Dataset container (little-endian):
//
//   "RFDATA1"                     7 bytes magic
//   u16 version                   currently 1
//   u32 n_classes
//   u32 n_samples
//   per sample:
//     u32 length, bytes           sample id
//     u32 n_labels                equals n_classes
//     f32 labels[n_labels]        soft labels in [0,1]
//     u8  mask[n_labels]          1 = known, 0 = unknown
//     u32 rank, u32 extents[rank] spectrogram extents (freq, time)
//     f32 payload[prod(extents)]
//
// The manifest is a CSV with header "id,split" and one row per sample; split
// is "train" or "test".

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "rfcnn/checkpoint.hpp"
#include "rfcnn/errors.hpp"
#include "rfcnn/random.hpp"

namespace rfcnn {

struct SpectrogramConfig {
  int n_mels = 256;
  int window_size = 2048;
  double overlap = 0.75;  // 0.25 for long clips
  double sample_rate = 22050.0;
  bool log_compress = true;
  double log_floor = 1e-10;

  int hop() const {
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ArgumentError("overlap must lie in [0,1)");
    const double h = window_size * (1.0 - overlap);
    if (h < 1.0 || std::floor(h) != h) throw ArgumentError("window_size * (1 - overlap) must be a positive integer");
    return static_cast<int>(h);
  }
};

/// Row-major [n_mels x n_frames].
struct Spectrogram {
  std::size_t n_bins = 0;
  std::size_t n_frames = 0;
  std::vector<float> values;

  float at(std::size_t bin, std::size_t frame) const { return values[bin * n_frames + frame]; }
};

inline std::size_t frame_count(std::size_t n_samples, int window, int hop) {
  if (n_samples < static_cast<std::size_t>(window)) throw ArgumentError("waveform shorter than one window");
  return (n_samples - static_cast<std::size_t>(window)) / static_cast<std::size_t>(hop) + 1;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Centre frequency (Hz) of each triangular mel band between 0 and Nyquist.
inline std::vector<double> mel_band_centers(int n_mels, double sample_rate) {
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> c(static_cast<std::size_t>(n_mels));
  for (int m = 0; m < n_mels; ++m) c[std::size_t(m)] = mel_to_hz(top * (m + 1) / (n_mels + 1));
  return c;
}

/// [n_mels x (window/2 + 1)] triangular filters.
inline std::vector<double> mel_filterbank(int n_mels, int window, double sample_rate) {
  const auto n_fft_bins = static_cast<std::size_t>(window / 2 + 1);
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(static_cast<std::size_t>(n_mels + 2));
  for (int i = 0; i < n_mels + 2; ++i) edges[std::size_t(i)] = mel_to_hz(top * i / (n_mels + 1));
  std::vector<double> fb(static_cast<std::size_t>(n_mels) * n_fft_bins, 0.0);
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[std::size_t(m)], mid = edges[std::size_t(m) + 1], hi = edges[std::size_t(m) + 2];
    for (std::size_t k = 0; k < n_fft_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / window;
      double w = 0.0;
      if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
      fb[std::size_t(m) * n_fft_bins + k] = w;
    }
  }
  return fb;
}

namespace detail {

// FFTW planning is not thread-safe.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace detail

/// Magnitude STFT (Hann window, no centring) -> mel filterbank -> optional
/// log compression.
inline Spectrogram compute_mel_spectrogram(std::span<const float> waveform, const SpectrogramConfig& cfg) {
  const int hop = cfg.hop();
  if (cfg.n_mels < 1) throw ArgumentError("n_mels must be >= 1");
  const auto n_frames = frame_count(waveform.size(), cfg.window_size, hop);
  const auto N = static_cast<std::size_t>(cfg.window_size);
  const auto n_fft_bins = N / 2 + 1;
  const auto fb = mel_filterbank(cfg.n_mels, cfg.window_size, cfg.sample_rate);

  std::vector<double> window(N);
  for (std::size_t i = 0; i < N; ++i) window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / N);

  double* in = fftw_alloc_real(N);
  fftw_complex* out = fftw_alloc_complex(n_fft_bins);
  fftw_plan plan;
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(N), in, out, FFTW_ESTIMATE);
  }

  Spectrogram spec;
  spec.n_bins = static_cast<std::size_t>(cfg.n_mels);
  spec.n_frames = n_frames;
  spec.values.assign(spec.n_bins * n_frames, 0.0f);
  std::vector<double> mag(n_fft_bins);
  for (std::size_t f = 0; f < n_frames; ++f) {
    const auto start = f * static_cast<std::size_t>(hop);
    for (std::size_t i = 0; i < N; ++i) in[i] = waveform[start + i] * window[i];
    fftw_execute(plan);
    for (std::size_t k = 0; k < n_fft_bins; ++k) mag[k] = std::hypot(out[k][0], out[k][1]);
    for (std::size_t m = 0; m < spec.n_bins; ++m) {
      double e = 0.0;
      const double* w = fb.data() + m * n_fft_bins;
      for (std::size_t k = 0; k < n_fft_bins; ++k) e += w[k] * mag[k];
      if (cfg.log_compress) e = std::log(e + cfg.log_floor);
      spec.values[m * n_frames + f] = static_cast<float>(e);
    }
  }
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(out);
  return spec;
}

/// One tagged example: a [bins x frames] spectrogram, soft labels and a
/// known-label mask.
struct Sample {
  std::string id;
  std::size_t n_bins = 0;
  std::size_t n_frames = 0;
  std::vector<float> values;
  std::vector<float> labels;
  std::vector<std::uint8_t> mask;
};

struct TaggingDataset {
  std::size_t n_classes = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> std;
};

inline constexpr double kStdFloor = 1e-6;

/// Per-bin statistics over every frame of the given (training) samples.
inline NormalizationStats compute_normalization(const std::vector<Sample>& train) {
  if (train.empty()) throw ArgumentError("compute_normalization: empty training split");
  const auto bins = train.front().n_bins;
  std::vector<double> s(bins, 0.0), ss(bins, 0.0);
  std::size_t count = 0;
  for (const auto& x : train) {
    if (x.n_bins != bins) throw DimensionError("compute_normalization: samples disagree on bin count");
    for (std::size_t b = 0; b < bins; ++b)
      for (std::size_t f = 0; f < x.n_frames; ++f) s[b] += x.values[b * x.n_frames + f];
    count += x.n_frames;
  }
  NormalizationStats st;
  st.mean.resize(bins);
  st.std.resize(bins);
  for (std::size_t b = 0; b < bins; ++b) st.mean[b] = s[b] / static_cast<double>(count);
  for (const auto& x : train)
    for (std::size_t b = 0; b < bins; ++b)
      for (std::size_t f = 0; f < x.n_frames; ++f) {
        const double d = x.values[b * x.n_frames + f] - st.mean[b];
        ss[b] += d * d;
      }
  for (std::size_t b = 0; b < bins; ++b) st.std[b] = std::max(std::sqrt(ss[b] / static_cast<double>(count)), kStdFloor);
  return st;
}

inline void normalize(Sample& x, const NormalizationStats& st) {
  if (st.mean.size() != x.n_bins) throw DimensionError("normalize: stats have a different bin count");
  for (std::size_t b = 0; b < x.n_bins; ++b)
    for (std::size_t f = 0; f < x.n_frames; ++f) {
      auto& v = x.values[b * x.n_frames + f];
      v = static_cast<float>((v - st.mean[b]) / st.std[b]);
    }
}

inline void normalize(std::vector<Sample>& split, const NormalizationStats& st) {
  for (auto& x : split) normalize(x, st);
}

/// Contiguous time slice with a uniformly drawn start frame.
inline Sample random_crop(const Sample& x, std::size_t crop_frames, RngStream& rng) {
  if (crop_frames == 0 || crop_frames > x.n_frames) {
    throw ArgumentError("random_crop: clip has " + std::to_string(x.n_frames) + " frames, crop needs " +
                        std::to_string(crop_frames));
  }
  const auto start = rng.below(x.n_frames - crop_frames + 1);
  Sample out = x;
  out.n_frames = crop_frames;
  out.values.resize(x.n_bins * crop_frames);
  for (std::size_t b = 0; b < x.n_bins; ++b) {
    std::copy_n(x.values.begin() + static_cast<std::ptrdiff_t>(b * x.n_frames + start), crop_frames,
                out.values.begin() + static_cast<std::ptrdiff_t>(b * crop_frames));
  }
  return out;
}

// --------------------------------------------------------------------------
// Synthetic tagging task.
//
// Each class owns a zero-mean pattern_size x pattern_size template living in
// its own frequency band; a positive label stamps it at a uniformly drawn time
// position over structured noise. Training clips additionally carry a
// long-range "context" cue: two identical class-agnostic bumps whose time
// distance is tied to one of the clip's positive classes. That distance is
// wider than small receptive fields can see. In the test split the cue is
// assigned at random and the background level/gain is shifted, so models that
// lean on global context degrade while local template detectors transfer.
// --------------------------------------------------------------------------

struct SyntheticConfig {
  std::size_t n_classes = 4;
  std::size_t pattern_size = 7;
  std::size_t n_train = 1024;
  std::size_t n_test = 256;
  std::uint64_t seed = 0;
  std::size_t n_bins = 32;
  std::size_t n_frames = 48;
  double label_density = 0.3;
  double pattern_amplitude = 2.0;
  double amplitude_jitter = 0.3;   // stamped amplitude ~ A * U[1 - j, 1]
  double noise_std = 0.3;
  double noise_time_corr = 0.5;    // AR(1) coefficient along time
  double context_amplitude = 1.5;
  double context_correlation = 0.9;  // P(train cue follows a positive class)
  std::size_t context_min_distance = 24;
  std::size_t context_step = 6;
  double test_offset = 0.25;
  double test_gain = 1.15;
  double unknown_fraction = 0.0;
};

struct SyntheticTaggingDataset {
  TaggingDataset data;
  SyntheticConfig config;
  std::vector<std::vector<float>> templates;  // per class, pattern_size^2 row-major
  std::vector<std::size_t> band_offsets;      // first bin of each class band
};

namespace detail {

inline void add_bump(std::vector<float>& v, std::size_t n_frames, std::size_t bin, std::size_t frame, double amp) {
  static constexpr double kernel[3] = {0.5, 1.0, 0.5};
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j) {
      const auto b = static_cast<std::ptrdiff_t>(bin) + i, f = static_cast<std::ptrdiff_t>(frame) + j;
      if (b < 0 || f < 0 || f >= static_cast<std::ptrdiff_t>(n_frames)) continue;
      const auto idx = static_cast<std::size_t>(b) * n_frames + static_cast<std::size_t>(f);
      if (idx < v.size()) v[idx] += static_cast<float>(amp * kernel[i + 1] * kernel[j + 1]);
    }
}

inline Sample synth_sample(const SyntheticConfig& cfg, const SyntheticTaggingDataset& ds, bool is_test,
                           std::size_t index, RngStream rng) {
  Sample s;
  s.id = (is_test ? "test_" : "train_") + std::to_string(index);
  s.n_bins = cfg.n_bins;
  s.n_frames = cfg.n_frames;
  s.values.assign(cfg.n_bins * cfg.n_frames, 0.0f);
  s.labels.assign(cfg.n_classes, 0.0f);
  s.mask.assign(cfg.n_classes, 1);

  // Structured background: AR(1) noise along time over a sloped spectral
  // envelope.
  const double gain = is_test ? cfg.test_gain : 1.0;
  const double offset = is_test ? cfg.test_offset : 0.0;
  const double rho = cfg.noise_time_corr;
  const double innov = std::sqrt(1.0 - rho * rho);
  for (std::size_t b = 0; b < cfg.n_bins; ++b) {
    const double envelope = 0.5 * (1.0 - static_cast<double>(b) / static_cast<double>(cfg.n_bins));
    double prev = rng.normal();
    for (std::size_t f = 0; f < cfg.n_frames; ++f) {
      const double e = f == 0 ? prev : rho * prev + innov * rng.normal();
      prev = e;
      s.values[b * cfg.n_frames + f] = static_cast<float>(gain * (envelope + cfg.noise_std * e) + offset);
    }
  }

  const auto P = cfg.pattern_size;
  std::vector<std::size_t> positives;
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    if (rng.uniform() >= cfg.label_density) continue;
    positives.push_back(c);
    s.labels[c] = 1.0f;
    const double amp = cfg.pattern_amplitude * rng.uniform(1.0 - cfg.amplitude_jitter, 1.0);
    const auto t0 = rng.below(cfg.n_frames - P + 1);
    const auto& tpl = ds.templates[c];
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t j = 0; j < P; ++j) {
        s.values[(ds.band_offsets[c] + i) * cfg.n_frames + t0 + j] += static_cast<float>(amp * tpl[i * P + j]);
      }
  }

  // Long-range context cue.
  std::size_t cue_class;
  if (!is_test && !positives.empty() && rng.uniform() < cfg.context_correlation) {
    cue_class = positives[rng.below(positives.size())];
  } else {
    cue_class = rng.below(cfg.n_classes);
  }
  const auto distance = cfg.context_min_distance + cue_class * cfg.context_step;
  const auto first = rng.below(cfg.n_frames - distance);
  const auto bin = rng.below(cfg.n_bins);
  add_bump(s.values, cfg.n_frames, bin, first, gain * cfg.context_amplitude);
  add_bump(s.values, cfg.n_frames, bin, first + distance, gain * cfg.context_amplitude);

  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    if (cfg.unknown_fraction > 0.0 && rng.uniform() < cfg.unknown_fraction) s.mask[c] = 0;
  }
  return s;
}

}  // namespace detail

inline SyntheticTaggingDataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.n_classes < 1) throw ArgumentError("synthetic: n_classes must be >= 1");
  if (cfg.pattern_size < 2 || cfg.pattern_size > cfg.n_frames) {
    throw ArgumentError("synthetic: pattern_size must lie in [2, n_frames]");
  }
  if (cfg.n_classes * cfg.pattern_size > cfg.n_bins) {
    throw ArgumentError("synthetic: class bands (n_classes * pattern_size) exceed the frequency extent");
  }
  const auto widest = cfg.context_min_distance + (cfg.n_classes - 1) * cfg.context_step;
  if (widest + 1 >= cfg.n_frames) throw ArgumentError("synthetic: context distances exceed the time extent");
  if (!(cfg.label_density >= 0.0 && cfg.label_density <= 1.0)) throw ArgumentError("synthetic: label_density outside [0,1]");

  SyntheticTaggingDataset ds;
  ds.config = cfg;
  ds.data.n_classes = cfg.n_classes;
  const RngStream root(cfg.seed);
  const auto P = cfg.pattern_size;
  const auto spacing = cfg.n_bins / cfg.n_classes;
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    // Gabor-like patch: class-specific orientation, random phase, zero mean,
    // peak magnitude 1.
    auto rng = root.split(1000 + c);
    const double theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(cfg.n_classes);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double centre = (static_cast<double>(P) - 1.0) / 2.0;
    const double sigma = static_cast<double>(P) / 3.0;
    std::vector<double> raw(P * P);
    double mean = 0.0;
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t j = 0; j < P; ++j) {
        const double di = static_cast<double>(i) - centre, dj = static_cast<double>(j) - centre;
        const double u = di * std::cos(theta) + dj * std::sin(theta);
        const double v = std::cos(2.0 * std::numbers::pi * 1.5 * u / static_cast<double>(P) + phase) *
                         std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
        raw[i * P + j] = v;
        mean += v;
      }
    mean /= static_cast<double>(raw.size());
    double peak = 0.0;
    for (auto& v : raw) {
      v -= mean;
      peak = std::max(peak, std::abs(v));
    }
    std::vector<float> tpl(P * P);
    for (std::size_t i = 0; i < tpl.size(); ++i) tpl[i] = static_cast<float>(raw[i] / peak);
    ds.templates.push_back(std::move(tpl));
    ds.band_offsets.push_back(c * spacing + (spacing - P) / 2);
  }
  const auto train_rng = root.split(1), test_rng = root.split(2);
  for (std::size_t i = 0; i < cfg.n_train; ++i) {
    ds.data.train.push_back(detail::synth_sample(cfg, ds, false, i, train_rng.split(i)));
  }
  for (std::size_t i = 0; i < cfg.n_test; ++i) {
    ds.data.test.push_back(detail::synth_sample(cfg, ds, true, i, test_rng.split(i)));
  }
  return ds;
}

// --------------------------------------------------------------------------
// Containers.
// --------------------------------------------------------------------------

inline constexpr char kDatasetMagic[] = "RFDATA1";
inline constexpr std::uint16_t kDatasetVersion = 1;

inline void write_dataset_container(std::ostream& os, std::size_t n_classes, const std::vector<const Sample*>& samples) {
  os.write(kDatasetMagic, 7);
  io::put_u16(os, kDatasetVersion);
  io::put_u32(os, static_cast<std::uint32_t>(n_classes));
  io::put_u32(os, static_cast<std::uint32_t>(samples.size()));
  for (const Sample* s : samples) {
    if (s->labels.size() != n_classes || s->mask.size() != n_classes) {
      throw DimensionError("dataset container: sample '" + s->id + "' has the wrong label count");
    }
    io::put_string(os, s->id);
    io::put_u32(os, static_cast<std::uint32_t>(n_classes));
    for (float y : s->labels) io::put_f32(os, y);
    os.write(reinterpret_cast<const char*>(s->mask.data()), static_cast<std::streamsize>(n_classes));
    io::put_u32(os, 2);
    io::put_u32(os, static_cast<std::uint32_t>(s->n_bins));
    io::put_u32(os, static_cast<std::uint32_t>(s->n_frames));
    for (float v : s->values) io::put_f32(os, v);
  }
  if (!os) throw FormatError("dataset container write failed");
}

/// Writes `<stem>.rfdata` and `<stem>.csv` for a train/test dataset.
inline void save_dataset(const std::string& container_path, const std::string& manifest_path, const TaggingDataset& ds) {
  std::vector<const Sample*> all;
  for (const auto& s : ds.train) all.push_back(&s);
  for (const auto& s : ds.test) all.push_back(&s);
  std::ofstream os(container_path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + container_path + "' for writing");
  write_dataset_container(os, ds.n_classes, all);
  std::ofstream man(manifest_path);
  if (!man) throw FormatError("cannot open '" + manifest_path + "' for writing");
  man << "id,split\n";
  for (const auto& s : ds.train) man << s.id << ",train\n";
  for (const auto& s : ds.test) man << s.id << ",test\n";
}

inline std::vector<Sample> read_dataset_container(std::istream& is, std::size_t& n_classes) {
  char magic[7];
  io::read_exact(is, magic, 7, "magic");
  if (std::memcmp(magic, kDatasetMagic, 7) != 0) throw FormatError("not a dataset container (bad magic)");
  const auto version = io::get_u16(is);
  if (version != kDatasetVersion) throw FormatError("unsupported dataset container version " + std::to_string(version));
  n_classes = io::get_u32(is);
  const auto count = io::get_u32(is);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s;
    s.id = io::get_string(is, 4096);
    const auto n_labels = io::get_u32(is);
    if (n_labels != n_classes) throw FormatError("sample '" + s.id + "' label count differs from header");
    s.labels.resize(n_labels);
    for (auto& y : s.labels) y = io::get_f32(is);
    s.mask.resize(n_labels);
    io::read_exact(is, s.mask.data(), n_labels, "mask");
    const auto rank = io::get_u32(is);
    if (rank != 2) throw FormatError("sample '" + s.id + "' spectrogram must have rank 2");
    s.n_bins = io::get_u32(is);
    s.n_frames = io::get_u32(is);
    if (s.n_bins == 0 || s.n_frames == 0 || s.n_bins * s.n_frames > (1u << 28)) {
      throw FormatError("sample '" + s.id + "' has implausible extents");
    }
    s.values.resize(s.n_bins * s.n_frames);
    for (auto& v : s.values) v = io::get_f32(is);
    out.push_back(std::move(s));
  }
  return out;
}

inline TaggingDataset load_dataset(const std::string& container_path, const std::string& manifest_path) {
  std::ifstream is(container_path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset container '" + container_path + "'");
  TaggingDataset ds;
  auto samples = read_dataset_container(is, ds.n_classes);

  std::ifstream man(manifest_path);
  if (!man) throw FormatError("cannot open manifest '" + manifest_path + "'");
  std::map<std::string, std::string> split_of;
  std::string line;
  if (!std::getline(man, line) || line != "id,split") throw FormatError("manifest must start with 'id,split'");
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw FormatError("manifest row without a comma: '" + line + "'");
    auto split = line.substr(comma + 1);
    if (!split.empty() && split.back() == '\r') split.pop_back();
    if (split != "train" && split != "test") throw FormatError("manifest split must be train or test: '" + line + "'");
    split_of[line.substr(0, comma)] = split;
  }
  for (auto& s : samples) {
    auto it = split_of.find(s.id);
    if (it == split_of.end()) throw FormatError("sample '" + s.id + "' is missing from the manifest");
    (it->second == "train" ? ds.train : ds.test).push_back(std::move(s));
  }
  return ds;
}

}  // namespace rfcnn
