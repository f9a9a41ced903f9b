#pragma once

// Experiment configuration (JSON), run directories and RF sweeps.
//
// Config schema (every key optional unless noted):
//
//   {
//     "arch": "cp_resnet" | "ss_resnet" | "vgg",        (required)
//     "rho": int            (cp_resnet / ss_resnet)
//     "n_removed": int      (vgg)
//     "widths": [stage1, stage2, stage3],               default [128,256,512]
//     "normalize": bool,                                 default true
//     "dataset": {"type": "synthetic", <SyntheticConfig fields>}
//              | {"type": "container", "container": path, "manifest": path},
//     "train": {<TrainConfig fields>},
//     "output_dir": path                                 default "runs"
//     "sweep": {"params": [int, ...], "parallel": int}   used by `sweep` only
//   }
//
// A run directory holds config.json (resolved, every default spelled out),
// metrics.csv (run_id,epoch,rf,arch,metric_name,value), summary.csv and
// checkpoints. The run id is a hash of the resolved config, so the same
// config always lands in the same directory and reproduces bit-identically.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rfcnn/rf.hpp"
#include "rfcnn/training.hpp"

namespace rfcnn {

struct DatasetSource {
  enum class Type { Synthetic, Container } type = Type::Synthetic;
  SyntheticConfig synthetic;
  std::string container;
  std::string manifest;
};

struct ExperimentConfig {
  ArchKind arch = ArchKind::CpResnet;
  std::optional<int> rho;
  std::optional<int> n_removed;
  Widths widths;
  bool normalize = true;
  DatasetSource dataset;
  TrainConfig train;
  std::string output_dir = "runs";
  std::vector<int> sweep_params;  // rho (or n_removed) values
  int sweep_parallel = 1;

  int arch_param() const { return arch == ArchKind::Vgg ? n_removed.value_or(0) : rho.value_or(0); }

  void set_arch_param(int v) {
    if (arch == ArchKind::Vgg) {
      n_removed = v;
      rho.reset();
    } else {
      rho = v;
      n_removed.reset();
    }
  }

  void validate() const {
    if (arch == ArchKind::Custom) throw ArgumentError("config: arch must be cp_resnet, ss_resnet or vgg");
    // A sweep config may leave the parameter to the sweep list.
    const bool swept = !sweep_params.empty();
    if (arch == ArchKind::Vgg) {
      if (rho || (!n_removed && !swept)) throw ArgumentError("config: vgg takes n_removed (and no rho)");
    } else {
      if (n_removed || (!rho && !swept)) {
        throw ArgumentError("config: " + to_string(arch) + " takes rho (and no n_removed)");
      }
    }
    if (widths.stage1 < 1 || widths.stage2 < 1 || widths.stage3 < 1) throw ArgumentError("config: widths must be positive");
    if (dataset.type == DatasetSource::Type::Container && (dataset.container.empty() || dataset.manifest.empty())) {
      throw ArgumentError("config: container datasets need 'container' and 'manifest' paths");
    }
    if (sweep_parallel < 1) throw ArgumentError("config: sweep.parallel must be >= 1");
    train.validate();
  }
};

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : keys) ok = ok || it.key() == k;
    if (!ok) throw ArgumentError("config: unknown key '" + it.key() + "' in " + where);
  }
}

template <class V>
void read_opt(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

inline nlohmann::json to_json(const SyntheticConfig& s) {
  return {{"type", "synthetic"},
          {"n_classes", s.n_classes},
          {"pattern_size", s.pattern_size},
          {"n_train", s.n_train},
          {"n_test", s.n_test},
          {"seed", s.seed},
          {"n_bins", s.n_bins},
          {"n_frames", s.n_frames},
          {"label_density", s.label_density},
          {"pattern_amplitude", s.pattern_amplitude},
          {"amplitude_jitter", s.amplitude_jitter},
          {"noise_std", s.noise_std},
          {"noise_time_corr", s.noise_time_corr},
          {"context_amplitude", s.context_amplitude},
          {"context_correlation", s.context_correlation},
          {"context_min_distance", s.context_min_distance},
          {"context_step", s.context_step},
          {"test_offset", s.test_offset},
          {"test_gain", s.test_gain},
          {"unknown_fraction", s.unknown_fraction}};
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"mixup", t.mixup_enabled},
          {"mixup_concentration", t.mixup_concentration},
          {"seed", t.seed},
          {"eval_window", t.eval_window},
          {"crop_frames", t.crop_frames},
          {"checkpoint_every", t.checkpoint_every},
          {"threshold", t.threshold}};
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["arch"] = to_string(c.arch);
  if (c.rho) j["rho"] = *c.rho;
  if (c.n_removed) j["n_removed"] = *c.n_removed;
  j["widths"] = {c.widths.stage1, c.widths.stage2, c.widths.stage3};
  j["normalize"] = c.normalize;
  if (c.dataset.type == DatasetSource::Type::Synthetic) {
    j["dataset"] = to_json(c.dataset.synthetic);
  } else {
    j["dataset"] = {{"type", "container"}, {"container", c.dataset.container}, {"manifest", c.dataset.manifest}};
  }
  j["train"] = to_json(c.train);
  j["output_dir"] = c.output_dir;
  if (!c.sweep_params.empty() || c.sweep_parallel != 1) {
    j["sweep"] = {{"params", c.sweep_params}, {"parallel", c.sweep_parallel}};
  }
  return j;
}

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  using detail::read_opt;
  if (!j.is_object()) throw ArgumentError("config: top level must be an object");
  detail::reject_unknown(j, {"arch", "rho", "n_removed", "widths", "normalize", "dataset", "train", "output_dir", "sweep"},
                         "config");
  ExperimentConfig c;
  try {
    if (!j.contains("arch")) throw ArgumentError("config: 'arch' is required");
    c.arch = parse_arch_kind(j.at("arch").get<std::string>());
    if (j.contains("rho")) c.rho = j.at("rho").get<int>();
    if (j.contains("n_removed")) c.n_removed = j.at("n_removed").get<int>();
    if (j.contains("widths")) {
      const auto w = j.at("widths").get<std::vector<int>>();
      if (w.size() != 3) throw ArgumentError("config: widths needs three entries");
      c.widths = {w[0], w[1], w[2]};
    }
    read_opt(j, "normalize", c.normalize);
    read_opt(j, "output_dir", c.output_dir);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      const auto type = d.value("type", std::string("synthetic"));
      if (type == "synthetic") {
        detail::reject_unknown(d, {"type", "n_classes", "pattern_size", "n_train", "n_test", "seed", "n_bins", "n_frames",
                                   "label_density", "pattern_amplitude", "amplitude_jitter", "noise_std",
                                   "noise_time_corr", "context_amplitude", "context_correlation",
                                   "context_min_distance", "context_step", "test_offset", "test_gain",
                                   "unknown_fraction"},
                               "dataset");
        auto& s = c.dataset.synthetic;
        read_opt(d, "n_classes", s.n_classes);
        read_opt(d, "pattern_size", s.pattern_size);
        read_opt(d, "n_train", s.n_train);
        read_opt(d, "n_test", s.n_test);
        read_opt(d, "seed", s.seed);
        read_opt(d, "n_bins", s.n_bins);
        read_opt(d, "n_frames", s.n_frames);
        read_opt(d, "label_density", s.label_density);
        read_opt(d, "pattern_amplitude", s.pattern_amplitude);
        read_opt(d, "amplitude_jitter", s.amplitude_jitter);
        read_opt(d, "noise_std", s.noise_std);
        read_opt(d, "noise_time_corr", s.noise_time_corr);
        read_opt(d, "context_amplitude", s.context_amplitude);
        read_opt(d, "context_correlation", s.context_correlation);
        read_opt(d, "context_min_distance", s.context_min_distance);
        read_opt(d, "context_step", s.context_step);
        read_opt(d, "test_offset", s.test_offset);
        read_opt(d, "test_gain", s.test_gain);
        read_opt(d, "unknown_fraction", s.unknown_fraction);
      } else if (type == "container") {
        detail::reject_unknown(d, {"type", "container", "manifest"}, "dataset");
        c.dataset.type = DatasetSource::Type::Container;
        read_opt(d, "container", c.dataset.container);
        read_opt(d, "manifest", c.dataset.manifest);
      } else {
        throw ArgumentError("config: dataset type must be synthetic or container");
      }
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      detail::reject_unknown(t, {"epochs", "batch_size", "learning_rate", "mixup", "mixup_concentration", "seed",
                                 "eval_window", "crop_frames", "checkpoint_every", "threshold"},
                             "train");
      auto& tc = c.train;
      read_opt(t, "epochs", tc.epochs);
      read_opt(t, "batch_size", tc.batch_size);
      read_opt(t, "learning_rate", tc.learning_rate);
      read_opt(t, "mixup", tc.mixup_enabled);
      read_opt(t, "mixup_concentration", tc.mixup_concentration);
      read_opt(t, "seed", tc.seed);
      read_opt(t, "eval_window", tc.eval_window);
      read_opt(t, "crop_frames", tc.crop_frames);
      read_opt(t, "checkpoint_every", tc.checkpoint_every);
      read_opt(t, "threshold", tc.threshold);
    }
    if (j.contains("sweep")) {
      const auto& sw = j.at("sweep");
      detail::reject_unknown(sw, {"params", "parallel"}, "sweep");
      read_opt(sw, "params", c.sweep_params);
      read_opt(sw, "parallel", c.sweep_parallel);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ArgumentError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j);
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

/// 12 hex digits derived from the resolved config.
inline std::string run_id(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(to_json(cfg).dump());
  return os.str().substr(0, 12);
}

inline ArchSpec build_experiment_arch(const ExperimentConfig& cfg, std::size_t n_classes) {
  return build_arch(cfg.arch, cfg.arch_param(), static_cast<int>(n_classes), cfg.widths);
}

/// Loads or generates the data and normalizes both splits with statistics of
/// the training split.
inline TaggingDataset prepare_dataset(const ExperimentConfig& cfg) {
  TaggingDataset ds;
  if (cfg.dataset.type == DatasetSource::Type::Synthetic) {
    ds = generate_synthetic(cfg.dataset.synthetic).data;
  } else {
    if (!std::filesystem::exists(cfg.dataset.container)) {
      throw ArgumentError("dataset container '" + cfg.dataset.container + "' does not exist");
    }
    if (!std::filesystem::exists(cfg.dataset.manifest)) {
      throw ArgumentError("dataset manifest '" + cfg.dataset.manifest + "' does not exist");
    }
    ds = load_dataset(cfg.dataset.container, cfg.dataset.manifest);
  }
  if (ds.train.empty()) throw ArgumentError("dataset has an empty training split");
  if (cfg.normalize) {
    const auto stats = compute_normalization(ds.train);
    normalize(ds.train, stats);
    normalize(ds.test, stats);
  }
  return ds;
}

struct RunResult {
  std::string run_id;
  std::filesystem::path run_dir;
  std::string arch_name;
  std::int64_t rf = 0;
  TrainReport report;
};

inline const char* kMetricNames[] = {"train_loss", "test_loss", "macro_pr_auc", "f1_classical", "f1_posneg"};

inline std::vector<double> record_values(const EpochRecord& r) {
  return {r.train_loss, r.test_loss, r.macro_pr_auc, r.f1_classical, r.f1_posneg};
}

/// Trains one configuration on an already prepared dataset and writes its
/// run directory.
inline RunResult run_experiment(const ExperimentConfig& cfg, const TaggingDataset& data, std::ostream* log = nullptr) {
  cfg.validate();
  RunResult result;
  result.run_id = run_id(cfg);
  const auto spec = build_experiment_arch(cfg, data.n_classes);
  result.arch_name = spec.name;
  result.rf = compute_rf(spec).max_rf;
  result.run_dir = std::filesystem::path(cfg.output_dir) / (spec.name + "_" + result.run_id);
  std::filesystem::create_directories(result.run_dir);

  {
    std::ofstream os(result.run_dir / "config.json");
    os << to_json(cfg).dump(2) << "\n";
  }
  std::ofstream metrics(result.run_dir / "metrics.csv");
  write_metrics_csv_header(metrics);

  auto state = instantiate<float>(spec, RngStream(cfg.train.seed).split(7).seed());
  TrainHooks hooks;
  hooks.warn = log;
  hooks.on_epoch = [&](const EpochRecord& rec) {
    const auto values = record_values(rec);
    for (std::size_t i = 0; i < values.size(); ++i) {
      write_metric_row(metrics, {result.run_id, rec.epoch, result.rf, to_string(cfg.arch), kMetricNames[i], values[i]});
    }
    metrics.flush();
    if (log) {
      *log << spec.name << " epoch " << rec.epoch << " train_loss " << rec.train_loss << " test_loss " << rec.test_loss
           << " pr_auc " << rec.macro_pr_auc << "\n";
    }
  };
  hooks.on_checkpoint = [&](int epoch, ModelState<float>& st) {
    std::ostringstream name;
    name << "checkpoint_epoch" << std::setw(3) << std::setfill('0') << epoch << ".bin";
    save_checkpoint((result.run_dir / name.str()).string(), st);
    if (epoch == cfg.train.epochs) save_checkpoint((result.run_dir / "checkpoint_final.bin").string(), st);
  };
  result.report = train(state, data, cfg.train, hooks);

  std::ofstream summary(result.run_dir / "summary.csv");
  summary << "metric_name,mean,std,window\n" << std::setprecision(17);
  const WindowStat stats[] = {result.report.train_loss, result.report.test_loss, result.report.macro_pr_auc,
                              result.report.f1_classical, result.report.f1_posneg};
  for (std::size_t i = 0; i < 5; ++i) {
    summary << kMetricNames[i] << ',' << stats[i].mean << ',' << stats[i].std << ',' << result.report.eval_window << "\n";
  }
  return result;
}

inline void write_sweep_header(std::ostream& os) {
  os << "rf,arch,train_loss,test_loss,macro_pr_auc,f1_classical,f1_posneg,epoch\n";
}

inline void write_sweep_rows(std::ostream& os, const RunResult& r) {
  const auto old = os.precision(17);
  for (const auto& e : r.report.history) {
    os << r.rf << ',' << r.arch_name << ',' << e.train_loss << ',' << e.test_loss << ',' << e.macro_pr_auc << ','
       << e.f1_classical << ',' << e.f1_posneg << ',' << e.epoch << '\n';
  }
  os.precision(old);
}

/// One training per arch parameter (rho or n_removed) on the same dataset.
/// Rows are appended to <output_dir>/sweep.csv as runs finish; with
/// `parallel > 1` up to that many runs train concurrently.
inline std::vector<RunResult> run_sweep(const ExperimentConfig& base, const std::vector<int>& params,
                                        int parallel = 1, std::ostream* log = nullptr) {
  if (params.empty()) throw ArgumentError("sweep: empty parameter list");
  std::vector<ExperimentConfig> configs;
  for (int p : params) {
    auto c = base;
    c.sweep_params.clear();
    c.sweep_parallel = 1;
    c.set_arch_param(p);
    c.validate();
    build_experiment_arch(c, 1);  // range check before any training starts
    configs.push_back(std::move(c));
  }
  const auto data = prepare_dataset(base);
  std::filesystem::create_directories(base.output_dir);
  const auto csv_path = std::filesystem::path(base.output_dir) / "sweep.csv";
  std::ofstream csv(csv_path);
  write_sweep_header(csv);
  csv.flush();

  std::vector<std::optional<RunResult>> results(configs.size());
  std::mutex mu;
  auto run_one = [&](std::size_t i) {
    auto r = run_experiment(configs[i], data, parallel > 1 ? nullptr : log);
    std::lock_guard lock(mu);
    write_sweep_rows(csv, r);
    csv.flush();
    if (log && parallel > 1) *log << r.arch_name << " done (rf " << r.rf << ")\n";
    results[i] = std::move(r);
  };

  if (parallel <= 1) {
    for (std::size_t i = 0; i < configs.size(); ++i) run_one(i);
  } else {
    std::size_t next = 0;
    std::exception_ptr failure;
    std::vector<std::thread> workers;
    for (int w = 0; w < parallel; ++w) {
      workers.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard lock(mu);
            if (next >= configs.size() || failure) return;
            i = next++;
          }
          try {
            run_one(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& t : workers) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  // Rewrite in parameter order once everything finished.
  csv.close();
  std::ofstream ordered(csv_path);
  write_sweep_header(ordered);
  std::vector<RunResult> out;
  for (auto& r : results) {
    write_sweep_rows(ordered, *r);
    out.push_back(std::move(*r));
  }
  return out;
}

}  // namespace rfcnn
