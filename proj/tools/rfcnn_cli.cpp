// rfcnn: receptive-field analysis, training, evaluation and RF sweeps.
//
// exit codes: 0 ok, 1 unexpected failure, 2 bad arguments/config/data,
//             3 training diverged

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "rfcnn/rfcnn.hpp"

namespace {

using nlohmann::json;
using namespace rfcnn;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ArgumentError("cannot open config '" + path + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ArgumentError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<std::string> output_dir;
};

// Flags win over the file; they are applied to the JSON so that the resolved
// snapshot and run id reflect them.
ExperimentConfig resolve(const std::string& path, const Overrides& o, json extra = json::object()) {
  auto j = read_json(path);
  if (!j.is_object()) throw ArgumentError("config: top level must be an object");
  if (o.seed) j["train"]["seed"] = *o.seed;
  if (o.epochs) {
    j["train"]["epochs"] = *o.epochs;
    if (j["train"].contains("eval_window") && j["train"]["eval_window"].get<int>() > *o.epochs) {
      j["train"]["eval_window"] = *o.epochs;
    }
  }
  if (o.output_dir) j["output_dir"] = *o.output_dir;
  j.merge_patch(extra);
  return parse_experiment_config(j);
}

void print_report(const std::string& name, const TrainReport& r) {
  std::cout << std::fixed << std::setprecision(4);
  std::cout << name << " final (last " << r.eval_window << " epochs, mean +- std)\n"
            << "  train_loss    " << r.train_loss.mean << " +- " << r.train_loss.std << "\n"
            << "  test_loss     " << r.test_loss.mean << " +- " << r.test_loss.std << "\n"
            << "  macro_pr_auc  " << r.macro_pr_auc.mean << " +- " << r.macro_pr_auc.std << "\n"
            << "  f1_classical  " << r.f1_classical.mean << " +- " << r.f1_classical.std << "\n"
            << "  f1_posneg     " << r.f1_posneg.mean << " +- " << r.f1_posneg.std << "\n";
  std::cout.unsetf(std::ios::floatfield);
}

int cmd_analyze(const std::string& arch, std::optional<int> rho, std::optional<int> removed,
                std::optional<int> classes, const std::string& csv, bool show_spec) {
  const auto kind = parse_arch_kind(arch);
  if (kind == ArchKind::Custom) throw ArgumentError("--arch must be cp_resnet, ss_resnet or vgg");
  if (kind == ArchKind::Vgg) {
    if (rho || !removed) throw ArgumentError("vgg takes --removed (not --rho)");
  } else if (removed || !rho) {
    throw ArgumentError(arch + " takes --rho (not --removed)");
  }
  const auto spec = build_arch(kind, kind == ArchKind::Vgg ? *removed : *rho, classes.value_or(1));
  const auto report = compute_rf(spec);
  if (show_spec) std::cout << to_text(spec) << "\n";
  if (!csv.empty()) {
    std::ofstream os(csv);
    if (!os) throw ArgumentError("cannot write '" + csv + "'");
    write_rf_csv(os, report);
  }
  print_rf_table(std::cout, report);
  return kExitOk;
}

int cmd_train(const std::string& config, const Overrides& o, bool quiet) {
  const auto cfg = resolve(config, o);
  const auto data = prepare_dataset(cfg);
  const auto r = run_experiment(cfg, data, quiet ? nullptr : &std::cerr);
  std::cout << "run " << r.run_id << " -> " << r.run_dir.string() << "\n";
  print_report(r.arch_name + " (rf " + std::to_string(r.rf) + ")", r.report);
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& config, const std::string& split_name) {
  auto state = load_checkpoint<float>(checkpoint);
  const auto cfg = resolve(config, {});
  const auto data = prepare_dataset(cfg);
  if (static_cast<std::size_t>(state.model.spec().n_classes) != data.n_classes) {
    throw ArgumentError("checkpoint predicts " + std::to_string(state.model.spec().n_classes) +
                        " classes but the dataset has " + std::to_string(data.n_classes));
  }
  const auto& split = split_name == "train" ? data.train : data.test;
  const auto r = evaluate(state.model, split, data.n_classes, cfg.train.batch_size, cfg.train.threshold, &std::cerr);
  std::cout << "network " << state.model.spec().name << " (rf " << compute_rf(state.model.spec()).max_rf
            << ", step " << state.adam.step_count << ")\n"
            << "split " << split_name << " (" << split.size() << " clips)\n"
            << std::setprecision(6) << "loss " << r.loss << "\n"
            << "macro_pr_auc " << r.metrics.macro_pr_auc << "\n"
            << "f1_classical " << r.metrics.macro_f1_classical << "\n"
            << "f1_posneg " << r.metrics.macro_f1_posneg << "\n";
  for (std::size_t c = 0; c < r.metrics.per_class_ap.size(); ++c) {
    std::cout << "ap[" << c << "] " << r.metrics.per_class_ap[c] << "\n";
  }
  return kExitOk;
}

int cmd_sweep(const std::string& config, const Overrides& o, const std::vector<int>& params,
              std::optional<int> parallel, bool quiet) {
  json extra = json::object();
  if (!params.empty()) extra["sweep"]["params"] = params;
  if (parallel) extra["sweep"]["parallel"] = *parallel;
  const auto cfg = resolve(config, o, extra);
  if (cfg.sweep_params.empty()) throw ArgumentError("sweep: no parameters (use --rhos or sweep.params)");
  const auto results = run_sweep(cfg, cfg.sweep_params, cfg.sweep_parallel, quiet ? nullptr : &std::cerr);
  std::cout << "rf,arch,final_train_loss,final_test_loss,final_macro_pr_auc,run_dir\n";
  for (const auto& r : results) {
    const auto& last = r.report.history.back();
    std::cout << r.rf << ',' << r.arch_name << ',' << last.train_loss << ',' << last.test_loss << ','
              << last.macro_pr_auc << ',' << r.run_dir.string() << "\n";
  }
  std::cout << "wrote " << (std::filesystem::path(cfg.output_dir) / "sweep.csv").string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Receptive-field regularized CNNs: analysis, training and RF sweeps"};
  app.require_subcommand(1);

  std::string arch;
  std::optional<int> rho, removed, classes;
  std::string csv;
  bool show_spec = false;
  auto* analyze = app.add_subcommand("analyze", "print the per-layer receptive-field table");
  analyze->add_option("--arch", arch, "cp_resnet | ss_resnet | vgg")->required();
  analyze->add_option("--rho", rho, "RF parameter (cp_resnet, ss_resnet)");
  analyze->add_option("--removed", removed, "number of removed 3x3 convs (vgg)");
  analyze->add_option("--classes", classes, "output classes (affects --spec only)");
  analyze->add_option("--csv", csv, "also write the table as CSV");
  analyze->add_flag("--spec", show_spec, "print the architecture description first");

  std::string config;
  Overrides ov;
  bool quiet = false;
  auto add_overrides = [&](CLI::App* sub) {
    sub->add_option("--seed", ov.seed, "overrides train.seed");
    sub->add_option("--epochs", ov.epochs, "overrides train.epochs");
    sub->add_option("--output-dir", ov.output_dir, "overrides output_dir");
    sub->add_flag("-q,--quiet", quiet, "no per-epoch log on stderr");
  };

  auto* train = app.add_subcommand("train", "train one configuration");
  train->add_option("config", config, "JSON config")->required();
  add_overrides(train);

  std::string checkpoint, split = "test";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--config", config, "JSON config describing the dataset")->required();
  eval->add_option("--split", split, "train | test")->check(CLI::IsMember({"train", "test"}));

  std::vector<int> params;
  std::optional<int> parallel;
  auto* sweep = app.add_subcommand("sweep", "train one model per RF setting");
  sweep->add_option("config", config, "JSON config")->required();
  sweep->add_option("--rhos,--params", params, "rho (or n_removed) values, overrides sweep.params")->delimiter(',');
  sweep->add_option("--parallel", parallel, "concurrent runs, overrides sweep.parallel");
  add_overrides(sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*analyze) return cmd_analyze(arch, rho, removed, classes, csv, show_spec);
    if (*train) return cmd_train(config, ov, quiet);
    if (*eval) return cmd_eval(checkpoint, config, split);
    if (*sweep) return cmd_sweep(config, ov, params, parallel, quiet);
  } catch (const TrainingDivergedError& e) {
    std::cerr << "error: training diverged at step " << e.step() << ": " << e.what() << "\n";
    return kExitDiverged;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
