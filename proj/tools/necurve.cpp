// necurve: generate synthetic curves, train and evaluate pairwise rankers, write reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "necurve/act.hpp"
#include "necurve/error.hpp"
#include "necurve/harness.hpp"
#include "necurve/synthgen.hpp"

namespace fs = std::filesystem;
using namespace necurve;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw EvaluationError("cannot write " + path);
  out << j.dump(2) << "\n";
}

/// Paths created by the running command; removed if it fails.
struct Outputs {
  std::vector<fs::path> paths;

  void claim(const std::string& path) {
    if (!path.empty() && !fs::exists(path)) paths.emplace_back(path);
  }
  void remove_all() {
    for (const fs::path& p : paths) {
      std::error_code ec;
      fs::remove_all(p, ec);
    }
  }
};

/// Command-line overrides layered on top of a training config file.
struct TrainFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string ranker;
  std::optional<int> act_df;
  std::optional<double> gamma;
  std::optional<double> lambda;
  std::vector<double> fractions;
  bool no_metadata = false;
  std::string mask_mode;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "Training config JSON");
    cmd->add_option("--seed", seed, "Master seed");
    cmd->add_option("--ranker", ranker, "greedy, siamese, siamese+act, r2 or r2+act");
    cmd->add_option("--act-df", act_df, "Window freedom: 1 shared, 2 per curve, 3 per position")->check(CLI::Range(1, 3));
    cmd->add_option("--gamma", gamma, "Indicator temperature");
    cmd->add_option("--lambda", lambda, "Weight of the architecture reconstruction loss");
    cmd->add_option("--fractions", fractions, "Observed fractions of each curve")->delimiter(',');
    cmd->add_flag("--no-metadata", no_metadata, "Drop hyperparameter, architecture and domain inputs");
    cmd->add_option("--mask-mode", mask_mode, "strict or literal");
  }

  TrainConfig resolve() const {
    TrainConfig c = config.empty() ? TrainConfig::desk() : read_json(config).get<TrainConfig>();
    if (seed) c.seed = *seed;
    if (!ranker.empty()) c.model.set_ranker_name(ranker);
    if (act_df) c.model.act.freedom = act::parse_freedom(*act_df);
    if (gamma) c.model.act.gamma = *gamma;
    if (lambda) c.model.lambda = *lambda;
    if (!fractions.empty()) c.fractions = fractions;
    if (no_metadata) c.model.metadata = false;
    if (!mask_mode.empty()) c.model.act.mask = act::parse_mask_mode(mask_mode);
    c.validate();
    return c;
  }
};

const DatasetSplit& fold_of(const std::vector<DatasetSplit>& splits, std::size_t fold) {
  if (fold >= splits.size()) throw ConfigError("fold " + std::to_string(fold) + " out of range");
  check_disjoint(splits[fold]);
  return splits[fold];
}

void print_metrics(const std::string& label, const Metrics& m) {
  std::printf("%s: auc %.4f accuracy %.4f over %zu pairs\n", label.c_str(), m.auc, m.accuracy, m.pairs);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pairwise ranking of normalized-entropy learning curves"};
  app.require_subcommand(1);
  app.set_help_flag();
  app.set_help_all_flag("-h,--help", "Print this help, with every subcommand's flags, and exit");
  Outputs outputs;

  // generate
  std::string gen_config, gen_out, gen_splits;
  std::optional<std::uint64_t> gen_seed;
  std::size_t gen_folds = 5;
  auto* generate = app.add_subcommand("generate", "Write a synthetic dataset as JSON Lines");
  generate->add_option("--config", gen_config, "Generator config JSON");
  generate->add_option("--out", gen_out, "Dataset path (.jsonl)")->required();
  generate->add_option("--seed", gen_seed, "Generator seed");
  generate->add_option("--splits", gen_splits, "Also write the fold manifest here");
  generate->add_option("--folds", gen_folds, "Folds in the manifest");

  // train
  TrainFlags train_flags;
  std::string train_data, train_out;
  std::size_t train_fold = 0;
  double train_fraction = 0.6;
  auto* train_cmd = app.add_subcommand("train", "Train one ranker on one fold");
  train_flags.attach(train_cmd);
  train_cmd->add_option("--data", train_data, "Dataset path")->required();
  train_cmd->add_option("--out", train_out, "Model checkpoint path")->required();
  train_cmd->add_option("--fold", train_fold, "Fold whose train and validation jobs are used");
  train_cmd->add_option("--fraction", train_fraction, "Observed fraction");

  // evaluate
  std::string eval_data, eval_model, eval_out;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a trained ranker on its fold's test jobs");
  evaluate_cmd->add_option("--data", eval_data, "Dataset path")->required();
  evaluate_cmd->add_option("--model", eval_model, "Checkpoint written by train")->required();
  evaluate_cmd->add_option("--out", eval_out, "Metrics JSON path");

  // cross-validate
  TrainFlags cv_flags;
  std::string cv_data, cv_out;
  auto* cv_cmd = app.add_subcommand("cross-validate", "Grouped k-fold evaluation over jobs");
  cv_flags.attach(cv_cmd);
  cv_cmd->add_option("--data", cv_data, "Dataset path")->required();
  cv_cmd->add_option("--out", cv_out, "Report directory")->required();

  // consistency
  std::string cons_data, cons_out, cons_criterion = "wne";
  std::vector<double> cons_fractions{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  auto* cons_cmd = app.add_subcommand("consistency", "Agreement of prefix order with final order");
  cons_cmd->add_option("--data", cons_data, "Dataset path")->required();
  cons_cmd->add_option("--out", cons_out, "Output JSON path");
  cons_cmd->add_option("--fractions", cons_fractions, "Observed fractions")->delimiter(',');
  cons_cmd->add_option("--criterion", cons_criterion, "lne or wne")->check(CLI::IsMember({"lne", "wne"}));

  // export-indicator
  double ind_gamma = act::kDefaultGamma;
  std::string ind_init = "max", ind_out, ind_mask = "strict";
  std::size_t ind_length = 100;
  std::uint64_t ind_seed = 0;
  auto* ind_cmd = app.add_subcommand("export-indicator", "Write initial window variables and soft indicator");
  ind_cmd->add_option("--gamma", ind_gamma, "Indicator temperature");
  ind_cmd->add_option("--init", ind_init, "min or max window")->check(CLI::IsMember({"min", "max"}));
  ind_cmd->add_option("--length", ind_length, "Curve length");
  ind_cmd->add_option("--seed", ind_seed, "Initialization seed");
  ind_cmd->add_option("--mask-mode", ind_mask, "strict or literal");
  ind_cmd->add_option("--out", ind_out, "Output JSON path")->required();

  // report
  std::string rep_data, rep_out;
  std::vector<std::string> rep_inputs;
  double rep_gamma = act::kDefaultGamma;
  auto* rep_cmd = app.add_subcommand("report", "Combine cross-validation reports into tables and plot data");
  rep_cmd->add_option("--data", rep_data, "Dataset path")->required();
  rep_cmd->add_option("--out", rep_out, "Report directory")->required();
  rep_cmd->add_option("--inputs", rep_inputs, "report.json files from cross-validate")->required();
  rep_cmd->add_option("--gamma", rep_gamma, "Temperature for the indicator heatmaps");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*generate) {
      GeneratorConfig config = gen_config.empty() ? GeneratorConfig{} : read_json(gen_config).get<GeneratorConfig>();
      if (gen_seed) config.seed = *gen_seed;
      config.validate();
      outputs.claim(gen_out);
      outputs.claim(gen_splits);
      if (const fs::path parent = fs::path(gen_out).parent_path(); !parent.empty()) fs::create_directories(parent);
      const std::vector<ModelRecord> records = generate_dataset(config);
      save_dataset(gen_out, records);
      if (!gen_splits.empty()) write_json(gen_splits, splits_manifest(grouped_kfold(records, gen_folds, {}, config.seed), config.seed));
      std::printf("%zu models in %zu jobs, inconsistency %.4f -> %s\n", records.size(), job_ids(records).size(),
                  inconsistency_rate(records), gen_out.c_str());
    } else if (*train_cmd) {
      const TrainConfig config = train_flags.resolve();
      if (config.model.kind == RankerKind::kGreedy) throw ConfigError("greedy has nothing to train");
      const std::vector<ModelRecord> records = load_dataset(train_data);
      const std::vector<DatasetSplit> splits = grouped_kfold(records, config.folds, config.ratios, config.seed);
      const DatasetSplit& split = fold_of(splits, train_fold);
      outputs.claim(train_out);
      const std::uint64_t seed = mix_seed(config.seed, train_fold + 1);
      const TrainResult result =
          train(records, split.train, split.validation, config, train_fraction, seed,
                [](std::size_t epoch, double loss, double auc) {
                  std::printf("epoch %zu loss %.5f validation auc %.4f\n", epoch, loss, auc);
                  std::fflush(stdout);
                });
      write_json(train_out, {{"fold", train_fold},
                             {"folds", config.folds},
                             {"split_seed", config.seed},
                             {"best_epoch", result.best_epoch},
                             {"validation_auc", result.best_validation_auc},
                             {"checkpoint", result.ranker.checkpoint()}});
      std::printf("best epoch %zu, validation auc %.4f -> %s\n", result.best_epoch, result.best_validation_auc,
                  train_out.c_str());
    } else if (*evaluate_cmd) {
      const json saved = read_json(eval_model);
      const PairRanker ranker = PairRanker::from_checkpoint(saved.at("checkpoint"));
      const std::vector<ModelRecord> records = load_dataset(eval_data);
      const std::vector<DatasetSplit> splits =
          grouped_kfold(records, saved.at("folds").get<std::size_t>(), {}, saved.at("split_seed").get<std::uint64_t>());
      const DatasetSplit& split = fold_of(splits, saved.at("fold").get<std::size_t>());
      const Metrics m = evaluate(ranker, records, split.test);
      const Metrics g = evaluate_greedy(records, split.test, ranker.config().fraction);
      print_metrics(ranker.config().ranker_name(), m);
      print_metrics("greedy", g);
      if (!eval_out.empty()) {
        outputs.claim(eval_out);
        write_json(eval_out, {{"ranker", ranker.config().ranker_name()},
                              {"fraction", ranker.config().fraction},
                              {"auc", m.auc},
                              {"accuracy", m.accuracy},
                              {"pairs", m.pairs},
                              {"greedy_auc", g.auc},
                              {"greedy_accuracy", g.accuracy}});
      }
    } else if (*cv_cmd) {
      const TrainConfig config = cv_flags.resolve();
      const std::vector<ModelRecord> records = load_dataset(cv_data);
      outputs.claim(cv_out);
      const EvalReport report = cross_validate(records, config);
      write_report(cv_out, {report}, records);
      for (const FractionSummary& s : report.summary) {
        std::printf("%s fraction %.2f: auc %.4f +- %.4f accuracy %.4f +- %.4f\n", report.ranker.c_str(), s.fraction,
                    s.auc_mean, s.auc_sd, s.accuracy_mean, s.accuracy_sd);
      }
      std::printf("%.1f s -> %s\n", report.runtime_seconds, cv_out.c_str());
    } else if (*cons_cmd) {
      const std::vector<ModelRecord> records = load_dataset(cons_data);
      const Criterion criterion = cons_criterion == "lne" ? Criterion::kLne : Criterion::kWne;
      const std::vector<ConsistencyPoint> points = consistency_analysis(records, criterion, cons_fractions);
      json out = json::array();
      for (const ConsistencyPoint& p : points) {
        std::printf("fraction %.2f: %.4f of %zu pairs\n", p.fraction, p.accuracy, p.pairs);
        out.push_back({{"fraction", p.fraction}, {"accuracy", p.accuracy}, {"pairs", p.pairs}});
      }
      if (!cons_out.empty()) {
        outputs.claim(cons_out);
        write_json(cons_out, {{"criterion", cons_criterion}, {"points", out}});
      }
    } else if (*ind_cmd) {
      const act::WindowInit init = ind_init == "min" ? act::WindowInit::kMinWindow : act::WindowInit::kMaxWindow;
      const act::MaskMode mode = act::parse_mask_mode(ind_mask);
      outputs.claim(ind_out);
      write_json(ind_out, act::export_indicator(ind_length, ind_gamma, init, ind_seed, mode));
      std::printf("%zu x %zu indicator -> %s\n", ind_length, ind_length, ind_out.c_str());
    } else if (*rep_cmd) {
      const std::vector<ModelRecord> records = load_dataset(rep_data);
      std::vector<EvalReport> reports;
      for (const std::string& path : rep_inputs) {
        const json j = read_json(path);
        if (j.is_array()) {
          for (const json& r : j) reports.push_back(r.get<EvalReport>());
        } else {
          reports.push_back(j.get<EvalReport>());
        }
      }
      outputs.claim(rep_out);
      write_report(rep_out, reports, records);
      const std::size_t length = records.empty() ? 100 : records.front().curve.size();
      write_json((fs::path(rep_out) / "plotdata" / "indicator_min.json").string(),
                 act::export_indicator(length, rep_gamma, act::WindowInit::kMinWindow, 0));
      write_json((fs::path(rep_out) / "plotdata" / "indicator_max.json").string(),
                 act::export_indicator(length, rep_gamma, act::WindowInit::kMaxWindow, 0));
      std::printf("%zu reports -> %s\n", reports.size(), rep_out.c_str());
    }
  } catch (const std::exception& e) {
    outputs.remove_all();
    std::fprintf(stderr, "necurve: %s\n", e.what());
    return 1;
  }
  return 0;
}
