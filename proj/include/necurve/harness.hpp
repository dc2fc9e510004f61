#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "necurve/rankers.hpp"
#include "necurve/synthgen.hpp"

namespace necurve {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch = 64;
  double learning_rate = 0.001;
  std::uint64_t seed = 0;
  std::vector<double> fractions{0.2, 0.4, 0.6};
  /// Model settings; `model.fraction` is overwritten per run.
  RankerConfig model;
  /// Caps the training pairs visited per epoch; 0 visits all.
  std::size_t max_pairs_per_epoch = 0;
  std::size_t folds = 5;
  SplitRatios ratios;

  /// Reduced widths and epochs sized for one laptop core.
  static TrainConfig desk();

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);

struct TrainResult {
  PairRanker ranker;
  std::size_t best_epoch = 0;
  double best_validation_auc = 0.0;
  std::vector<double> epoch_losses;
};

/// Optional per-epoch hook: (epoch, mean training loss, validation AUC).
using EpochCallback = std::function<void(std::size_t, double, double)>;

/// Adam over job-grouped mini-batches of `train` pairs; keeps the epoch with
/// the best AUC on `validation` (the last epoch when `validation` is empty).
TrainResult train(const std::vector<ModelRecord>& records, std::span<const CurvePair> train_pairs,
                  std::span<const CurvePair> validation, const TrainConfig& config, double fraction,
                  std::uint64_t seed, const EpochCallback& on_epoch = {});

struct Metrics {
  double auc = 0.5;
  double accuracy = 0.0;
  std::size_t pairs = 0;
};

/// Rank-statistic AUC with midranks for tied scores; 0.5 when one class is absent.
double roc_auc(std::span<const double> scores, std::span<const int> labels);
/// Share of pairs with (p > 0.5) == label; p = 0.5 counts as wrong.
double pair_accuracy(std::span<const double> probabilities, std::span<const int> labels);

std::vector<double> predict_pairs(const PairRanker& ranker, const std::vector<ModelRecord>& records,
                                  std::span<const CurvePair> pairs, std::size_t batch = 256);
Metrics evaluate(const PairRanker& ranker, const std::vector<ModelRecord>& records, std::span<const CurvePair> pairs);
Metrics evaluate_greedy(const std::vector<ModelRecord>& records, std::span<const CurvePair> pairs, double fraction);

struct FoldResult {
  std::size_t fold = 0;
  double fraction = 0.0;
  Metrics test;
  std::size_t best_epoch = 0;
  double validation_auc = 0.0;
};

struct FractionSummary {
  double fraction = 0.0;
  double auc_mean = 0.0;
  double auc_sd = 0.0;
  double accuracy_mean = 0.0;
  double accuracy_sd = 0.0;
};

struct ConsistencyPoint {
  double fraction = 0.0;
  double accuracy = 0.0;
  std::size_t pairs = 0;
};

struct EvalReport {
  std::string ranker;
  bool metadata = true;
  nlohmann::json config;
  std::vector<FoldResult> folds;
  std::vector<FractionSummary> summary;
  double runtime_seconds = 0.0;

  const FractionSummary& at(double fraction) const;
  double mean_auc() const;
  double mean_accuracy() const;
};

void to_json(nlohmann::json& j, const EvalReport& report);
void from_json(const nlohmann::json& j, EvalReport& report);

std::vector<FractionSummary> summarize(const std::vector<FoldResult>& folds);

/// Throws SplitError when a test or validation job also appears in an earlier partition.
void check_disjoint(const DatasetSplit& split);

/// Grouped k-fold over jobs, one model per fold and fraction. Fold workers run
/// in parallel up to NECURVE_THREADS (default 1); results do not depend on it.
EvalReport cross_validate(const std::vector<ModelRecord>& records, const TrainConfig& config);

enum class Criterion { kLne, kWne };

/// Share of within-job pairs whose order at the end of the observed prefix
/// matches their order under the final value of `criterion`.
std::vector<ConsistencyPoint> consistency_analysis(const std::vector<ModelRecord>& records, Criterion criterion,
                                                   std::span<const double> fractions);

/// Writes metrics.csv, report.json and plotdata/*.json into `directory`.
void write_report(const std::string& directory, const std::vector<EvalReport>& reports,
                  const std::vector<ModelRecord>& records);

/// Worker count from NECURVE_THREADS, at least 1.
std::size_t worker_threads();

}  // namespace necurve
