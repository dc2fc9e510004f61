#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "necurve/curve_math.hpp"

namespace necurve {

/// Knobs of the synthetic loss-stream population.
struct GeneratorConfig {
  std::size_t jobs = 20;
  std::size_t models_per_job = 20;
  /// Raw measures per curve; log-normal with this mean and sd.
  double curve_length_mean = 163.0;
  double curve_length_sd = 193.0;
  std::size_t max_curve_length = 1500;
  std::size_t examples_per_checkpoint = 50;
  /// "One day" of examples for the labeling WNE. 0 selects 20% of the mean
  /// example span.
  std::size_t day_window = 0;
  /// Target share of within-job pairs whose final LNE and final 1-day WNE
  /// orderings disagree.
  double inconsistency_target = 0.2;
  double ctr_drift = 0.0;
  /// Half-width of the uniform per-example noise on normalized loss.
  double noise = 0.15;
  std::size_t hyper_dim = 13;
  std::size_t arch_layers = 4;
  std::size_t arch_features = 2;
  std::size_t domains = 6;
  std::size_t min_points = 10;
  std::size_t resample_length = 100;
  std::uint64_t seed = 7;

  /// 79 jobs of 60 models, echoing the production dataset scale.
  static GeneratorConfig production_scale();

  void validate() const;
  std::size_t resolved_day_window() const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& config);
void from_json(const nlohmann::json& j, GeneratorConfig& config);

/// Shape of one model's expected normalized per-example loss
///   mu(n) = asymptote + amplitude * (1 + n / tau)^(-decay)
///           + wiggle * sin(omega n + phase) + late_slope * ramp(n / N)
/// where ramp rises linearly from 0 at late_start to 1 at the stream end.
struct CurveParams {
  std::size_t examples = 0;
  double asymptote = 0.8;
  double amplitude = 0.2;
  double decay = 1.0;
  double tau = 100.0;
  double wiggle = 0.0;
  double omega = 0.0;
  double phase = 0.0;
  double late_slope = 0.0;
  double late_start = 0.5;
  double base_ctr = 0.05;

  void validate() const;
};

/// Draws a raw (CTR-normalized) loss stream. Per-example losses are
/// (mu(n) + noise) * l(c_n, c_n) with c_n the expected CTR path, constant
/// when config.ctr_drift is 0.
LossStream generate_stream(const CurveParams& params, const GeneratorConfig& config, std::uint64_t seed);

struct ModelRecord {
  std::string model_id;
  std::string job_id;
  LearningCurve curve;
  std::vector<double> hyperparameters;
  /// One row of per-layer dimensions per layer.
  std::vector<std::vector<double>> architecture;
  std::string domain_id;
  double final_wne = 0.0;
  double final_lne = 0.0;
  std::size_t raw_points = 0;
  std::size_t examples = 0;
  std::size_t day_window = 0;
};

void to_json(nlohmann::json& j, const ModelRecord& record);
void from_json(const nlohmann::json& j, ModelRecord& record);

/// Generates, filters (>= min_points raw measures) and resamples the whole
/// population. The late-slope scale is calibrated so the measured
/// LNE/WNE disagreement rate lands on config.inconsistency_target.
std::vector<ModelRecord> generate_dataset(const GeneratorConfig& config);

/// Share of within-job unordered pairs whose final-LNE and final-WNE
/// superiority disagree.
double inconsistency_rate(const std::vector<ModelRecord>& records);

void write_jsonl(std::ostream& out, const std::vector<ModelRecord>& records);
std::vector<ModelRecord> read_jsonl(std::istream& in);
void save_dataset(const std::string& path, const std::vector<ModelRecord>& records);
std::vector<ModelRecord> load_dataset(const std::string& path);

/// Ordered pair of records (indices into the record list) with label 1 iff
/// the left record has the strictly lower final 1-day WNE.
struct CurvePair {
  std::size_t left = 0;
  std::size_t right = 0;
  int label = 0;
};

enum class PairOrdering {
  /// Both orderings of every unordered pair (training augmentation).
  kBoth,
  /// One ordering per unordered pair, lower record index on the left.
  kCanonical,
};

/// All within-job pairs restricted to `jobs` (every job when empty).
std::vector<CurvePair> pair_and_label(const std::vector<ModelRecord>& records, PairOrdering ordering,
                                      const std::vector<std::string>& jobs = {});

struct SplitRatios {
  double train = 0.7;
  double validation = 0.1;
  double test = 0.2;
};

struct DatasetSplit {
  std::size_t fold = 0;
  std::vector<std::string> train_jobs;
  std::vector<std::string> validation_jobs;
  std::vector<std::string> test_jobs;
  std::vector<CurvePair> train;
  std::vector<CurvePair> validation;
  std::vector<CurvePair> test;
};

/// Job-grouped k-fold split. Fold f tests on the f-th block of shuffled jobs;
/// the validation jobs come next in rotation; the remainder trains. Pairs are
/// formed after partitioning.
std::vector<DatasetSplit> grouped_kfold(const std::vector<ModelRecord>& records, std::size_t k = 5,
                                        SplitRatios ratios = {}, std::uint64_t seed = 0);

/// Splits manifest: job ids per partition per fold.
nlohmann::json splits_manifest(const std::vector<DatasetSplit>& splits, std::uint64_t seed);

/// Distinct job ids in first-appearance order.
std::vector<std::string> job_ids(const std::vector<ModelRecord>& records);

/// Stateless 64-bit mix used to derive per-entity seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace necurve
