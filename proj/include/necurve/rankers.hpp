#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "necurve/act.hpp"
#include "necurve/layers.hpp"
#include "necurve/synthgen.hpp"

namespace necurve {

enum class RankerKind { kGreedy, kSiamese, kR2 };

struct RankerConfig {
  RankerKind kind = RankerKind::kR2;
  bool use_act = false;
  act::TransformConfig act;
  TcnConfig tcn;
  std::size_t lstm_dim = 64;
  std::size_t lstm_layers = 2;
  std::size_t embed_dim = 64;
  std::size_t head_hidden = 64;
  double dropout = 0.3;
  double lambda = 0.1;
  bool metadata = true;
  double fraction = 0.6;
  /// Seeds the vectors handed to domains never seen in training.
  std::uint64_t eval_seed = 0;

  void validate() const;
  /// "greedy", "siamese", "siamese+act", "r2" or "r2+act".
  std::string ranker_name() const;
  void set_ranker_name(const std::string& name);
};

void to_json(nlohmann::json& j, const RankerConfig& config);
void from_json(const nlohmann::json& j, RankerConfig& config);

/// Input statistics fixed from the training records.
struct FeatureSpace {
  std::size_t curve_length = 0;
  std::size_t hyper_dim = 0;
  std::size_t arch_layers = 0;
  std::size_t arch_features = 0;
  /// Per (layer, feature) slot, for standardizing architecture dimensions.
  std::vector<double> arch_mean;
  std::vector<double> arch_sd;
  std::vector<std::string> domains;

  static FeatureSpace fit(const std::vector<ModelRecord>& records, std::span<const std::size_t> rows);
  std::optional<std::size_t> domain_index(const std::string& id) const;
  /// Row-major standardized architecture of one record.
  std::vector<double> standardized_architecture(const ModelRecord& record) const;
};

void to_json(nlohmann::json& j, const FeatureSpace& features);
void from_json(const nlohmann::json& j, FeatureSpace& features);

/// Pairs over the distinct records they touch; left/right index into `records`.
struct PairBatch {
  std::vector<const ModelRecord*> records;
  std::vector<std::size_t> left;
  std::vector<std::size_t> right;
  std::vector<double> labels;

  static PairBatch build(const std::vector<ModelRecord>& records, std::span<const CurvePair> pairs);
  std::size_t size() const noexcept { return left.size(); }
};

struct RankerOutput {
  /// Pair distances [P].
  diff::Var delta;
  /// Architecture reconstruction MSE, absent without the metadata path.
  std::optional<diff::Var> reconstruction;
};

/// Stable logistic map e^d / (1 + e^d).
double pairwise_probability(double delta);
/// -p ln q - (1 - p) ln(1 - q), with q clamped away from 0 and 1.
double ce_loss(double probability, int label);
double total_loss(double ce, double mse, double lambda);

/// Learned pairwise ranker: the difference-based R² model or the Siamese
/// score-difference baseline, with optional curve transformation.
class PairRanker {
 public:
  PairRanker(RankerConfig config, FeatureSpace features, std::uint64_t seed);

  RankerOutput forward(Context& ctx, const PairBatch& batch) const;
  /// CE + lambda * MSE over the batch.
  diff::Var loss(Context& ctx, const PairBatch& batch) const;
  /// Inference-mode probabilities for the batch pairs.
  std::vector<double> predict(const PairBatch& batch) const;

  /// Curve inputs after truncation to the observed prefix, [U, L].
  diff::Var curves(Context& ctx, const PairBatch& batch) const;
  /// Domain vectors for the batch records, [U, embed_dim]; unseen ids use keyed random vectors.
  diff::Var domains(Context& ctx, const PairBatch& batch) const;
  /// Architecture embeddings [A, lstm_dim] of distinct architectures and the
  /// index of each record's architecture.
  std::pair<diff::Var, std::vector<std::size_t>> architectures(Context& ctx, const PairBatch& batch,
                                                               std::optional<diff::Var>* reconstruction) const;

  diff::ParamStore& params() noexcept { return params_; }
  const diff::ParamStore& params() const noexcept { return params_; }
  const RankerConfig& config() const noexcept { return config_; }
  const FeatureSpace& features() const noexcept { return features_; }
  std::size_t observed_length() const noexcept { return observed_; }
  const TcnEncoder& curve_encoder() const noexcept { return tcn_; }
  const act::CurveTransform* transform() const noexcept { return config_.use_act ? &transform_ : nullptr; }

  nlohmann::json checkpoint() const;
  static PairRanker from_checkpoint(const nlohmann::json& j);

 private:
  diff::Var pair_features(Context& ctx, const PairBatch& batch, std::optional<diff::Var>* reconstruction) const;
  diff::Var record_scores(Context& ctx, const PairBatch& batch, std::optional<diff::Var>* reconstruction) const;
  diff::Var head(Context& ctx, diff::Var features) const;

  RankerConfig config_;
  FeatureSpace features_;
  std::uint64_t seed_ = 0;
  std::size_t observed_ = 0;
  diff::ParamStore params_;
  act::CurveTransform transform_;
  TcnEncoder tcn_;
  BatchNorm hyper_norm_;
  Lstm arch_encoder_;
  Lstm arch_decoder_;
  Linear arch_readout_;
  Linear hidden_;
  Linear output_;
};

}  // namespace necurve
