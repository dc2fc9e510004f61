#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace necurve {

/// Per-example losses of one model on a single-pass example stream.
///
/// Two flavours exist. A raw stream carries log losses l(q_i, q̂_i) together
/// with the prefix means of the empirical CTR, so NE over any range can be
/// normalized by l(q̄, q̄) of that range. A pre-normalized stream carries
/// losses that are already divided by their normalizer (normalizer ≡ 1),
/// which sidesteps degenerate single-example CTRs.
struct LossStream {
  std::vector<double> losses;
  /// q̄[1,t] for t = 1..N. Empty when `normalized` is set.
  std::vector<double> ctr_prefix;
  bool normalized = false;

  static LossStream from_predictions(std::span<const int> labels,
                                     std::span<const double> predictions);
  static LossStream from_losses(std::vector<double> losses, std::vector<double> ctr_prefix);
  static LossStream pre_normalized(std::vector<double> normalized_losses);

  std::size_t size() const noexcept { return losses.size(); }

  /// Empirical CTR of the 1-based inclusive range [first, last].
  double range_ctr(std::size_t first, std::size_t last) const;

  void validate() const;
};

/// LNE values over example counts. Counts are doubles because resampled
/// grids are not integral in general.
struct LearningCurve {
  std::vector<double> counts;
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  void validate() const;
};

/// 1-based curve position `t` and window length `d` in positions.
struct WindowSpec {
  std::size_t t = 1;
  std::size_t d = 1;
};

/// Cross-entropy l(a, b) = -a ln b - (1 - a) ln(1 - b).
double log_loss(double a, double b);

/// NE over the 1-based inclusive range [first, last].
double normalized_entropy(const LossStream& stream, std::size_t first, std::size_t last);

/// LNE at each (1-based, strictly increasing) checkpoint.
LearningCurve lne_curve(const LossStream& stream, std::span<const std::size_t> checkpoints);

/// WNE_t(d) evaluated straight from the stream over examples (t - d, t].
double wne_direct(const LossStream& stream, WindowSpec spec);

/// WNE recovered from an LNE curve under a stable CTR:
/// (c_t LNE_t - c_{t-d} LNE_{t-d}) / (c_t - c_{t-d}) with c the example counts
/// and LNE_0 := 0 at count 0. With per-example checkpoints (c_t = t) this is
/// (t LNE_t - (t - d) LNE_{t-d}) / d.
double wne_from_lne(const LearningCurve& curve, WindowSpec spec);

/// Piecewise-linear resampling onto `n` equally spaced counts spanning
/// [counts.front(), counts.back()]. Endpoints are copied exactly.
LearningCurve resample_curve(const LearningCurve& curve, std::size_t n);

/// Number of leading points visible when `fraction` of an `length`-point
/// curve has been observed.
std::size_t observed_length(std::size_t length, double fraction);

struct GreedyPrediction {
  /// 1 when the left curve is predicted superior, else 0.
  double probability = 0.0;
  bool tie = false;
};

/// GreedyRank: lower last-observed LNE wins; ties predict the right curve.
GreedyPrediction greedy_rank(const LearningCurve& left, const LearningCurve& right,
                             double observed_fraction);

/// One JSON-Lines curve record.
struct CurveRecord {
  std::string job_id;
  std::string model_id;
  LearningCurve curve;
  bool normalized = false;
  std::optional<std::vector<double>> losses;
  std::optional<std::vector<double>> ctr;
};

void to_json(nlohmann::json& j, const CurveRecord& record);
void from_json(const nlohmann::json& j, CurveRecord& record);

}  // namespace necurve
