#include "necurve/curve_math.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "necurve/error.hpp"

namespace necurve {

namespace {

constexpr double kCtrFloor = 1e-12;

double normalizer_for(double ctr) {
  if (!(ctr > kCtrFloor && ctr < 1.0 - kCtrFloor)) {
    std::ostringstream msg;
    msg << "empirical CTR " << ctr << " is degenerate; NE normalizer is zero";
    throw DegenerateCtrError(msg.str());
  }
  return log_loss(ctr, ctr);
}

void check_range(const LossStream& stream, std::size_t first, std::size_t last) {
  if (first < 1 || first > last || last > stream.size()) {
    std::ostringstream msg;
    msg << "range [" << first << ", " << last << "] invalid for stream of length " << stream.size();
    throw DomainError(msg.str());
  }
}

}  // namespace

double log_loss(double a, double b) {
  if (!(b > 0.0 && b < 1.0)) {
    throw DomainError("log_loss: probability b must lie in (0, 1)");
  }
  if (!(a >= 0.0 && a <= 1.0)) {
    throw DomainError("log_loss: label a must lie in [0, 1]");
  }
  double loss = 0.0;
  if (a > 0.0) loss -= a * std::log(b);
  if (a < 1.0) loss -= (1.0 - a) * std::log1p(-b);
  return loss;
}

LossStream LossStream::from_predictions(std::span<const int> labels,
                                        std::span<const double> predictions) {
  if (labels.size() != predictions.size()) {
    throw ShapeError("LossStream: labels and predictions differ in length");
  }
  LossStream stream;
  stream.losses.reserve(labels.size());
  stream.ctr_prefix.reserve(labels.size());
  double clicks = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DomainError("LossStream: labels must be 0 or 1");
    stream.losses.push_back(log_loss(labels[i], predictions[i]));
    clicks += labels[i];
    stream.ctr_prefix.push_back(clicks / static_cast<double>(i + 1));
  }
  return stream;
}

LossStream LossStream::from_losses(std::vector<double> losses, std::vector<double> ctr_prefix) {
  LossStream stream;
  stream.losses = std::move(losses);
  stream.ctr_prefix = std::move(ctr_prefix);
  stream.validate();
  return stream;
}

LossStream LossStream::pre_normalized(std::vector<double> normalized_losses) {
  LossStream stream;
  stream.losses = std::move(normalized_losses);
  stream.normalized = true;
  stream.validate();
  return stream;
}

double LossStream::range_ctr(std::size_t first, std::size_t last) const {
  check_range(*this, first, last);
  if (normalized) throw DomainError("range_ctr: pre-normalized stream carries no CTR path");
  const double upto_last = static_cast<double>(last) * ctr_prefix[last - 1];
  const double upto_before =
      first > 1 ? static_cast<double>(first - 1) * ctr_prefix[first - 2] : 0.0;
  const double ctr = (upto_last - upto_before) / static_cast<double>(last - first + 1);
  return std::clamp(ctr, 0.0, 1.0);
}

void LossStream::validate() const {
  for (double l : losses) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw DomainError("LossStream: losses must be finite and >= 0");
  }
  if (normalized) {
    if (!ctr_prefix.empty()) throw ShapeError("LossStream: pre-normalized stream must not carry a CTR path");
    return;
  }
  if (ctr_prefix.size() != losses.size()) {
    throw ShapeError("LossStream: CTR prefix length differs from loss count");
  }
  for (double q : ctr_prefix) {
    if (!(q >= 0.0 && q <= 1.0)) throw DomainError("LossStream: CTR prefix means must lie in [0, 1]");
  }
}

void LearningCurve::validate() const {
  if (values.empty()) throw TooShortError("LearningCurve: empty curve");
  if (counts.size() != values.size()) throw ShapeError("LearningCurve: counts and values differ in length");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw DomainError("LearningCurve: non-finite value");
    if (!(counts[i] > 0.0)) throw DomainError("LearningCurve: counts must be positive");
    if (i > 0 && !(counts[i] > counts[i - 1])) {
      throw DomainError("LearningCurve: counts must be strictly increasing");
    }
  }
}

double normalized_entropy(const LossStream& stream, std::size_t first, std::size_t last) {
  check_range(stream, first, last);
  double sum = 0.0;
  for (std::size_t i = first - 1; i < last; ++i) sum += stream.losses[i];
  const double mean = sum / static_cast<double>(last - first + 1);
  if (stream.normalized) return mean;
  return mean / normalizer_for(stream.range_ctr(first, last));
}

LearningCurve lne_curve(const LossStream& stream, std::span<const std::size_t> checkpoints) {
  LearningCurve curve;
  curve.counts.reserve(checkpoints.size());
  curve.values.reserve(checkpoints.size());
  double cumulative = 0.0;
  std::size_t consumed = 0;
  for (std::size_t t : checkpoints) {
    if (t < 1 || t > stream.size() || t <= consumed) {
      throw DomainError("lne_curve: checkpoints must be strictly increasing within [1, N]");
    }
    for (; consumed < t; ++consumed) cumulative += stream.losses[consumed];
    const double mean = cumulative / static_cast<double>(t);
    const double value = stream.normalized ? mean : mean / normalizer_for(stream.ctr_prefix[t - 1]);
    curve.counts.push_back(static_cast<double>(t));
    curve.values.push_back(value);
  }
  return curve;
}

double wne_direct(const LossStream& stream, WindowSpec spec) {
  if (spec.d < 1 || spec.d > spec.t || spec.t > stream.size()) {
    throw DomainError("wne_direct: window requires 1 <= d <= t <= N");
  }
  return normalized_entropy(stream, spec.t - spec.d + 1, spec.t);
}

double wne_from_lne(const LearningCurve& curve, WindowSpec spec) {
  if (spec.d < 1) throw DomainError("wne_from_lne: window must be positive");
  if (spec.t < 1 || spec.t > curve.size() || spec.d > spec.t) {
    throw DomainError("wne_from_lne: window requires 1 <= d <= t <= L");
  }
  const double count_t = curve.counts[spec.t - 1];
  const double total_t = count_t * curve.values[spec.t - 1];
  const std::size_t left = spec.t - spec.d;
  // LNE_0 := 0 at count 0, so the d = t case returns LNE_t.
  const double count_left = left > 0 ? curve.counts[left - 1] : 0.0;
  const double total_left = left > 0 ? count_left * curve.values[left - 1] : 0.0;
  if (left == 0) return curve.values[spec.t - 1];
  return (total_t - total_left) / (count_t - count_left);
}

LearningCurve resample_curve(const LearningCurve& curve, std::size_t n) {
  if (curve.size() < 2) throw TooShortError("resample_curve: curve needs at least 2 points");
  if (n < 2) throw DomainError("resample_curve: target length must be >= 2");
  curve.validate();
  const double lo = curve.counts.front();
  const double hi = curve.counts.back();
  LearningCurve out;
  out.counts.resize(n);
  out.values.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double x = k + 1 == n ? hi : lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(n - 1);
    out.counts[k] = x;
    auto it = std::upper_bound(curve.counts.begin(), curve.counts.end(), x);
    std::size_t seg = it == curve.counts.begin() ? 0 : static_cast<std::size_t>(it - curve.counts.begin()) - 1;
    seg = std::min(seg, curve.size() - 2);
    const double x0 = curve.counts[seg];
    const double x1 = curve.counts[seg + 1];
    const double w = (x - x0) / (x1 - x0);
    out.values[k] = w == 0.0 ? curve.values[seg]
                             : (w == 1.0 ? curve.values[seg + 1]
                                         : curve.values[seg] + w * (curve.values[seg + 1] - curve.values[seg]));
  }
  out.values.front() = curve.values.front();
  out.values.back() = curve.values.back();
  return out;
}

std::size_t observed_length(std::size_t length, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw DomainError("observed fraction must lie in (0, 1]");
  const auto n = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(length) + 1e-9));
  if (n < 1) throw DomainError("observed fraction leaves no visible point");
  return std::min(n, length);
}

GreedyPrediction greedy_rank(const LearningCurve& left, const LearningCurve& right,
                             double observed_fraction) {
  if (left.size() != right.size()) throw ShapeError("greedy_rank: curves differ in length");
  const std::size_t seen = observed_length(left.size(), observed_fraction);
  const double a = left.values[seen - 1];
  const double b = right.values[seen - 1];
  GreedyPrediction out;
  if (a < b) {
    out.probability = 1.0;
  } else if (a == b) {
    out.tie = true;
  }
  return out;
}

void to_json(nlohmann::json& j, const CurveRecord& record) {
  j = nlohmann::json{{"job_id", record.job_id},
                     {"model_id", record.model_id},
                     {"counts", record.curve.counts},
                     {"lne", record.curve.values},
                     {"normalized", record.normalized}};
  if (record.losses) j["losses"] = *record.losses;
  if (record.ctr) j["ctr"] = *record.ctr;
}

void from_json(const nlohmann::json& j, CurveRecord& record) {
  j.at("job_id").get_to(record.job_id);
  j.at("model_id").get_to(record.model_id);
  j.at("counts").get_to(record.curve.counts);
  j.at("lne").get_to(record.curve.values);
  record.normalized = j.value("normalized", false);
  if (j.contains("losses")) record.losses = j.at("losses").get<std::vector<double>>();
  if (j.contains("ctr")) record.ctr = j.at("ctr").get<std::vector<double>>();
}

}  // namespace necurve
