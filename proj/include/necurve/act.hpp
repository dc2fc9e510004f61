#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "necurve/layers.hpp"

// Adaptive curve transformation: turns a cumulative (LNE-style) curve into a
// composite windowed curve through a soft choice of left index per position.
//
// Indexing: an indicator has L rows and L columns. Column c is position
// t = c + 1. Row r is left index k = r, with row 0 the virtual origin
// (t0 = 0, y0 = 0). Row r is admissible for column c iff r <= c.
namespace necurve::act {

enum class MaskMode {
  /// Inadmissible logits pushed to -1e9 after scaling; their mass is exactly 0.
  kStrict,
  /// softmax((A * U) / gamma); inadmissible rows keep a logit of 0.
  kLiteral,
};

enum class WindowInit {
  /// Peak at row t - 1 (one-checkpoint window).
  kMinWindow,
  /// Peak at row 0 (full window, the cumulative curve itself).
  kMaxWindow,
};

enum class Freedom {
  /// One trainable matrix shared by all curves.
  kShared = 1,
  /// One window size per curve, from the last LSTM state.
  kPerCurve = 2,
  /// One column per position, from the LSTM state at that position.
  kPerPosition = 3,
};

constexpr double kDefaultGamma = 0.05;
constexpr double kMaskedLogit = -1e9;
/// Smallest soft window t - k accepted by the transform.
constexpr double kMinWindow = 1e-6;

MaskMode parse_mask_mode(const std::string& name);
std::string to_string(MaskMode mode);
Freedom parse_freedom(int df);

/// keep[r, c] = 1 iff r <= c.
diff::Array admissibility_mask(std::size_t length);

/// Column softmax of window variables `a` ([L, L] or [B, L, L]) at smoothness gamma.
diff::Var soft_indicator(diff::Var a, double gamma, MaskMode mode = MaskMode::kStrict);

/// Exact indicator: column c is one-hot at row left[c].
diff::Array hard_indicator(std::span<const std::size_t> left);

/// Soft left index and soft selected value per position, both [B, L].
struct Selection {
  diff::Var left_index;
  diff::Var selected;
};

/// Applies an indicator ([L, L] shared or [B, L, L]) to curves y [B, L].
Selection select(diff::Var y, diff::Var indicator);

/// z_t = (t * y_t - k_t * y_k) / (t - k_t), elementwise over [B, L].
/// Throws NumericGuardError when some t - k_t falls below kMinWindow.
diff::Var window_transform(diff::Var y, const Selection& selection);
diff::Var window_transform(diff::Var y, diff::Var indicator);

/// [y_{k_1}, ..., y_{k_L}] with y_0 = 0; k_t must be admissible for t.
std::vector<double> hard_index_select(std::span<const double> y, std::span<const std::size_t> left);

/// Initial window variables in (0, 1) with the column peaks placed per `init`.
diff::Array df1_variables(std::size_t length, WindowInit init, std::uint64_t seed);

/// Left index per (window row j, column c): c - j when c > j, else 0.
diff::Array shift_time_mask(std::size_t length);
/// Value at the left index per (window row j, column c) for curves y [B, L].
diff::Var shift_value_mask(diff::Var y);
/// Left indices and selected values from a window-size indicator d_hat [B, L, L].
Selection select_by_window(diff::Var y, diff::Var d_hat);

struct TransformConfig {
  Freedom freedom = Freedom::kPerPosition;
  double gamma = kDefaultGamma;
  MaskMode mask = MaskMode::kStrict;
  WindowInit init = WindowInit::kMinWindow;
};

void to_json(nlohmann::json& j, const TransformConfig& config);
void from_json(const nlohmann::json& j, TransformConfig& config);

/// Trainable transformation of curves of a fixed length.
class CurveTransform {
 public:
  CurveTransform() = default;
  CurveTransform(diff::ParamStore& store, std::string prefix, std::size_t length, TransformConfig config,
                 std::mt19937_64& rng);

  /// y [B, L] -> z [B, L]
  diff::Var operator()(Context& ctx, diff::Var y) const;
  /// Window variables: [L, L] for the shared form, else [B, L, L].
  diff::Var variables(Context& ctx, diff::Var y) const;
  /// Soft indicator over left indices (shared form) or window sizes (per-curve form)
  /// or left indices per position (per-position form).
  diff::Var indicator(Context& ctx, diff::Var y) const;

  std::size_t length() const noexcept { return length_; }
  const TransformConfig& config() const noexcept { return config_; }

 private:
  std::vector<diff::Var> alpha_states(Context& ctx, diff::Var y) const;

  std::string prefix_;
  std::size_t length_ = 0;
  TransformConfig config_;
  LstmLayer encoder_;
};

/// Row-major JSON for heatmaps: {"length", "gamma", "init", "A", "K_hat"}.
nlohmann::json export_indicator(std::size_t length, double gamma, WindowInit init, std::uint64_t seed,
                                MaskMode mode = MaskMode::kStrict);

}  // namespace necurve::act
