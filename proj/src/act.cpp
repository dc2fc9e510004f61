#include "necurve/act.hpp"

#include <algorithm>
#include <cmath>

#include "necurve/error.hpp"

namespace necurve::act {

using diff::Array;
using diff::Shape;
using diff::Tape;
using diff::Var;

namespace {

Array tiled(const Array& matrix, std::size_t batch) {
  Array out({batch, matrix.shape()[0], matrix.shape()[1]});
  for (std::size_t b = 0; b < batch; ++b) std::copy(matrix.data().begin(), matrix.data().end(), out.ptr() + b * matrix.size());
  return out;
}

/// [0, 1, ..., L-1] repeated over `rows` rows.
Array origin_times(std::size_t rows, std::size_t length) {
  Array out({rows, length});
  for (std::size_t b = 0; b < rows; ++b)
    for (std::size_t r = 0; r < length; ++r) out.at(b, r) = static_cast<double>(r);
  return out;
}

/// [1, 2, ..., L] repeated over `rows` rows.
Array positions(std::size_t rows, std::size_t length) {
  Array out({rows, length});
  for (std::size_t b = 0; b < rows; ++b)
    for (std::size_t c = 0; c < length; ++c) out.at(b, c) = static_cast<double>(c + 1);
  return out;
}

/// [0, y_1, ..., y_{L-1}]: curve values seen from each left index.
Var shifted_curve(Var y) {
  const std::size_t batch = y.shape()[0], length = y.shape()[1];
  Var origin = y.tape().constant(Array({batch, 1}));
  if (length == 1) return origin;
  const Var parts[] = {origin, diff::slice(y, 1, 0, length - 1)};
  return diff::concat(parts, 1);
}

void require_curves(const Var& y) {
  if (y.shape().size() != 2 || y.shape()[1] == 0) {
    throw ShapeError("act: curves must be [B, L], got " + diff::shape_str(y.shape()));
  }
}

}  // namespace

MaskMode parse_mask_mode(const std::string& name) {
  if (name == "strict") return MaskMode::kStrict;
  if (name == "literal") return MaskMode::kLiteral;
  throw ConfigError("unknown mask mode '" + name + "' (expected strict or literal)");
}

std::string to_string(MaskMode mode) { return mode == MaskMode::kStrict ? "strict" : "literal"; }

Freedom parse_freedom(int df) {
  if (df < 1 || df > 3) throw ConfigError("act degree of freedom must be 1, 2 or 3");
  return static_cast<Freedom>(df);
}

Array admissibility_mask(std::size_t length) {
  Array keep({length, length});
  for (std::size_t r = 0; r < length; ++r)
    for (std::size_t c = r; c < length; ++c) keep.at(r, c) = 1.0;
  return keep;
}

Var soft_indicator(Var a, double gamma, MaskMode mode) {
  if (!(gamma > 0.0)) throw DomainError("soft_indicator: gamma must be positive");
  const Shape s = a.shape();
  if ((s.size() != 2 && s.size() != 3) || s[s.size() - 1] != s[s.size() - 2]) {
    throw ShapeError("soft_indicator: expected [L, L] or [B, L, L], got " + diff::shape_str(s));
  }
  const std::size_t length = s.back();
  Array keep = admissibility_mask(length);
  if (s.size() == 3) keep = tiled(keep, s[0]);
  if (mode == MaskMode::kLiteral) return diff::softmax_columns(diff::scale(diff::mask_fill(a, keep, 0.0), 1.0 / gamma));
  return diff::softmax_columns(diff::mask_fill(diff::scale(a, 1.0 / gamma), keep, kMaskedLogit));
}

Array hard_indicator(std::span<const std::size_t> left) {
  const std::size_t length = left.size();
  Array k({length, length});
  for (std::size_t c = 0; c < length; ++c) {
    if (left[c] > c) throw DomainError("hard_indicator: left index " + std::to_string(left[c]) + " not admissible");
    k.at(left[c], c) = 1.0;
  }
  return k;
}

Selection select(Var y, Var indicator) {
  require_curves(y);
  const std::size_t batch = y.shape()[0], length = y.shape()[1];
  const Shape ks = indicator.shape();
  Tape& tape = y.tape();
  Var values = shifted_curve(y);
  if (ks.size() == 2) {
    if (ks[0] != length || ks[1] != length) throw ShapeError("select: indicator " + diff::shape_str(ks));
    Var left = diff::matmul(tape.constant(origin_times(1, length)), indicator);
    const std::vector<std::size_t> broadcast(batch, 0);
    return {diff::gather_rows(left, broadcast), diff::matmul(values, indicator)};
  }
  if (ks.size() != 3 || ks[0] != batch || ks[1] != length || ks[2] != length) {
    throw ShapeError("select: indicator " + diff::shape_str(ks) + " for curves " + diff::shape_str(y.shape()));
  }
  return {diff::vecmat_batched(tape.constant(origin_times(batch, length)), indicator),
          diff::vecmat_batched(values, indicator)};
}

Var window_transform(Var y, const Selection& selection) {
  require_curves(y);
  Var t = y.tape().constant(positions(y.shape()[0], y.shape()[1]));
  Var window = diff::sub(t, selection.left_index);
  for (double w : window.value().data()) {
    if (!(w >= kMinWindow)) throw NumericGuardError("window_transform: soft window below 1e-6");
  }
  return diff::div(diff::sub(diff::mul(t, y), diff::mul(selection.left_index, selection.selected)), window);
}

Var window_transform(Var y, Var indicator) { return window_transform(y, select(y, indicator)); }

std::vector<double> hard_index_select(std::span<const double> y, std::span<const std::size_t> left) {
  if (left.size() != y.size()) throw ShapeError("hard_index_select: index count differs from curve length");
  std::vector<double> out(left.size());
  for (std::size_t c = 0; c < left.size(); ++c) {
    if (left[c] > c) throw DomainError("hard_index_select: index " + std::to_string(left[c]) + " out of range");
    out[c] = left[c] == 0 ? 0.0 : y[left[c] - 1];
  }
  return out;
}

Array df1_variables(std::size_t length, WindowInit init, std::uint64_t seed) {
  if (length == 0) throw DomainError("df1_variables: length must be positive");
  constexpr double kMargin = 0.2;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Array a({length, length});
  for (std::size_t c = 0; c < length; ++c) {
    const double peak = 0.9 + 0.09 * unit(rng);
    const std::size_t peak_row = init == WindowInit::kMinWindow ? c : 0;
    for (std::size_t r = 0; r < length; ++r) {
      // Keep entries away from 0 so the logit parameterization stays finite.
      a.at(r, c) = r == peak_row ? peak : 1e-3 + (peak - kMargin - 1e-3) * unit(rng);
    }
  }
  return a;
}

Array shift_time_mask(std::size_t length) {
  Array m({length, length});
  for (std::size_t j = 0; j < length; ++j)
    for (std::size_t c = j + 1; c < length; ++c) m.at(j, c) = static_cast<double>(c - j);
  return m;
}

Var shift_value_mask(Var y) {
  require_curves(y);
  const std::size_t batch = y.shape()[0], length = y.shape()[1];
  // selector[r, j * L + c] = 1 iff left index r = c - j is a real checkpoint.
  Array selector({length, length * length});
  for (std::size_t j = 0; j < length; ++j)
    for (std::size_t c = j + 1; c < length; ++c) selector.at(c - j, j * length + c) = 1.0;
  Var flat = diff::matmul(shifted_curve(y), y.tape().constant(std::move(selector)));
  return diff::reshape(flat, {batch, length, length});
}

Selection select_by_window(Var y, Var d_hat) {
  require_curves(y);
  const std::size_t batch = y.shape()[0], length = y.shape()[1];
  if (d_hat.shape() != Shape{batch, length, length}) {
    throw ShapeError("select_by_window: indicator " + diff::shape_str(d_hat.shape()));
  }
  Var time_mask = y.tape().constant(tiled(shift_time_mask(length), batch));
  return {diff::sum_axis(diff::mul(d_hat, time_mask), 1), diff::sum_axis(diff::mul(d_hat, shift_value_mask(y)), 1)};
}

void to_json(nlohmann::json& j, const TransformConfig& c) {
  j = {{"act_df", static_cast<int>(c.freedom)},
       {"gamma", c.gamma},
       {"mask_mode", to_string(c.mask)},
       {"init", c.init == WindowInit::kMinWindow ? "min" : "max"}};
}

void from_json(const nlohmann::json& j, TransformConfig& c) {
  const TransformConfig d;
  c.freedom = parse_freedom(j.value("act_df", static_cast<int>(d.freedom)));
  c.gamma = j.value("gamma", d.gamma);
  c.mask = parse_mask_mode(j.value("mask_mode", to_string(d.mask)));
  const std::string init = j.value("init", std::string("min"));
  if (init != "min" && init != "max") throw ConfigError("act init must be min or max");
  c.init = init == "min" ? WindowInit::kMinWindow : WindowInit::kMaxWindow;
}

CurveTransform::CurveTransform(diff::ParamStore& store, std::string prefix, std::size_t length,
                               TransformConfig config, std::mt19937_64& rng)
    : prefix_(std::move(prefix)), length_(length), config_(config) {
  if (length == 0) throw ConfigError("act: curve length must be positive");
  if (!(config.gamma > 0.0 && config.gamma <= 1.0)) throw ConfigError("act: gamma must lie in (0, 1]");
  if (config.freedom == Freedom::kShared) {
    Array raw = df1_variables(length, config.init, rng());
    for (double& v : raw.data()) v = std::log(v / (1.0 - v));
    store.add(prefix_ + ".window_logits", std::move(raw));
  } else {
    encoder_ = LstmLayer(store, prefix_ + ".encoder", 1, length, rng);
  }
}

std::vector<Var> CurveTransform::alpha_states(Context& ctx, Var y) const {
  const std::size_t length = y.shape()[1];
  std::vector<Var> steps;
  steps.reserve(length);
  for (std::size_t c = 0; c < length; ++c) steps.push_back(diff::slice(y, 1, c, c + 1));
  return encoder_(ctx, steps);
}

Var CurveTransform::variables(Context& ctx, Var y) const {
  require_curves(y);
  if (y.shape()[1] != length_) {
    throw ShapeError("act: expected curves of length " + std::to_string(length_) + ", got " +
                     std::to_string(y.shape()[1]));
  }
  switch (config_.freedom) {
    case Freedom::kShared:
      return diff::sigmoid(ctx.param(prefix_ + ".window_logits"));
    case Freedom::kPerCurve: {
      Var alpha = diff::sigmoid(alpha_states(ctx, y).back());
      const std::vector<Var> columns(length_, alpha);
      return diff::stack(columns, 2);
    }
    case Freedom::kPerPosition: {
      std::vector<Var> columns;
      for (const Var& h : alpha_states(ctx, y)) columns.push_back(diff::sigmoid(h));
      return diff::stack(columns, 2);
    }
  }
  throw ConfigError("act: unknown degree of freedom");
}

Var CurveTransform::indicator(Context& ctx, Var y) const {
  return soft_indicator(variables(ctx, y), config_.gamma, config_.mask);
}

Var CurveTransform::operator()(Context& ctx, Var y) const {
  Var k_hat = indicator(ctx, y);
  if (config_.freedom == Freedom::kPerCurve) return window_transform(y, select_by_window(y, k_hat));
  return window_transform(y, select(y, k_hat));
}

nlohmann::json export_indicator(std::size_t length, double gamma, WindowInit init, std::uint64_t seed,
                                MaskMode mode) {
  diff::Tape tape;
  Var a = tape.constant(df1_variables(length, init, seed));
  Var k_hat = soft_indicator(a, gamma, mode);
  auto rows = [length](const Array& m) {
    std::vector<std::vector<double>> out(length, std::vector<double>(length));
    for (std::size_t r = 0; r < length; ++r)
      for (std::size_t c = 0; c < length; ++c) out[r][c] = m.at(r, c);
    return out;
  };
  return {{"length", length},
          {"gamma", gamma},
          {"init", init == WindowInit::kMinWindow ? "min" : "max"},
          {"mask_mode", to_string(mode)},
          {"A", rows(a.value())},
          {"K_hat", rows(k_hat.value())}};
}

}  // namespace necurve::act
