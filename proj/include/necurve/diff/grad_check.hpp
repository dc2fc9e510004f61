#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

#include "necurve/diff/params.hpp"
#include "necurve/diff/tape.hpp"

namespace necurve::diff {

struct GradCheckResult {
  /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
  double max_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares the tape gradient of `f` at `point` with central differences
/// (f(x + eps e) - f(x - eps e)) / 2 eps on every coordinate. `f` must
/// return a single-element Var. Non-finite evaluations raise GradCheckError.
GradCheckResult grad_check(const std::function<Var(Tape&, Var)>& f, const Array& point,
                           double eps = 1e-5);

/// Same check against every trainable parameter of `store`. `loss` builds the
/// scalar on a fresh tape, binding parameters itself; it must be
/// deterministic. When `max_coords` is nonzero at most that many coordinates
/// per tensor are sampled (seeded by `seed`).
GradCheckResult grad_check_params(ParamStore& store, const std::function<Var(Tape&)>& loss,
                                  double eps = 1e-5, std::size_t max_coords = 0,
                                  std::uint64_t seed = 0);

}  // namespace necurve::diff
