#include "necurve/diff/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "necurve/error.hpp"

namespace necurve::diff {

namespace {

double checked(double v, const std::string& where, std::size_t index) {
  if (!std::isfinite(v)) {
    std::ostringstream msg;
    msg << "grad_check: non-finite evaluation at " << where << "[" << index << "]";
    throw GradCheckError(msg.str());
  }
  return v;
}

void consider(GradCheckResult& result, const std::string& name, std::size_t index, double analytic,
              double numeric) {
  const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
  ++result.coordinates;
  if (result.coordinates == 1 || err > result.max_error) {
    result.max_error = err;
    result.worst_param = name;
    result.worst_index = index;
    result.analytic = analytic;
    result.numeric = numeric;
  }
}

}  // namespace

GradCheckResult grad_check(const std::function<Var(Tape&, Var)>& f, const Array& point, double eps) {
  Array analytic;
  {
    Tape tape;
    Var x = tape.variable(point);
    Var y = f(tape, x);
    checked(y.value()[0], "input", 0);
    tape.backward(y);
    analytic = x.grad().empty() ? Array(point.shape()) : x.grad();
  }
  auto eval = [&](const Array& at, std::size_t index) {
    Tape tape;
    Var y = f(tape, tape.constant(at));
    return checked(y.value()[0], "input", index);
  };
  GradCheckResult result;
  Array probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + eps;
    const double up = eval(probe, i);
    probe[i] = point[i] - eps;
    const double down = eval(probe, i);
    probe[i] = point[i];
    consider(result, "input", i, analytic[i], (up - down) / (2.0 * eps));
  }
  return result;
}

GradCheckResult grad_check_params(ParamStore& store, const std::function<Var(Tape&)>& loss, double eps,
                                  std::size_t max_coords, std::uint64_t seed) {
  store.zero_grad();
  {
    Tape tape;
    Var y = loss(tape);
    checked(y.value()[0], "loss", 0);
    tape.backward(y);
  }
  std::map<std::string, Array> analytic;
  for (auto& [name, p] : store.all()) {
    if (p.trainable) analytic[name] = p.grad;
  }
  auto eval = [&](const std::string& name, std::size_t index) {
    Tape tape;
    Var y = loss(tape);
    return checked(y.value()[0], name, index);
  };
  std::mt19937_64 rng(seed);
  GradCheckResult result;
  for (auto& [name, p] : store.all()) {
    if (!p.trainable) continue;
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords != 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (std::size_t i : coords) {
      const double original = p.value[i];
      p.value[i] = original + eps;
      const double up = eval(name, i);
      p.value[i] = original - eps;
      const double down = eval(name, i);
      p.value[i] = original;
      consider(result, name, i, analytic[name][i], (up - down) / (2.0 * eps));
    }
  }
  store.zero_grad();
  return result;
}

}  // namespace necurve::diff
