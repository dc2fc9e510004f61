#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "necurve/diff/grad_check.hpp"
#include "necurve/diff/ops.hpp"
#include "necurve/diff/params.hpp"
#include "necurve/error.hpp"

using namespace necurve;
using namespace necurve::diff;

namespace {

using Op = std::function<Var(Var)>;

Array random_array(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Array a(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : a.data()) v = u(rng);
  return a;
}

std::size_t dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Scalarizes op(x) with fixed random weights so every output element matters.
std::function<Var(Tape&, Var)> projected(Op op, std::uint64_t seed) {
  return [op, seed](Tape& tape, Var x) {
    Var y = op(x);
    std::mt19937_64 rng(seed);
    return sum(mul(y, tape.constant(random_array(y.shape(), rng))));
  };
}

/// Runs `trials` randomized gradient checks; `make` draws an op and a point.
void check_op(const std::string& name, const std::function<std::pair<Op, Array>(std::mt19937_64&)>& make,
              int trials = 100) {
  std::mt19937_64 rng(std::hash<std::string>{}(name));
  double worst = 0.0;
  for (int i = 0; i < trials; ++i) {
    auto [op, point] = make(rng);
    worst = std::max(worst, grad_check(projected(op, rng()), point, 1e-6).max_error);
  }
  INFO(name);
  CHECK(worst <= 1e-4);
}

}  // namespace

TEST_CASE("forward values") {
  Tape tape;
  Var id = tape.constant(Array::matrix({{1, 0}, {0, 1}}));
  Var a = tape.constant(Array::matrix({{1, 2}, {3, 4}}));
  const Array product = matmul(id, a).value();
  CHECK(product == a.value());
  Var flat = tape.constant(Array({3, 2}, 0.7));
  for (double v : softmax_columns(flat).value().data()) CHECK(v == doctest::Approx(1.0 / 3.0));
  CHECK(transpose(a).value() == Array::matrix({{1, 3}, {2, 4}}));
  CHECK(sum_axis(a, 0).value() == Array::vector({4, 6}));
  CHECK(sum_axis(a, 1).value() == Array::vector({3, 7}));
  CHECK_THROWS_AS(add(a, tape.constant(Array::vector({1, 2}))), ShapeError);
  CHECK_THROWS_AS(log(tape.constant(Array::vector({1, 0}))), DomainError);
  CHECK_THROWS_AS(div(a, tape.constant(Array({2, 2}))), DomainError);
}

TEST_CASE("gradient of sum(x * x)") {
  Tape tape;
  Var x = tape.variable(Array::vector({1, 2, 3}));
  tape.backward(sum(mul(x, x)));
  CHECK(x.grad() == Array::vector({2, 4, 6}));
}

TEST_CASE("tape is single-shot") {
  Tape tape;
  Var x = tape.variable(Array::scalar(2.0));
  Var y = mul(x, x);
  tape.backward(y);
  CHECK_THROWS(tape.backward(y));
}

TEST_CASE("grad_check on x^2") {
  const auto r = grad_check([](Tape&, Var x) { return mul(x, x); }, Array::scalar(3.0), 1e-5);
  CHECK(r.analytic == doctest::Approx(6.0));
  CHECK(r.max_error <= 1e-9);
  CHECK_THROWS_AS(grad_check([](Tape&, Var x) { return div(x, x); }, Array::scalar(0.0), 1e-5), DomainError);
  CHECK_THROWS_AS(grad_check([](Tape&, Var x) { return scale(x, std::numeric_limits<double>::infinity()); }, Array::scalar(1.0), 1e-5),
                  GradCheckError);
}

TEST_CASE("elementwise ops pass gradient checks") {
  auto shape = [](std::mt19937_64& rng) { return Shape{dim(rng, 1, 4), dim(rng, 1, 5)}; };
  check_op("add", [&](std::mt19937_64& rng) {
    const Shape s = shape(rng);
    Array other = random_array(s, rng);
    return std::pair{Op([other](Var x) { return add(x, x.tape().constant(other)); }), random_array(s, rng)};
  });
  check_op("sub", [&](std::mt19937_64& rng) {
    const Shape s = shape(rng);
    Array other = random_array(s, rng);
    return std::pair{Op([other](Var x) { return sub(x.tape().constant(other), x); }), random_array(s, rng)};
  });
  check_op("mul", [&](std::mt19937_64& rng) {
    const Shape s = shape(rng);
    return std::pair{Op([](Var x) { return mul(x, x); }), random_array(s, rng)};
  });
  check_op("div numerator", [&](std::mt19937_64& rng) {
    const Shape s = shape(rng);
    Array den = random_array(s, rng, 0.5, 2.0);
    return std::pair{Op([den](Var x) { return div(x, x.tape().constant(den)); }), random_array(s, rng)};
  });
  check_op("div denominator", [&](std::mt19937_64& rng) {
    const Shape s = shape(rng);
    Array num = random_array(s, rng);
    return std::pair{Op([num](Var x) { return div(x.tape().constant(num), x); }), random_array(s, rng, 0.5, 2.0)};
  });
  check_op("neg", [&](std::mt19937_64& rng) { return std::pair{Op([](Var x) { return neg(x); }), random_array(shape(rng), rng)}; });
  check_op("scale", [&](std::mt19937_64& rng) {
    return std::pair{Op([](Var x) { return scale(x, -2.5); }), random_array(shape(rng), rng)};
  });
  check_op("add_scalar", [&](std::mt19937_64& rng) {
    return std::pair{Op([](Var x) { return add_scalar(x, 0.3); }), random_array(shape(rng), rng)};
  });
  check_op("sigmoid", [&](std::mt19937_64& rng) {
    return std::pair{Op([](Var x) { return sigmoid(x); }), random_array(shape(rng), rng, -4, 4)};
  });
  check_op("tanh", [&](std::mt19937_64& rng) {
    return std::pair{Op([](Var x) { return tanh(x); }), random_array(shape(rng), rng, -3, 3)};
  });
  check_op("relu", [&](std::mt19937_64& rng) {
    return std::pair{Op([](Var x) { return relu(x); }), random_array(shape(rng), rng)};
  });
  check_op("exp", [&](std::mt19937_64& rng) { return std::pair{Op([](Var x) { return exp(x); }), random_array(shape(rng), rng)}; });
  check_op("log", [&](std::mt19937_64& rng) {
    return std::pair{Op([](Var x) { return log(x); }), random_array(shape(rng), rng, 0.2, 3.0)};
  });
}

TEST_CASE("structural ops pass gradient checks") {
  check_op("add_bias input", [](std::mt19937_64& rng) {
    const Shape s{dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 4)};
    Array bias = random_array({s[2]}, rng);
    return std::pair{Op([bias](Var x) { return add_bias(x, x.tape().constant(bias)); }), random_array(s, rng)};
  });
  check_op("add_bias bias", [](std::mt19937_64& rng) {
    const std::size_t b = dim(rng, 1, 4), f = dim(rng, 1, 5);
    Array input = random_array({b, f}, rng);
    return std::pair{Op([input](Var bias) { return add_bias(bias.tape().constant(input), bias); }),
                     random_array({f}, rng)};
  });
  check_op("matmul left", [](std::mt19937_64& rng) {
    const std::size_t m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
    Array right = random_array({k, n}, rng);
    return std::pair{Op([right](Var x) { return matmul(x, x.tape().constant(right)); }), random_array({m, k}, rng)};
  });
  check_op("matmul right", [](std::mt19937_64& rng) {
    const std::size_t m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
    Array left = random_array({m, k}, rng);
    return std::pair{Op([left](Var x) { return matmul(x.tape().constant(left), x); }), random_array({k, n}, rng)};
  });
  check_op("transpose", [](std::mt19937_64& rng) {
    return std::pair{Op([](Var x) { return transpose(x); }), random_array({dim(rng, 1, 4), dim(rng, 1, 4)}, rng)};
  });
  check_op("concat", [](std::mt19937_64& rng) {
    const std::size_t axis = dim(rng, 0, 1);
    Shape s{dim(rng, 1, 3), dim(rng, 1, 3)};
    Shape t = s;
    t[axis] = dim(rng, 1, 3);
    Array other = random_array(t, rng);
    return std::pair{Op([other, axis](Var x) {
                       const Var parts[] = {x, x.tape().constant(other), x};
                       return concat(parts, axis);
                     }),
                     random_array(s, rng)};
  });
  check_op("slice", [](std::mt19937_64& rng) {
    const Shape s{dim(rng, 2, 4), dim(rng, 2, 5)};
    const std::size_t axis = dim(rng, 0, 1);
    const std::size_t begin = dim(rng, 0, s[axis] - 1), end = dim(rng, begin + 1, s[axis]);
    return std::pair{Op([=](Var x) { return slice(x, axis, begin, end); }), random_array(s, rng)};
  });
  check_op("stack", [](std::mt19937_64& rng) {
    const Shape s{dim(rng, 1, 3), dim(rng, 1, 3)};
    const std::size_t axis = dim(rng, 0, 2);
    return std::pair{Op([axis](Var x) {
                       const Var parts[] = {x, scale(x, 2.0)};
                       return stack(parts, axis);
                     }),
                     random_array(s, rng)};
  });
  check_op("reshape", [](std::mt19937_64& rng) {
    const std::size_t a = dim(rng, 1, 3), b = dim(rng, 1, 3);
    return std::pair{Op([a, b](Var x) { return reshape(x, {b, a}); }), random_array({a, b}, rng)};
  });
  check_op("gather_rows", [](std::mt19937_64& rng) {
    const Shape s{dim(rng, 1, 4), dim(rng, 1, 3)};
    std::vector<std::size_t> rows(dim(rng, 1, 6));
    for (auto& r : rows) r = dim(rng, 0, s[0] - 1);
    return std::pair{Op([rows](Var x) { return gather_rows(x, rows); }), random_array(s, rng)};
  });
  check_op("embedding", [](std::mt19937_64& rng) {
    const Shape s{dim(rng, 1, 5), dim(rng, 1, 4)};
    std::vector<std::size_t> ids(dim(rng, 1, 6));
    for (auto& r : ids) r = dim(rng, 0, s[0] - 1);
    return std::pair{Op([ids](Var x) { return embedding(x, ids); }), random_array(s, rng)};
  });
  check_op("softmax_columns", [](std::mt19937_64& rng) {
    Shape s{dim(rng, 1, 5), dim(rng, 1, 4)};
    if (dim(rng, 0, 1)) s.insert(s.begin(), dim(rng, 1, 3));
    return std::pair{Op([](Var x) { return softmax_columns(x); }), random_array(s, rng, -3, 3)};
  });
  check_op("mask_fill", [](std::mt19937_64& rng) {
    const Shape s{dim(rng, 1, 4), dim(rng, 1, 4)};
    Array keep(s);
    for (double& v : keep.data()) v = static_cast<double>(dim(rng, 0, 1));
    return std::pair{Op([keep](Var x) { return mask_fill(x, keep, -3.0); }), random_array(s, rng)};
  });
}

TEST_CASE("reductions and sequence ops pass gradient checks") {
  check_op("sum", [](std::mt19937_64& rng) {
    return std::pair{Op([](Var x) { return sum(x); }), random_array({dim(rng, 1, 4), dim(rng, 1, 4)}, rng)};
  });
  check_op("mean", [](std::mt19937_64& rng) {
    return std::pair{Op([](Var x) { return mean(x); }), random_array({dim(rng, 1, 4), dim(rng, 1, 4)}, rng)};
  });
  check_op("sum_axis", [](std::mt19937_64& rng) {
    const Shape s{dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)};
    const std::size_t axis = dim(rng, 0, 2);
    return std::pair{Op([axis](Var x) { return sum_axis(x, axis); }), random_array(s, rng)};
  });
  check_op("avg_pool_time", [](std::mt19937_64& rng) {
    return std::pair{Op([](Var x) { return avg_pool_time(x); }),
                     random_array({dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 6)}, rng)};
  });
  check_op("conv1d_causal input", [](std::mt19937_64& rng) {
    const std::size_t b = dim(rng, 1, 2), cin = dim(rng, 1, 3), cout = dim(rng, 1, 3), t = dim(rng, 1, 9);
    const std::size_t k = dim(rng, 1, 3), dilation = std::size_t{1} << dim(rng, 0, 2);
    Array w = random_array({k, cout, cin}, rng), bias = random_array({cout}, rng);
    return std::pair{Op([=](Var x) {
                       return conv1d_causal(x, x.tape().constant(w), x.tape().constant(bias), dilation);
                     }),
                     random_array({b, cin, t}, rng)};
  });
  check_op("conv1d_causal weight", [](std::mt19937_64& rng) {
    const std::size_t b = dim(rng, 1, 2), cin = dim(rng, 1, 3), cout = dim(rng, 1, 3), t = dim(rng, 1, 9);
    const std::size_t k = dim(rng, 1, 3), dilation = std::size_t{1} << dim(rng, 0, 2);
    Array x = random_array({b, cin, t}, rng), bias = random_array({cout}, rng);
    return std::pair{Op([=](Var w) {
                       return conv1d_causal(w.tape().constant(x), w, w.tape().constant(bias), dilation);
                     }),
                     random_array({k, cout, cin}, rng)};
  });
  check_op("conv1d_causal bias", [](std::mt19937_64& rng) {
    const std::size_t cin = dim(rng, 1, 3), cout = dim(rng, 1, 3), t = dim(rng, 1, 9);
    Array x = random_array({2, cin, t}, rng), w = random_array({3, cout, cin}, rng);
    return std::pair{Op([=](Var bias) {
                       return conv1d_causal(bias.tape().constant(x), bias.tape().constant(w), bias, 2);
                     }),
                     random_array({cout}, rng)};
  });
  check_op("dropout", [](std::mt19937_64& rng) {
    const std::uint64_t seed = rng();
    return std::pair{Op([seed](Var x) {
                       std::mt19937_64 mask_rng(seed);
                       return dropout(x, 0.3, mask_rng, true);
                     }),
                     random_array({dim(rng, 1, 4), dim(rng, 1, 5)}, rng)};
  });
  check_op("batch_norm input", [](std::mt19937_64& rng) {
    Shape s{dim(rng, 2, 4), dim(rng, 1, 3)};
    if (dim(rng, 0, 1)) s.push_back(dim(rng, 1, 4));
    const std::size_t f = s[1];
    Array gamma = random_array({f}, rng, 0.5, 1.5), beta = random_array({f}, rng);
    return std::pair{Op([=](Var x) {
                       Array mean({f}), var({f}, 1.0);
                       BatchNormState state{&mean, &var};
                       return batch_norm(x, x.tape().constant(gamma), x.tape().constant(beta), state, true);
                     }),
                     random_array(s, rng)};
  });
  check_op("batch_norm scale", [](std::mt19937_64& rng) {
    const std::size_t f = dim(rng, 1, 3);
    Array x = random_array({3, f, 4}, rng), beta = random_array({f}, rng);
    return std::pair{Op([=](Var gamma) {
                       Array mean({f}), var({f}, 1.0);
                       BatchNormState state{&mean, &var};
                       return batch_norm(gamma.tape().constant(x), gamma, gamma.tape().constant(beta), state, true);
                     }),
                     random_array({f}, rng, 0.5, 1.5)};
  });
  check_op("batch_norm inference", [](std::mt19937_64& rng) {
    const std::size_t f = dim(rng, 1, 3);
    Array mean = random_array({f}, rng), var = random_array({f}, rng, 0.5, 2.0);
    return std::pair{Op([=](Var x) {
                       Array m = mean, v = var;
                       BatchNormState state{&m, &v};
                       Tape& t = x.tape();
                       return batch_norm(x, t.constant(Array({f}, 1.3)), t.constant(Array({f}, 0.1)), state, false);
                     }),
                     random_array({2, f}, rng)};
  });
  check_op("vecmat_batched vector", [](std::mt19937_64& rng) {
    const std::size_t b = dim(rng, 1, 3), l = dim(rng, 1, 4), m = dim(rng, 1, 4);
    Array k = random_array({b, l, m}, rng);
    return std::pair{Op([k](Var v) { return vecmat_batched(v, v.tape().constant(k)); }), random_array({b, l}, rng)};
  });
  check_op("vecmat_batched matrix", [](std::mt19937_64& rng) {
    const std::size_t b = dim(rng, 1, 3), l = dim(rng, 1, 4), m = dim(rng, 1, 4);
    Array v = random_array({b, l}, rng);
    return std::pair{Op([v](Var k) { return vecmat_batched(k.tape().constant(v), k); }),
                     random_array({b, l, m}, rng)};
  });
  check_op("bce_with_logits", [](std::mt19937_64& rng) {
    const std::size_t n = dim(rng, 1, 6);
    Array labels({n});
    for (double& v : labels.data()) v = static_cast<double>(dim(rng, 0, 1));
    return std::pair{Op([labels](Var x) { return bce_with_logits(x, labels); }), random_array({n}, rng, -5, 5)};
  });
  check_op("mse", [](std::mt19937_64& rng) {
    const Shape s{dim(rng, 1, 3), dim(rng, 1, 4)};
    Array target = random_array(s, rng);
    return std::pair{Op([target](Var x) { return mse(x, x.tape().constant(target)); }), random_array(s, rng)};
  });
}

TEST_CASE("dilated causal convolution is causal") {
  std::mt19937_64 rng(3);
  Array x = random_array({1, 2, 12}, rng), w = random_array({3, 2, 2}, rng), b = random_array({2}, rng);
  auto run = [&](const Array& input) {
    Tape t;
    return conv1d_causal(t.constant(input), t.constant(w), t.constant(b), 2).value();
  };
  const Array base = run(x);
  Array bumped = x;
  bumped.at(0, 1, 7) += 1.0;
  const Array moved = run(bumped);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t t = 0; t < 7; ++t) CHECK(moved.at(0, c, t) == base.at(0, c, t));
  CHECK(moved.at(0, 0, 7) != base.at(0, 0, 7));
}

TEST_CASE("bce_with_logits is stable for large logits") {
  Tape tape;
  Var loss = bce_with_logits(tape.constant(Array::vector({500, -500})), Array::vector({0, 1}));
  CHECK(std::isfinite(loss.value()[0]));
  CHECK(loss.value()[0] == doctest::Approx(500.0));
}

TEST_CASE("Adam") {
  SUBCASE("one step from zero state, scalar g = 0.5") {
    Array p = Array::scalar(1.0);
    AdamMoments m;
    adam_step(p, Array::scalar(0.5), m, 1, {});
    // m_hat = 0.5, v_hat = 0.25, step = lr * 0.5 / (0.5 + 1e-8).
    CHECK(p[0] == doctest::Approx(1.0 - 0.001 * 0.5 / (0.5 + 1e-8)).epsilon(1e-15));
  }
  SUBCASE("zero gradient leaves parameters") {
    Array p = Array::vector({1.0, -2.0});
    AdamMoments m;
    adam_step(p, Array::vector({0.0, 0.0}), m, 1, {});
    CHECK(p == Array::vector({1.0, -2.0}));
  }
  SUBCASE("constant gradient steps approach the learning rate") {
    Array p = Array::scalar(0.0);
    AdamMoments m;
    for (int s = 1; s <= 2000; ++s) {
      const double before = p[0];
      adam_step(p, Array::scalar(3.0), m, s, {});
      if (s == 2000) CHECK(before - p[0] == doctest::Approx(0.001).epsilon(1e-6));
    }
  }
  SUBCASE("store update skips buffers") {
    ParamStore store;
    store.add("w", Array::scalar(1.0)).grad = Array::scalar(1.0);
    store.add("buffer", Array::scalar(1.0), false).grad = Array::scalar(1.0);
    Adam adam;
    adam.step(store);
    CHECK(store.get("w").value[0] < 1.0);
    CHECK(store.get("buffer").value[0] == 1.0);
  }
}

TEST_CASE("parameter store JSON round trip") {
  std::mt19937_64 rng(1);
  ParamStore store;
  store.add("layer.weight", random_array({3, 2}, rng));
  store.add("layer.running_mean", Array::vector({0.1, 1e-300}), false);
  const ParamStore back = ParamStore::from_json(store.to_json());
  CHECK(back.get("layer.weight").value == store.get("layer.weight").value);
  CHECK(back.get("layer.running_mean").value == store.get("layer.running_mean").value);
  CHECK_FALSE(back.get("layer.running_mean").trainable);
  CHECK(decode_base64(encode_base64({1.5, -2.25})) == std::vector<double>{1.5, -2.25});
}

TEST_CASE("grad_check_params on a parameterized loss") {
  std::mt19937_64 rng(4);
  ParamStore store;
  store.add("w", random_array({3, 2}, rng));
  store.add("b", random_array({2}, rng));
  const Array x = random_array({4, 3}, rng);
  const auto r = grad_check_params(
      store,
      [&](Tape& t) {
        Var w = t.parameter(store.get("w"));
        Var b = t.parameter(store.get("b"));
        return mean(tanh(add_bias(matmul(t.constant(x), w), b)));
      },
      1e-6);
  CHECK(r.coordinates == 8);
  CHECK(r.max_error <= 1e-7);
}
