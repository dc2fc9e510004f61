#include "necurve/diff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Core>

#include "necurve/error.hpp"

namespace necurve::diff {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Tape& tape_of(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw Error("ops: operands live on different tapes");
  return a.tape();
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const char* op, Var x, std::size_t rank) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

template <class Fn>
Var unary(Var x, Fn forward, std::function<double(double x, double y)> derivative) {
  const Array& in = x.value();
  Array out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi},
                         [xi, derivative](Tape& t, std::size_t self) {
                           const Array& g = t.grad(self);
                           const Array& xv = t.value(xi);
                           const Array& yv = t.value(self);
                           Array& gx = t.grad_accumulator(xi);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * derivative(xv[i], yv[i]);
                         });
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape("add", a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    for (std::size_t p : {ai, bi}) {
      if (!t.requires_grad(p)) continue;
      Array& gp = t.grad_accumulator(p);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape("sub", a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    if (t.requires_grad(ai)) {
      Array& ga = t.grad_accumulator(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(bi)) {
      Array& gb = t.grad_accumulator(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape("mul", a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    const Array& av = t.value(ai);
    const Array& bv = t.value(bi);
    if (t.requires_grad(ai)) {
      Array& ga = t.grad_accumulator(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bi)) {
      Array& gb = t.grad_accumulator(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var div(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape("div", a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (bv[i] == 0.0) throw DomainError("div: division by zero");
    out[i] /= bv[i];
  }
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    const Array& bv = t.value(bi);
    const Array& y = t.value(self);
    if (t.requires_grad(ai)) {
      Array& ga = t.grad_accumulator(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.requires_grad(bi)) {
      Array& gb = t.grad_accumulator(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * y[i] / bv[i];
    }
  });
}

Var neg(Var x) { return scale(x, -1.0); }

Var scale(Var x, double factor) {
  return unary(x, [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Var add_scalar(Var x, double offset) {
  return unary(x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Var add_bias(Var x, Var bias) {
  Tape& tape = tape_of(x, bias);
  const Array& xv = x.value();
  const Array& bv = bias.value();
  if (bv.rank() != 1 || xv.rank() == 0 || xv.shape().back() != bv.size()) {
    throw ShapeError("add_bias: bias " + shape_str(bv.shape()) + " does not match trailing axis of " +
                     shape_str(xv.shape()));
  }
  const std::size_t f = bv.size();
  Array out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % f];
  const std::size_t xi = x.id(), bi = bias.id();
  return tape.record(std::move(out), {xi, bi}, [xi, bi, f](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    if (t.requires_grad(xi)) {
      Array& gx = t.grad_accumulator(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(bi)) {
      Array& gb = t.grad_accumulator(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % f] += g[i];
    }
  });
}

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Array out({m, n});
  MapMat(out.ptr(), m, n).noalias() = CMapMat(a.value().ptr(), m, k) * CMapMat(b.value().ptr(), k, n);
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape& t, std::size_t self) {
    CMapMat g(t.grad(self).ptr(), m, n);
    if (t.requires_grad(ai)) {
      MapMat(t.grad_accumulator(ai).ptr(), m, k).noalias() += g * CMapMat(t.value(bi).ptr(), k, n).transpose();
    }
    if (t.requires_grad(bi)) {
      MapMat(t.grad_accumulator(bi).ptr(), k, n).noalias() += CMapMat(t.value(ai).ptr(), m, k).transpose() * g;
    }
  });
}

Var transpose(Var x) {
  require_rank("transpose", x, 2);
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  Array out({c, r});
  MapMat(out.ptr(), c, r) = CMapMat(x.value().ptr(), r, c).transpose();
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, r, c](Tape& t, std::size_t self) {
    MapMat(t.grad_accumulator(xi).ptr(), r, c) += CMapMat(t.grad(self).ptr(), c, r).transpose();
  });
}

Var concat(std::span<const Var> inputs, std::size_t axis) {
  if (inputs.empty()) throw ShapeError("concat: no inputs");
  Tape& tape = inputs.front().tape();
  const Shape first = inputs.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> parents;
  std::vector<std::size_t> extents;
  for (const Var& v : inputs) {
    if (&v.tape() != &tape) throw Error("concat: inputs live on different tapes");
    const Shape s = v.shape();
    bool compatible = s.size() == first.size();
    for (std::size_t i = 0; compatible && i < s.size(); ++i) compatible = i == axis || s[i] == first[i];
    if (!compatible) throw ShapeError("concat: incompatible " + shape_str(s) + " vs " + shape_str(first));
    out_shape[axis] += s[axis];
    parents.push_back(v.id());
    extents.push_back(s[axis]);
  }
  const AxisSplit split = split_at(out_shape, axis);
  Array out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parents.size(); ++p) {
    const Array& in = tape.value(parents[p]);
    const std::size_t chunk = extents[p] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(in.ptr() + o * chunk, chunk, out.ptr() + o * split.extent * split.inner + offset);
    }
    offset += chunk;
  }
  return tape.record(std::move(out), parents, [parents, extents, split](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parents.size(); ++p) {
      const std::size_t chunk = extents[p] * split.inner;
      if (t.requires_grad(parents[p])) {
        Array& gp = t.grad_accumulator(parents[p]);
        for (std::size_t o = 0; o < split.outer; ++o) {
          const double* src = g.ptr() + o * split.extent * split.inner + offset;
          double* dst = gp.ptr() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      offset += chunk;
    }
  });
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(s));
  }
  const AxisSplit split = split_at(s, axis);
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Array out(out_shape);
  const std::size_t chunk = (end - begin) * split.inner;
  const std::size_t skip = begin * split.inner;
  const Array& in = x.value();
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(in.ptr() + o * split.extent * split.inner + skip, chunk, out.ptr() + o * chunk);
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, split, chunk, skip](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    Array& gx = t.grad_accumulator(xi);
    for (std::size_t o = 0; o < split.outer; ++o) {
      double* dst = gx.ptr() + o * split.extent * split.inner + skip;
      const double* src = g.ptr() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

Var stack(std::span<const Var> inputs, std::size_t axis) {
  if (inputs.empty()) throw ShapeError("stack: no inputs");
  const Shape first = inputs.front().shape();
  if (axis > first.size()) throw ShapeError("stack: axis out of range");
  Shape expanded = first;
  expanded.insert(expanded.begin() + static_cast<std::ptrdiff_t>(axis), 1);
  std::vector<Var> parts;
  parts.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.shape() != first) throw ShapeError("stack: inputs must share one shape");
    parts.push_back(reshape(v, expanded));
  }
  return concat(parts, axis);
}

Var reshape(Var x, Shape shape) {
  Array out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    Array& gx = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  const Array& in = x.value();
  if (in.rank() < 1) throw ShapeError("gather_rows: scalar input");
  const std::size_t n = in.shape()[0];
  const std::size_t width = n ? in.size() / n : 0;
  Shape out_shape = in.shape();
  out_shape[0] = rows.size();
  Array out(out_shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw DomainError("gather_rows: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(in.ptr() + rows[r] * width, width, out.ptr() + r * width);
  }
  const std::size_t xi = x.id();
  std::vector<std::size_t> picked(rows.begin(), rows.end());
  return x.tape().record(std::move(out), {xi}, [xi, picked, width](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    Array& gx = t.grad_accumulator(xi);
    for (std::size_t r = 0; r < picked.size(); ++r) {
      double* dst = gx.ptr() + picked[r] * width;
      const double* src = g.ptr() + r * width;
      for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
    }
  });
}

Var embedding(Var table, std::span<const std::size_t> ids) {
  require_rank("embedding", table, 2);
  return gather_rows(table, ids);
}

Var softmax_columns(Var x) {
  const Array& in = x.value();
  if (in.rank() < 2) throw ShapeError("softmax_columns: need rank >= 2, got " + shape_str(in.shape()));
  const std::size_t rows = in.shape()[in.rank() - 2];
  const std::size_t cols = in.shape()[in.rank() - 1];
  const std::size_t batch = in.size() / (rows * cols);
  Array out(in.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = in.ptr() + b * rows * cols;
    double* dst = out.ptr() + b * rows * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < rows; ++r) peak = std::max(peak, src[r * cols + c]);
      double total = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        dst[r * cols + c] = std::exp(src[r * cols + c] - peak);
        total += dst[r * cols + c];
      }
      for (std::size_t r = 0; r < rows; ++r) dst[r * cols + c] /= total;
    }
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, rows, cols, batch](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    const Array& s = t.value(self);
    Array& gx = t.grad_accumulator(xi);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = b * rows * cols;
      for (std::size_t c = 0; c < cols; ++c) {
        double dot = 0.0;
        for (std::size_t r = 0; r < rows; ++r) dot += s[base + r * cols + c] * g[base + r * cols + c];
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t i = base + r * cols + c;
          gx[i] += s[i] * (g[i] - dot);
        }
      }
    }
  });
}

Var mask_fill(Var x, const Array& keep, double fill) {
  if (keep.shape() != x.shape()) {
    throw ShapeError("mask_fill: mask " + shape_str(keep.shape()) + " vs input " + shape_str(x.shape()));
  }
  Array out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (keep[i] == 0.0) out[i] = fill;
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, keep](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    Array& gx = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (keep[i] != 0.0) gx[i] += g[i];
    }
  });
}

Var sigmoid(Var x) {
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw DomainError("log: argument must be positive");
  }
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sum(Var x) {
  const Array& in = x.value();
  const double total = std::accumulate(in.data().begin(), in.data().end(), 0.0);
  const std::size_t xi = x.id();
  return x.tape().record(Array::scalar(total), {xi}, [xi](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Array& gx = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean: empty input");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var sum_axis(Var x, std::size_t axis) {
  const Shape s = x.shape();
  if (axis >= s.size()) throw ShapeError("sum_axis: axis out of range for " + shape_str(s));
  const AxisSplit split = split_at(s, axis);
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  Array out(out_shape);
  const Array& in = x.value();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t e = 0; e < split.extent; ++e) {
      const double* src = in.ptr() + (o * split.extent + e) * split.inner;
      double* dst = out.ptr() + o * split.inner;
      for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
    }
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, split](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    Array& gx = t.grad_accumulator(xi);
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (std::size_t e = 0; e < split.extent; ++e) {
        double* dst = gx.ptr() + (o * split.extent + e) * split.inner;
        const double* src = g.ptr() + o * split.inner;
        for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Var avg_pool_time(Var x) {
  require_rank("avg_pool_time", x, 3);
  const std::size_t steps = x.shape()[2];
  return scale(sum_axis(x, 2), 1.0 / static_cast<double>(steps));
}

Var conv1d_causal(Var x, Var weight, Var bias, std::size_t dilation) {
  Tape& tape = tape_of(x, weight);
  tape_of(x, bias);
  require_rank("conv1d_causal", x, 3);
  require_rank("conv1d_causal weight", weight, 3);
  require_rank("conv1d_causal bias", bias, 1);
  const std::size_t batch = x.shape()[0], cin = x.shape()[1], steps = x.shape()[2];
  const std::size_t taps = weight.shape()[0], cout = weight.shape()[1];
  if (weight.shape()[2] != cin || bias.shape()[0] != cout) {
    throw ShapeError("conv1d_causal: weight " + shape_str(weight.shape()) + " / bias " +
                     shape_str(bias.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  if (dilation == 0) throw DomainError("conv1d_causal: dilation must be positive");
  Array out({batch, cout, steps});
  const Array& xv = x.value();
  const Array& wv = weight.value();
  Eigen::Map<const Eigen::VectorXd> bv(bias.value().ptr(), static_cast<Eigen::Index>(cout));
  for (std::size_t b = 0; b < batch; ++b) {
    CMapMat in(xv.ptr() + b * cin * steps, cin, steps);
    MapMat o(out.ptr() + b * cout * steps, cout, steps);
    o.colwise() = bv;
    for (std::size_t i = 0; i < taps; ++i) {
      const std::size_t lag = dilation * i;
      if (lag >= steps) break;
      const auto span = static_cast<Eigen::Index>(steps - lag);
      CMapMat w(wv.ptr() + i * cout * cin, cout, cin);
      o.rightCols(span).noalias() += w * in.leftCols(span);
    }
  }
  const std::size_t xi = x.id(), wi = weight.id(), bi = bias.id();
  return tape.record(
      std::move(out), {xi, wi, bi},
      [xi, wi, bi, batch, cin, cout, steps, taps, dilation](Tape& t, std::size_t self) {
        const Array& g = t.grad(self);
        const bool need_x = t.requires_grad(xi), need_w = t.requires_grad(wi), need_b = t.requires_grad(bi);
        const Array& xv = t.value(xi);
        const Array& wv = t.value(wi);
        for (std::size_t b = 0; b < batch; ++b) {
          CMapMat go(g.ptr() + b * cout * steps, cout, steps);
          if (need_b) {
            Eigen::Map<Eigen::VectorXd> gb(t.grad_accumulator(bi).ptr(), static_cast<Eigen::Index>(cout));
            gb += go.rowwise().sum();
          }
          for (std::size_t i = 0; i < taps; ++i) {
            const std::size_t lag = dilation * i;
            if (lag >= steps) break;
            const auto span = static_cast<Eigen::Index>(steps - lag);
            if (need_x) {
              MapMat gx(t.grad_accumulator(xi).ptr() + b * cin * steps, cin, steps);
              gx.leftCols(span).noalias() +=
                  CMapMat(wv.ptr() + i * cout * cin, cout, cin).transpose() * go.rightCols(span);
            }
            if (need_w) {
              MapMat gw(t.grad_accumulator(wi).ptr() + i * cout * cin, cout, cin);
              gw.noalias() += go.rightCols(span) *
                              CMapMat(xv.ptr() + b * cin * steps, cin, steps).leftCols(span).transpose();
            }
          }
        }
      });
}

Var dropout(Var x, double rate, std::mt19937_64& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  const Array& in = x.value();
  Array keep(in.shape());
  std::bernoulli_distribution coin(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = coin(rng) ? inv : 0.0;
  Array out = in;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= keep[i];
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, keep = std::move(keep)](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    Array& gx = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * keep[i];
  });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormState state, bool training) {
  Tape& tape = tape_of(x, gamma);
  tape_of(x, beta);
  const Array& xv = x.value();
  if (xv.rank() != 2 && xv.rank() != 3) throw ShapeError("batch_norm: need [B, F] or [B, F, T] input");
  const std::size_t batch = xv.shape()[0], features = xv.shape()[1];
  const std::size_t steps = xv.rank() == 3 ? xv.shape()[2] : 1;
  if (gamma.value().size() != features || beta.value().size() != features) {
    throw ShapeError("batch_norm: affine parameters must have " + std::to_string(features) + " entries");
  }
  const double count = static_cast<double>(batch * steps);
  std::vector<double> mu(features, 0.0), inv_std(features, 0.0);
  if (training) {
    if (batch * steps == 0) throw ShapeError("batch_norm: empty batch");
    std::vector<double> var(features, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < features; ++f)
        for (std::size_t s = 0; s < steps; ++s) mu[f] += xv[(b * features + f) * steps + s];
    for (double& m : mu) m /= count;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < features; ++f)
        for (std::size_t s = 0; s < steps; ++s) {
          const double d = xv[(b * features + f) * steps + s] - mu[f];
          var[f] += d * d;
        }
    for (std::size_t f = 0; f < features; ++f) {
      var[f] /= count;
      inv_std[f] = 1.0 / std::sqrt(var[f] + state.eps);
    }
    if (state.running_mean != nullptr && state.running_var != nullptr) {
      const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
      for (std::size_t f = 0; f < features; ++f) {
        (*state.running_mean)[f] = (1.0 - state.momentum) * (*state.running_mean)[f] + state.momentum * mu[f];
        (*state.running_var)[f] =
            (1.0 - state.momentum) * (*state.running_var)[f] + state.momentum * var[f] * unbias;
      }
    }
  } else {
    if (state.running_mean == nullptr || state.running_var == nullptr) {
      throw Error("batch_norm: inference mode needs running statistics");
    }
    for (std::size_t f = 0; f < features; ++f) {
      mu[f] = (*state.running_mean)[f];
      inv_std[f] = 1.0 / std::sqrt((*state.running_var)[f] + state.eps);
    }
  }
  Array xhat(xv.shape());
  Array out(xv.shape());
  const Array& gv = gamma.value();
  const Array& bv = beta.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t f = 0; f < features; ++f)
      for (std::size_t s = 0; s < steps; ++s) {
        const std::size_t i = (b * features + f) * steps + s;
        xhat[i] = (xv[i] - mu[f]) * inv_std[f];
        out[i] = gv[f] * xhat[i] + bv[f];
      }
  const std::size_t xi = x.id(), gi = gamma.id(), bi = beta.id();
  return tape.record(
      std::move(out), {xi, gi, bi},
      [xi, gi, bi, batch, features, steps, count, training, inv_std, xhat = std::move(xhat)](
          Tape& t, std::size_t self) {
        const Array& g = t.grad(self);
        const Array& gv = t.value(gi);
        std::vector<double> sum_g(features, 0.0), sum_gx(features, 0.0);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t f = 0; f < features; ++f)
            for (std::size_t s = 0; s < steps; ++s) {
              const std::size_t i = (b * features + f) * steps + s;
              sum_g[f] += g[i];
              sum_gx[f] += g[i] * xhat[i];
            }
        if (t.requires_grad(gi)) {
          Array& gg = t.grad_accumulator(gi);
          for (std::size_t f = 0; f < features; ++f) gg[f] += sum_gx[f];
        }
        if (t.requires_grad(bi)) {
          Array& gb = t.grad_accumulator(bi);
          for (std::size_t f = 0; f < features; ++f) gb[f] += sum_g[f];
        }
        if (!t.requires_grad(xi)) return;
        Array& gx = t.grad_accumulator(xi);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t f = 0; f < features; ++f)
            for (std::size_t s = 0; s < steps; ++s) {
              const std::size_t i = (b * features + f) * steps + s;
              if (training) {
                // d xhat = g * gamma; sums over the batch scale with gamma too.
                gx[i] += gv[f] * inv_std[f] / count *
                         (count * g[i] - sum_g[f] - xhat[i] * sum_gx[f]);
              } else {
                gx[i] += g[i] * gv[f] * inv_std[f];
              }
            }
      });
}

Var vecmat_batched(Var v, Var k) {
  Tape& tape = tape_of(v, k);
  require_rank("vecmat_batched", v, 2);
  require_rank("vecmat_batched", k, 3);
  const std::size_t batch = v.shape()[0], len = v.shape()[1], cols = k.shape()[2];
  if (k.shape()[0] != batch || k.shape()[1] != len) {
    throw ShapeError("vecmat_batched: " + shape_str(v.shape()) + " vs " + shape_str(k.shape()));
  }
  Array out({batch, cols});
  const Array& vv = v.value();
  const Array& kv = k.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < len; ++l) {
      const double w = vv[b * len + l];
      const double* row = kv.ptr() + (b * len + l) * cols;
      double* dst = out.ptr() + b * cols;
      for (std::size_t m = 0; m < cols; ++m) dst[m] += w * row[m];
    }
  const std::size_t vi = v.id(), ki = k.id();
  return tape.record(std::move(out), {vi, ki}, [vi, ki, batch, len, cols](Tape& t, std::size_t self) {
    const Array& g = t.grad(self);
    const Array& vv = t.value(vi);
    const Array& kv = t.value(ki);
    const bool need_v = t.requires_grad(vi), need_k = t.requires_grad(ki);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t l = 0; l < len; ++l) {
        const double* gr = g.ptr() + b * cols;
        if (need_v) {
          const double* row = kv.ptr() + (b * len + l) * cols;
          double acc = 0.0;
          for (std::size_t m = 0; m < cols; ++m) acc += gr[m] * row[m];
          t.grad_accumulator(vi)[b * len + l] += acc;
        }
        if (need_k) {
          double* dst = t.grad_accumulator(ki).ptr() + (b * len + l) * cols;
          const double w = vv[b * len + l];
          for (std::size_t m = 0; m < cols; ++m) dst[m] += w * gr[m];
        }
      }
  });
}

Var bce_with_logits(Var logits, const Array& labels) {
  const Array& z = logits.value();
  if (z.size() != labels.size() || z.size() == 0) {
    throw ShapeError("bce_with_logits: " + std::to_string(z.size()) + " logits vs " +
                     std::to_string(labels.size()) + " labels");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double v = z[i];
    total += std::max(v, 0.0) - v * labels[i] + std::log1p(std::exp(-std::abs(v)));
  }
  const double n = static_cast<double>(z.size());
  const std::size_t zi = logits.id();
  return logits.tape().record(Array::scalar(total / n), {zi}, [zi, labels, n](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const Array& z = t.value(zi);
    Array& gz = t.grad_accumulator(zi);
    for (std::size_t i = 0; i < z.size(); ++i) gz[i] += g * (stable_sigmoid(z[i]) - labels[i]) / n;
  });
}

Var mse(Var prediction, Var target) {
  const Var d = sub(prediction, target);
  return mean(mul(d, d));
}

}  // namespace necurve::diff
