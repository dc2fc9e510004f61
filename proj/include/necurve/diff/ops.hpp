#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "necurve/diff/tape.hpp"

// Differentiable operator inventory. Every op reads its inputs' values,
// records the result on the inputs' tape and registers an exact backward rule.
// Shape mismatches raise ShapeError; log/div domain violations raise
// DomainError.
namespace necurve::diff {

// Elementwise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var x);

Var scale(Var x, double factor);
Var add_scalar(Var x, double offset);
/// x[..., f] + bias[f].
Var add_bias(Var x, Var bias);

Var matmul(Var a, Var b);
Var transpose(Var x);

Var concat(std::span<const Var> inputs, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
/// Joins equal-shaped inputs along a new axis.
Var stack(std::span<const Var> inputs, std::size_t axis);
Var reshape(Var x, Shape shape);

/// Rows of `x` (axis 0) picked by `rows`; backward scatters into the picked rows.
Var gather_rows(Var x, std::span<const std::size_t> rows);
/// Embedding lookup, a gather over the table rows.
Var embedding(Var table, std::span<const std::size_t> ids);

/// Softmax along axis rank-2, i.e. down each column of every trailing matrix.
Var softmax_columns(Var x);
/// Entries where `keep` is 0 are replaced by `fill` and receive no gradient.
Var mask_fill(Var x, const Array& keep, double fill);

Var sigmoid(Var x);
Var tanh(Var x);
Var relu(Var x);
Var exp(Var x);
Var log(Var x);

Var sum(Var x);
Var mean(Var x);
Var sum_axis(Var x, std::size_t axis);

/// [B, C, T] -> [B, C] mean over time.
Var avg_pool_time(Var x);

/// Dilated causal convolution. x: [B, Cin, T], weight: [K, Cout, Cin] where tap
/// i looks back dilation * i steps, bias: [Cout]. Inputs before t = 1 are 0.
Var conv1d_causal(Var x, Var weight, Var bias, std::size_t dilation);

/// Inverted dropout with a stored keep mask. Identity when `training` is false.
Var dropout(Var x, double rate, std::mt19937_64& rng, bool training);

struct BatchNormState {
  Array* running_mean = nullptr;
  Array* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-feature normalization along axis 1 of a [B, F] or [B, F, T] input.
/// Training mode normalizes with batch statistics and updates the running
/// estimates; inference mode applies the running estimates.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormState state, bool training);

/// out[b, m] = sum_l v[b, l] * k[b, l, m].
Var vecmat_batched(Var v, Var k);

/// Mean binary cross-entropy of logits against 0/1 labels, stable for large |logit|.
Var bce_with_logits(Var logits, const Array& labels);
/// Mean squared error.
Var mse(Var prediction, Var target);

}  // namespace necurve::diff
