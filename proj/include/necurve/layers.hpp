#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "necurve/diff/ops.hpp"
#include "necurve/diff/params.hpp"

namespace necurve {

/// One forward pass: the tape, the parameter store it reads, and the mode.
/// Each parameter is bound to the tape once and reused.
class Context {
 public:
  Context(diff::Tape& tape, diff::ParamStore& params, bool training, std::mt19937_64& rng)
      : tape_(tape), params_(params), training_(training), rng_(rng) {}

  diff::Tape& tape() const noexcept { return tape_; }
  diff::ParamStore& params() const noexcept { return params_; }
  bool training() const noexcept { return training_; }
  std::mt19937_64& rng() const noexcept { return rng_; }

  diff::Var param(const std::string& name);
  diff::Var constant(diff::Array value) { return tape_.constant(std::move(value)); }

 private:
  diff::Tape& tape_;
  diff::ParamStore& params_;
  bool training_;
  std::mt19937_64& rng_;
  std::map<std::string, diff::Var> bound_;
};

class Linear {
 public:
  Linear() = default;
  Linear(diff::ParamStore& store, std::string prefix, std::size_t in, std::size_t out, std::mt19937_64& rng);

  /// [B, in] -> [B, out]
  diff::Var operator()(Context& ctx, diff::Var x) const;

  std::size_t in() const noexcept { return in_; }
  std::size_t out() const noexcept { return out_; }

 private:
  std::string prefix_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

/// Per-feature batch normalization with running statistics kept as buffers.
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(diff::ParamStore& store, std::string prefix, std::size_t features);

  diff::Var operator()(Context& ctx, diff::Var x) const;

 private:
  std::string prefix_;
};

/// Single LSTM layer with gate order (input, forget, cell, output).
class LstmLayer {
 public:
  LstmLayer() = default;
  LstmLayer(diff::ParamStore& store, std::string prefix, std::size_t in, std::size_t hidden, std::mt19937_64& rng);

  /// Consumes `steps` ([B, in] each) from zero state; returns every hidden state.
  std::vector<diff::Var> operator()(Context& ctx, const std::vector<diff::Var>& steps) const;

  std::size_t hidden() const noexcept { return hidden_; }

 private:
  std::string prefix_;
  std::size_t in_ = 0;
  std::size_t hidden_ = 0;
};

/// Stacked LSTM; the output of layer i feeds layer i + 1.
class Lstm {
 public:
  Lstm() = default;
  Lstm(diff::ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t layers,
       std::mt19937_64& rng);

  std::vector<diff::Var> operator()(Context& ctx, const std::vector<diff::Var>& steps) const;

 private:
  std::vector<LstmLayer> layers_;
};

struct TcnConfig {
  std::size_t layers = 4;
  std::size_t filters = 64;
  std::size_t kernel = 3;
  double dropout = 0.3;
};

/// Receptive field of a TCN whose layer l uses dilation 2^l.
std::size_t tcn_receptive_field(const TcnConfig& config);

/// Stack of dilated causal convolutions (dilation 2^l), each followed by ReLU,
/// batch normalization and dropout, closed by average pooling over time.
class TcnEncoder {
 public:
  TcnEncoder() = default;
  TcnEncoder(diff::ParamStore& store, std::string prefix, std::size_t in_channels, TcnConfig config,
             std::mt19937_64& rng);

  /// [B, C, T] -> per-layer activations before pooling; last entry is the top layer.
  std::vector<diff::Var> activations(Context& ctx, diff::Var x) const;
  /// [B, C, T] -> [B, filters]
  diff::Var operator()(Context& ctx, diff::Var x) const;

  const TcnConfig& config() const noexcept { return config_; }

 private:
  std::string prefix_;
  TcnConfig config_;
  std::vector<BatchNorm> norms_;
};

}  // namespace necurve
