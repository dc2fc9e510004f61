#include "necurve/layers.hpp"

#include <cmath>

#include "necurve/error.hpp"

namespace necurve {

using diff::Array;
using diff::Var;

Var Context::param(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = tape_.parameter(params_.get(name));
  bound_.emplace(name, v);
  return v;
}

Linear::Linear(diff::ParamStore& store, std::string prefix, std::size_t in, std::size_t out, std::mt19937_64& rng)
    : prefix_(std::move(prefix)), in_(in), out_(out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  store.add(prefix_ + ".weight", diff::uniform_array({in, out}, bound, rng));
  store.add(prefix_ + ".bias", diff::uniform_array({out}, bound, rng));
}

Var Linear::operator()(Context& ctx, Var x) const {
  return diff::add_bias(diff::matmul(x, ctx.param(prefix_ + ".weight")), ctx.param(prefix_ + ".bias"));
}

BatchNorm::BatchNorm(diff::ParamStore& store, std::string prefix, std::size_t features)
    : prefix_(std::move(prefix)) {
  store.add(prefix_ + ".gamma", Array({features}, 1.0));
  store.add(prefix_ + ".beta", Array({features}));
  store.add(prefix_ + ".running_mean", Array({features}), false);
  store.add(prefix_ + ".running_var", Array({features}, 1.0), false);
}

Var BatchNorm::operator()(Context& ctx, Var x) const {
  diff::BatchNormState state;
  state.running_mean = &ctx.params().get(prefix_ + ".running_mean").value;
  state.running_var = &ctx.params().get(prefix_ + ".running_var").value;
  return diff::batch_norm(x, ctx.param(prefix_ + ".gamma"), ctx.param(prefix_ + ".beta"), state, ctx.training());
}

LstmLayer::LstmLayer(diff::ParamStore& store, std::string prefix, std::size_t in, std::size_t hidden,
                     std::mt19937_64& rng)
    : prefix_(std::move(prefix)), in_(in), hidden_(hidden) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  store.add(prefix_ + ".w_input", diff::uniform_array({in, 4 * hidden}, bound, rng));
  store.add(prefix_ + ".w_hidden", diff::uniform_array({hidden, 4 * hidden}, bound, rng));
  store.add(prefix_ + ".bias", diff::uniform_array({4 * hidden}, bound, rng));
}

std::vector<Var> LstmLayer::operator()(Context& ctx, const std::vector<Var>& steps) const {
  if (steps.empty()) throw DomainError("LSTM: empty input sequence");
  const std::size_t batch = steps.front().shape()[0];
  Var w_in = ctx.param(prefix_ + ".w_input");
  Var w_h = ctx.param(prefix_ + ".w_hidden");
  Var bias = ctx.param(prefix_ + ".bias");
  Var h = ctx.constant(Array({batch, hidden_}));
  Var c = ctx.constant(Array({batch, hidden_}));
  std::vector<Var> outputs;
  outputs.reserve(steps.size());
  const std::size_t n = hidden_;
  for (const Var& x : steps) {
    Var gates = diff::add_bias(diff::add(diff::matmul(x, w_in), diff::matmul(h, w_h)), bias);
    Var i = diff::sigmoid(diff::slice(gates, 1, 0, n));
    Var f = diff::sigmoid(diff::slice(gates, 1, n, 2 * n));
    Var g = diff::tanh(diff::slice(gates, 1, 2 * n, 3 * n));
    Var o = diff::sigmoid(diff::slice(gates, 1, 3 * n, 4 * n));
    c = diff::add(diff::mul(f, c), diff::mul(i, g));
    h = diff::mul(o, diff::tanh(c));
    outputs.push_back(h);
  }
  return outputs;
}

Lstm::Lstm(diff::ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t layers,
           std::mt19937_64& rng) {
  for (std::size_t l = 0; l < layers; ++l) {
    layers_.emplace_back(store, prefix + ".layer" + std::to_string(l), l == 0 ? in : hidden, hidden, rng);
  }
}

std::vector<Var> Lstm::operator()(Context& ctx, const std::vector<Var>& steps) const {
  std::vector<Var> current = steps;
  for (const LstmLayer& layer : layers_) current = layer(ctx, current);
  return current;
}

std::size_t tcn_receptive_field(const TcnConfig& config) {
  std::size_t dilations = 0;
  for (std::size_t l = 0; l < config.layers; ++l) dilations += std::size_t{1} << l;
  return 1 + (config.kernel - 1) * dilations;
}

TcnEncoder::TcnEncoder(diff::ParamStore& store, std::string prefix, std::size_t in_channels, TcnConfig config,
                       std::mt19937_64& rng)
    : prefix_(std::move(prefix)), config_(config) {
  if (config.layers == 0 || config.filters == 0 || config.kernel == 0) {
    throw ConfigError("TCN: layers, filters and kernel must be positive");
  }
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::size_t cin = l == 0 ? in_channels : config.filters;
    const std::string name = prefix_ + ".conv" + std::to_string(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * config.kernel));
    store.add(name + ".weight", diff::uniform_array({config.kernel, config.filters, cin}, bound, rng));
    store.add(name + ".bias", diff::uniform_array({config.filters}, bound, rng));
    norms_.emplace_back(store, prefix_ + ".norm" + std::to_string(l), config.filters);
  }
}

std::vector<Var> TcnEncoder::activations(Context& ctx, Var x) const {
  std::vector<Var> out;
  Var h = x;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string name = prefix_ + ".conv" + std::to_string(l);
    h = diff::conv1d_causal(h, ctx.param(name + ".weight"), ctx.param(name + ".bias"), std::size_t{1} << l);
    h = diff::relu(h);
    h = norms_[l](ctx, h);
    h = diff::dropout(h, config_.dropout, ctx.rng(), ctx.training());
    out.push_back(h);
  }
  return out;
}

Var TcnEncoder::operator()(Context& ctx, Var x) const { return diff::avg_pool_time(activations(ctx, x).back()); }

}  // namespace necurve
