#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "necurve/diff/tape.hpp"

namespace necurve::diff {

/// Named parameters and buffers, iterated in name order.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Array init, bool trainable = true);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  std::map<std::string, Parameter>& all() noexcept { return params_; }
  const std::map<std::string, Parameter>& all() const noexcept { return params_; }

  void zero_grad();
  std::size_t trainable_count() const;

  /// Flat map name -> {shape, trainable, data(base64 of little-endian doubles)}.
  nlohmann::json to_json() const;
  static ParamStore from_json(const nlohmann::json& j);

 private:
  std::map<std::string, Parameter> params_;
};

std::string encode_base64(const std::vector<double>& values);
std::vector<double> decode_base64(const std::string& text);

/// Uniform(-bound, bound) initialization.
Array uniform_array(Shape shape, double bound, std::mt19937_64& rng);

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamMoments {
  Array first;
  Array second;
};

/// One bias-corrected Adam update of a single tensor. `step` is the 1-based
/// update count after this step.
void adam_step(Array& param, const Array& grad, AdamMoments& moments, std::int64_t step,
               const AdamConfig& config);

/// Adam over every trainable entry of a ParamStore.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(ParamStore& store);
  std::int64_t steps() const noexcept { return steps_; }
  const AdamConfig& config() const noexcept { return config_; }

 private:
  AdamConfig config_;
  std::int64_t steps_ = 0;
  std::map<std::string, AdamMoments> moments_;
};

}  // namespace necurve::diff
