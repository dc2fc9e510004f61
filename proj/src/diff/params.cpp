#include "necurve/diff/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "necurve/error.hpp"

namespace necurve::diff {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes little-endian doubles");

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int decode_char(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

}  // namespace

std::string encode_base64(const std::vector<double>& values) {
  std::vector<unsigned char> bytes(values.size() * sizeof(double));
  if (!bytes.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    const std::uint32_t b0 = bytes[i];
    const std::uint32_t b1 = i + 1 < bytes.size() ? bytes[i + 1] : 0;
    const std::uint32_t b2 = i + 2 < bytes.size() ? bytes[i + 2] : 0;
    const std::uint32_t triple = (b0 << 16) | (b1 << 8) | b2;
    out.push_back(kAlphabet[(triple >> 18) & 63]);
    out.push_back(kAlphabet[(triple >> 12) & 63]);
    out.push_back(i + 1 < bytes.size() ? kAlphabet[(triple >> 6) & 63] : '=');
    out.push_back(i + 2 < bytes.size() ? kAlphabet[triple & 63] : '=');
  }
  return out;
}

std::vector<double> decode_base64(const std::string& text) {
  if (text.size() % 4 != 0) throw ConfigError("base64: length is not a multiple of 4");
  std::vector<unsigned char> bytes;
  bytes.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    std::uint32_t triple = 0;
    int pad = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const char c = text[i + k];
      int v = 0;
      if (c == '=') {
        ++pad;
      } else {
        v = decode_char(c);
        if (v < 0 || pad > 0) throw ConfigError("base64: invalid character");
      }
      triple = (triple << 6) | static_cast<std::uint32_t>(v);
    }
    bytes.push_back(static_cast<unsigned char>((triple >> 16) & 0xFF));
    if (pad < 2) bytes.push_back(static_cast<unsigned char>((triple >> 8) & 0xFF));
    if (pad < 1) bytes.push_back(static_cast<unsigned char>(triple & 0xFF));
  }
  if (bytes.size() % sizeof(double) != 0) throw ConfigError("base64: payload is not a whole number of doubles");
  std::vector<double> values(bytes.size() / sizeof(double));
  if (!values.empty()) std::memcpy(values.data(), bytes.data(), bytes.size());
  return values;
}

Array uniform_array(Shape shape, double bound, std::mt19937_64& rng) {
  Array out(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dist(rng);
  return out;
}

Parameter& ParamStore::add(const std::string& name, Array init, bool trainable) {
  if (params_.count(name)) throw ConfigError("ParamStore: duplicate parameter '" + name + "'");
  Parameter p;
  p.grad = Array(init.shape());
  p.value = std::move(init);
  p.trainable = trainable;
  return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("ParamStore: unknown parameter '" + name + "'");
  return it->second;
}

const Parameter& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("ParamStore: unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : params_) {
    if (p.grad.shape() != p.value.shape()) p.grad = Array(p.value.shape());
    p.grad.fill(0.0);
  }
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) {
    if (p.trainable) n += p.value.size();
  }
  return n;
}

nlohmann::json ParamStore::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, p] : params_) {
    j[name] = {{"shape", p.value.shape()}, {"trainable", p.trainable}, {"data", encode_base64(p.value.values())}};
  }
  return j;
}

ParamStore ParamStore::from_json(const nlohmann::json& j) {
  ParamStore store;
  for (const auto& [name, entry] : j.items()) {
    Shape shape = entry.at("shape").get<Shape>();
    store.add(name, Array(std::move(shape), decode_base64(entry.at("data").get<std::string>())),
              entry.value("trainable", true));
  }
  return store;
}

void adam_step(Array& param, const Array& grad, AdamMoments& moments, std::int64_t step,
               const AdamConfig& config) {
  if (grad.shape() != param.shape()) {
    throw ShapeError("adam_step: gradient " + shape_str(grad.shape()) + " vs parameter " +
                     shape_str(param.shape()));
  }
  if (step < 1) throw DomainError("adam_step: step count must be >= 1");
  if (moments.first.shape() != param.shape()) moments.first = Array(param.shape());
  if (moments.second.shape() != param.shape()) moments.second = Array(param.shape());
  const double correction1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double correction2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    moments.first[i] = config.beta1 * moments.first[i] + (1.0 - config.beta1) * g;
    moments.second[i] = config.beta2 * moments.second[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = moments.first[i] / correction1;
    const double v_hat = moments.second[i] / correction2;
    param[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
  }
}

void Adam::step(ParamStore& store) {
  ++steps_;
  for (auto& [name, p] : store.all()) {
    if (!p.trainable) continue;
    if (p.grad.shape() != p.value.shape()) p.grad = Array(p.value.shape());
    adam_step(p.value, p.grad, moments_[name], steps_, config_);
  }
}

}  // namespace necurve::diff
