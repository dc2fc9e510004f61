#include "necurve/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "necurve/error.hpp"

namespace necurve {

namespace {

constexpr double kLateStart = 0.5;
constexpr double kMaxLateSlope = 0.4;
constexpr std::size_t kCalibrationGrid = 2000;

struct StreamParts {
  std::vector<double> base;
  std::vector<double> ramp;
  std::vector<double> normalizer;
  std::vector<double> ctr_prefix;
};

StreamParts draw_parts(const CurveParams& p, const GeneratorConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(-config.noise, config.noise);
  std::normal_distribution<double> step(0.0, 0.01 * config.ctr_drift);
  StreamParts parts;
  const std::size_t n_total = p.examples;
  parts.base.resize(n_total);
  parts.ramp.resize(n_total);
  parts.normalizer.resize(n_total);
  parts.ctr_prefix.resize(n_total);
  double ctr = p.base_ctr;
  double ctr_sum = 0.0;
  for (std::size_t i = 0; i < n_total; ++i) {
    const double n = static_cast<double>(i + 1);
    const double progress = n / static_cast<double>(n_total);
    parts.base[i] = p.asymptote + p.amplitude * std::pow(1.0 + n / p.tau, -p.decay) +
                    p.wiggle * std::sin(p.omega * n + p.phase) + noise(rng);
    parts.ramp[i] = std::max(0.0, (progress - p.late_start) / (1.0 - p.late_start));
    if (config.ctr_drift > 0.0 && i > 0) {
      ctr += step(rng);
      // Reflect into (0.01, 0.5).
      if (ctr < 0.01) ctr = 0.02 - ctr;
      if (ctr > 0.5) ctr = 1.0 - ctr;
      ctr = std::clamp(ctr, 0.0101, 0.4999);
    }
    parts.normalizer[i] = log_loss(ctr, ctr);
    ctr_sum += ctr;
    parts.ctr_prefix[i] = ctr_sum / n;
  }
  if (config.ctr_drift == 0.0) std::fill(parts.ctr_prefix.begin(), parts.ctr_prefix.end(), p.base_ctr);
  return parts;
}

LossStream assemble(const StreamParts& parts, double late_slope) {
  std::vector<double> losses(parts.base.size());
  for (std::size_t i = 0; i < losses.size(); ++i) {
    losses[i] = std::max(0.0, parts.base[i] + late_slope * parts.ramp[i]) * parts.normalizer[i];
  }
  return LossStream::from_losses(std::move(losses), parts.ctr_prefix);
}

LossStream ramp_stream(const StreamParts& parts) {
  std::vector<double> losses(parts.ramp.size());
  for (std::size_t i = 0; i < losses.size(); ++i) losses[i] = parts.ramp[i] * parts.normalizer[i];
  return LossStream::from_losses(std::move(losses), parts.ctr_prefix);
}

struct PlannedModel {
  std::size_t job = 0;
  std::size_t index = 0;
  CurveParams params;
  double slope_direction = 0.0;
  std::vector<double> hyperparameters;
  std::uint64_t stream_seed = 0;
};

struct PlannedJob {
  std::string job_id;
  std::string domain_id;
  std::vector<std::vector<double>> architecture;
  std::size_t raw_points = 0;
};

std::string padded(std::size_t v) {
  std::ostringstream out;
  out.width(3);
  out.fill('0');
  out << v;
  return out.str();
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(seed) ^ a) ^ (b * 0xD6E8FEB86659FD93ULL));
}

GeneratorConfig GeneratorConfig::production_scale() {
  GeneratorConfig c;
  c.jobs = 79;
  c.models_per_job = 60;
  c.domains = 28;
  return c;
}

void GeneratorConfig::validate() const {
  if (jobs == 0 || models_per_job == 0) throw ConfigError("generator: jobs and models_per_job must be positive");
  if (!(curve_length_mean > 0.0) || !(curve_length_sd >= 0.0)) {
    throw ConfigError("generator: curve length distribution must have positive mean");
  }
  if (max_curve_length == 0 || examples_per_checkpoint == 0 || resample_length < 2 || min_points < 2) {
    throw ConfigError("generator: lengths must be positive (resample_length and min_points >= 2)");
  }
  if (!(inconsistency_target >= 0.0 && inconsistency_target <= 0.5)) {
    throw ConfigError("generator: inconsistency_target must lie in [0, 0.5]");
  }
  if (!(ctr_drift >= 0.0)) throw ConfigError("generator: ctr_drift must be >= 0");
  if (!(noise >= 0.0 && noise <= 0.3)) throw ConfigError("generator: noise must lie in [0, 0.3]");
  if (hyper_dim < 5) throw ConfigError("generator: hyper_dim must be >= 5 (slots 0-4 drive the curve)");
  if (arch_layers == 0 || arch_features == 0 || domains == 0) {
    throw ConfigError("generator: architecture and domain counts must be positive");
  }
}

std::size_t GeneratorConfig::resolved_day_window() const {
  if (day_window > 0) return day_window;
  const double span = curve_length_mean * static_cast<double>(examples_per_checkpoint);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.2 * span)));
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = nlohmann::json{{"jobs", c.jobs},
                     {"models_per_job", c.models_per_job},
                     {"curve_length_mean", c.curve_length_mean},
                     {"curve_length_sd", c.curve_length_sd},
                     {"max_curve_length", c.max_curve_length},
                     {"examples_per_checkpoint", c.examples_per_checkpoint},
                     {"day_window", c.day_window},
                     {"inconsistency_target", c.inconsistency_target},
                     {"ctr_drift", c.ctr_drift},
                     {"noise", c.noise},
                     {"hyper_dim", c.hyper_dim},
                     {"arch_layers", c.arch_layers},
                     {"arch_features", c.arch_features},
                     {"domains", c.domains},
                     {"min_points", c.min_points},
                     {"resample_length", c.resample_length},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  const GeneratorConfig d;
  c.jobs = j.value("jobs", d.jobs);
  c.models_per_job = j.value("models_per_job", d.models_per_job);
  c.curve_length_mean = j.value("curve_length_mean", d.curve_length_mean);
  c.curve_length_sd = j.value("curve_length_sd", d.curve_length_sd);
  c.max_curve_length = j.value("max_curve_length", d.max_curve_length);
  c.examples_per_checkpoint = j.value("examples_per_checkpoint", d.examples_per_checkpoint);
  c.day_window = j.value("day_window", d.day_window);
  c.inconsistency_target = j.value("inconsistency_target", d.inconsistency_target);
  c.ctr_drift = j.value("ctr_drift", d.ctr_drift);
  c.noise = j.value("noise", d.noise);
  c.hyper_dim = j.value("hyper_dim", d.hyper_dim);
  c.arch_layers = j.value("arch_layers", d.arch_layers);
  c.arch_features = j.value("arch_features", d.arch_features);
  c.domains = j.value("domains", d.domains);
  c.min_points = j.value("min_points", d.min_points);
  c.resample_length = j.value("resample_length", d.resample_length);
  c.seed = j.value("seed", d.seed);
}

void CurveParams::validate() const {
  const bool ok = examples >= 1 && asymptote > 0.0 && amplitude >= 0.0 && decay >= 0.0 && tau > 0.0 &&
                  wiggle >= 0.0 && late_start >= 0.0 && late_start < 1.0 && base_ctr > 0.0 && base_ctr < 1.0 &&
                  asymptote - wiggle - std::abs(late_slope) > 0.0;
  if (!ok) throw GenerationError("curve parameters out of range (expected losses must stay positive)");
}

LossStream generate_stream(const CurveParams& params, const GeneratorConfig& config, std::uint64_t seed) {
  params.validate();
  if (params.asymptote - params.wiggle - std::abs(params.late_slope) - config.noise <= 0.0) {
    throw GenerationError("curve parameters allow negative per-example losses at this noise level");
  }
  return assemble(draw_parts(params, config, seed), params.late_slope);
}

void to_json(nlohmann::json& j, const ModelRecord& r) {
  CurveRecord base{r.job_id, r.model_id, r.curve, false, std::nullopt, std::nullopt};
  to_json(j, base);
  j["hyperparameters"] = r.hyperparameters;
  j["architecture"] = r.architecture;
  j["domain_id"] = r.domain_id;
  j["final_wne"] = r.final_wne;
  j["final_lne"] = r.final_lne;
  j["raw_points"] = r.raw_points;
  j["examples"] = r.examples;
  j["day_window"] = r.day_window;
}

void from_json(const nlohmann::json& j, ModelRecord& r) {
  CurveRecord base;
  from_json(j, base);
  r.job_id = std::move(base.job_id);
  r.model_id = std::move(base.model_id);
  r.curve = std::move(base.curve);
  j.at("hyperparameters").get_to(r.hyperparameters);
  j.at("architecture").get_to(r.architecture);
  j.at("domain_id").get_to(r.domain_id);
  r.final_wne = j.contains("final_wne") && !j.at("final_wne").is_null() ? j.at("final_wne").get<double>()
                                                                         : std::nan("");
  r.final_lne = j.contains("final_lne") && !j.at("final_lne").is_null() ? j.at("final_lne").get<double>()
                                                                         : std::nan("");
  r.raw_points = j.value("raw_points", std::size_t{0});
  r.examples = j.value("examples", std::size_t{0});
  r.day_window = j.value("day_window", std::size_t{0});
}

std::vector<ModelRecord> generate_dataset(const GeneratorConfig& config) {
  config.validate();
  const std::size_t day = config.resolved_day_window();
  const double sigma2 = std::log(1.0 + std::pow(config.curve_length_sd / config.curve_length_mean, 2));
  const double mu = std::log(config.curve_length_mean) - 0.5 * sigma2;

  std::vector<PlannedJob> jobs;
  std::vector<PlannedModel> models;
  for (std::size_t j = 0; j < config.jobs; ++j) {
    std::mt19937_64 rng(mix_seed(config.seed, j, 0));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::lognormal_distribution<double> length(mu, std::sqrt(sigma2));
    PlannedJob job;
    job.job_id = "job" + padded(j);
    const std::size_t domain = static_cast<std::size_t>(unit(rng) * static_cast<double>(config.domains)) % config.domains;
    job.domain_id = "domain" + padded(domain);
    job.raw_points = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(length(rng))), 1,
                                             config.max_curve_length);
    const std::size_t examples = job.raw_points * config.examples_per_checkpoint;
    for (std::size_t l = 0; l < config.arch_layers; ++l) {
      std::vector<double> row;
      for (std::size_t f = 0; f < config.arch_features; ++f) {
        row.push_back(std::pow(2.0, 4 + std::floor(unit(rng) * 7.0)));
      }
      job.architecture.push_back(std::move(row));
    }
    const double job_asymptote = 0.75 + 0.15 * unit(rng);
    const double job_amplitude = 0.15 + 0.15 * unit(rng);
    const double job_decay = 0.6 + 0.08 * static_cast<double>(domain % 5) + 0.3 * unit(rng);
    const double base_ctr = 0.02 + 0.18 * unit(rng);
    jobs.push_back(job);
    if (job.raw_points < config.min_points) continue;

    for (std::size_t m = 0; m < config.models_per_job; ++m) {
      std::mt19937_64 mrng(mix_seed(config.seed, j, m + 1));
      std::uniform_real_distribution<double> sym(-1.0, 1.0);
      std::normal_distribution<double> gauss(0.0, 1.0);
      PlannedModel pm;
      pm.job = j;
      pm.index = m;
      pm.hyperparameters.resize(config.hyper_dim);
      for (double& h : pm.hyperparameters) h = sym(mrng);
      const auto& h = pm.hyperparameters;
      CurveParams& p = pm.params;
      p.examples = examples;
      p.asymptote = job_asymptote + 0.01 * h[1] + 0.005 * gauss(mrng);
      p.amplitude = job_amplitude * (1.0 + 0.25 * h[2]);
      p.decay = job_decay * std::exp(0.25 * h[0]);
      p.tau = static_cast<double>(examples) / 50.0;
      p.wiggle = 0.002 * (1.0 + h[4]);
      p.omega = 2.0 * std::numbers::pi * (2.0 + 4.0 * unit(mrng)) / static_cast<double>(examples);
      p.phase = 2.0 * std::numbers::pi * unit(mrng);
      p.late_start = kLateStart;
      p.base_ctr = base_ctr;
      pm.slope_direction = 0.6 * h[3] + 0.4 * h[0] + 0.25 * gauss(mrng);
      pm.stream_seed = mix_seed(config.seed, j, (m + 1) << 20);
      models.push_back(std::move(pm));
    }
  }

  // Final LNE and WNE are affine in the late slope, so calibrate on the
  // coefficients before drawing the final streams.
  struct Coefficients {
    double lne0, lne1, wne0, wne1;
  };
  std::vector<Coefficients> coef(models.size());
  double max_direction = 1e-12;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const StreamParts parts = draw_parts(models[i].params, config, models[i].stream_seed);
    const LossStream base = assemble(parts, 0.0);
    const LossStream ramp = ramp_stream(parts);
    const std::size_t n = base.size();
    const WindowSpec window{n, std::min(day, n)};
    coef[i] = {normalized_entropy(base, 1, n), normalized_entropy(ramp, 1, n), wne_direct(base, window),
               wne_direct(ramp, window)};
    max_direction = std::max(max_direction, std::abs(models[i].slope_direction));
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < models.size(); ++a)
    for (std::size_t b = a + 1; b < models.size() && models[b].job == models[a].job; ++b) pairs.emplace_back(a, b);

  const double max_scale = (kMaxLateSlope - 1e-9) / max_direction;
  double best_scale = 0.0;
  double best_gap = std::numeric_limits<double>::infinity();
  for (std::size_t g = 0; g <= kCalibrationGrid && !pairs.empty(); ++g) {
    const double s = max_scale * static_cast<double>(g) / static_cast<double>(kCalibrationGrid);
    std::size_t disagree = 0;
    for (auto [a, b] : pairs) {
      const double la = coef[a].lne0 + s * models[a].slope_direction * coef[a].lne1;
      const double lb = coef[b].lne0 + s * models[b].slope_direction * coef[b].lne1;
      const double wa = coef[a].wne0 + s * models[a].slope_direction * coef[a].wne1;
      const double wb = coef[b].wne0 + s * models[b].slope_direction * coef[b].wne1;
      disagree += (la < lb) != (wa < wb);
    }
    const double gap =
        std::abs(static_cast<double>(disagree) / static_cast<double>(pairs.size()) - config.inconsistency_target);
    if (gap < best_gap) {
      best_gap = gap;
      best_scale = s;
    }
  }

  std::vector<ModelRecord> records;
  records.reserve(models.size());
  for (const PlannedModel& pm : models) {
    const PlannedJob& job = jobs[pm.job];
    CurveParams params = pm.params;
    params.late_slope = best_scale * pm.slope_direction;
    const LossStream stream = assemble(draw_parts(params, config, pm.stream_seed), params.late_slope);
    std::vector<std::size_t> checkpoints(job.raw_points);
    for (std::size_t k = 0; k < job.raw_points; ++k) checkpoints[k] = (k + 1) * config.examples_per_checkpoint;
    const LearningCurve raw = lne_curve(stream, checkpoints);

    ModelRecord r;
    r.job_id = job.job_id;
    r.model_id = job.job_id + "-m" + padded(pm.index);
    r.curve = resample_curve(raw, config.resample_length);
    r.hyperparameters = pm.hyperparameters;
    r.architecture = job.architecture;
    r.domain_id = job.domain_id;
    r.final_lne = raw.values.back();
    r.day_window = std::min(day, stream.size());
    r.final_wne = wne_direct(stream, {stream.size(), r.day_window});
    r.raw_points = job.raw_points;
    r.examples = stream.size();
    records.push_back(std::move(r));
  }
  return records;
}

double inconsistency_rate(const std::vector<ModelRecord>& records) {
  std::size_t total = 0, disagree = 0;
  for (const CurvePair& p : pair_and_label(records, PairOrdering::kCanonical)) {
    const ModelRecord& a = records[p.left];
    const ModelRecord& b = records[p.right];
    ++total;
    disagree += (a.final_lne < b.final_lne) != (a.final_wne < b.final_wne);
  }
  return total ? static_cast<double>(disagree) / static_cast<double>(total) : 0.0;
}

void write_jsonl(std::ostream& out, const std::vector<ModelRecord>& records) {
  for (const ModelRecord& r : records) out << nlohmann::json(r).dump() << '\n';
}

std::vector<ModelRecord> read_jsonl(std::istream& in) {
  std::vector<ModelRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(nlohmann::json::parse(line).get<ModelRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

void save_dataset(const std::string& path, const std::vector<ModelRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  write_jsonl(out, records);
  if (!out) throw ConfigError("failed writing '" + path + "'");
}

std::vector<ModelRecord> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open dataset '" + path + "'");
  return read_jsonl(in);
}

std::vector<std::string> job_ids(const std::vector<ModelRecord>& records) {
  std::vector<std::string> ids;
  for (const ModelRecord& r : records) {
    if (std::find(ids.begin(), ids.end(), r.job_id) == ids.end()) ids.push_back(r.job_id);
  }
  return ids;
}

std::vector<CurvePair> pair_and_label(const std::vector<ModelRecord>& records, PairOrdering ordering,
                                      const std::vector<std::string>& jobs) {
  std::map<std::string, std::vector<std::size_t>> by_job;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::string& job = records[i].job_id;
    if (!jobs.empty() && std::find(jobs.begin(), jobs.end(), job) == jobs.end()) continue;
    if (!by_job.count(job)) order.push_back(job);
    by_job[job].push_back(i);
  }
  std::vector<CurvePair> pairs;
  for (const std::string& job : order) {
    const auto& members = by_job[job];
    for (std::size_t a : members) {
      if (!std::isfinite(records[a].final_wne)) {
        throw LabelingError("record " + records[a].model_id + " has no final 1-day WNE");
      }
    }
    for (std::size_t x = 0; x < members.size(); ++x) {
      for (std::size_t y = x + 1; y < members.size(); ++y) {
        const std::size_t a = members[x], b = members[y];
        const int label = records[a].final_wne < records[b].final_wne ? 1 : 0;
        pairs.push_back({a, b, label});
        if (ordering == PairOrdering::kBoth) {
          pairs.push_back({b, a, records[b].final_wne < records[a].final_wne ? 1 : 0});
        }
      }
    }
  }
  return pairs;
}

std::vector<DatasetSplit> grouped_kfold(const std::vector<ModelRecord>& records, std::size_t k,
                                        SplitRatios ratios, std::uint64_t seed) {
  if (k < 2) throw SplitError("grouped_kfold: need k >= 2");
  if (!(ratios.train > 0.0 && ratios.validation > 0.0 && ratios.test > 0.0) ||
      std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
    throw SplitError("grouped_kfold: ratios must be positive and sum to 1");
  }
  std::vector<std::string> jobs = job_ids(records);
  const std::size_t n = jobs.size();
  if (n < k) {
    throw SplitError("grouped_kfold: " + std::to_string(n) + " jobs cannot fill " + std::to_string(k) + " folds");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(jobs.begin(), jobs.end(), rng);
  const std::size_t n_val =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratios.validation * static_cast<double>(n))));

  std::vector<DatasetSplit> splits;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t begin = f * n / k, end = (f + 1) * n / k;
    DatasetSplit split;
    split.fold = f;
    split.test_jobs.assign(jobs.begin() + static_cast<std::ptrdiff_t>(begin),
                           jobs.begin() + static_cast<std::ptrdiff_t>(end));
    std::vector<std::string> rest;
    for (std::size_t i = 0; i < n - (end - begin); ++i) rest.push_back(jobs[(end + i) % n]);
    if (rest.size() <= n_val) throw SplitError("grouped_kfold: no jobs left for training");
    split.validation_jobs.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
    split.train_jobs.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
    split.train = pair_and_label(records, PairOrdering::kBoth, split.train_jobs);
    split.validation = pair_and_label(records, PairOrdering::kCanonical, split.validation_jobs);
    split.test = pair_and_label(records, PairOrdering::kCanonical, split.test_jobs);
    splits.push_back(std::move(split));
  }
  return splits;
}

nlohmann::json splits_manifest(const std::vector<DatasetSplit>& splits, std::uint64_t seed) {
  nlohmann::json folds = nlohmann::json::array();
  for (const DatasetSplit& s : splits) {
    folds.push_back({{"fold", s.fold},
                     {"train", s.train_jobs},
                     {"validation", s.validation_jobs},
                     {"test", s.test_jobs}});
  }
  return {{"seed", seed}, {"k", splits.size()}, {"folds", folds}};
}

}  // namespace necurve
