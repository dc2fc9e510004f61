#include "necurve/rankers.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "necurve/error.hpp"

namespace necurve {

using diff::Array;
using diff::Var;

namespace {

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Array normal_array(diff::Shape shape, std::mt19937_64& rng) {
  Array out(std::move(shape));
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (double& v : out.data()) v = gauss(rng);
  return out;
}

/// Rows keep[p] = 0 where the pair shares a value, so x_l - keep * x_r leaves
/// the shared value alone and the difference otherwise.
Var shared_or_difference(Var left, Var right, const std::vector<bool>& shared) {
  const std::size_t pairs = left.shape()[0], width = left.shape()[1];
  Array keep({pairs, width}, 1.0);
  for (std::size_t p = 0; p < pairs; ++p) {
    if (shared[p]) std::fill(keep.ptr() + p * width, keep.ptr() + (p + 1) * width, 0.0);
  }
  return diff::sub(left, diff::mul(right, left.tape().constant(std::move(keep))));
}

std::vector<std::size_t> pick(const std::vector<std::size_t>& index, const std::vector<std::size_t>& rows) {
  std::vector<std::size_t> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = index[rows[i]];
  return out;
}

}  // namespace

void RankerConfig::validate() const {
  if (kind == RankerKind::kGreedy && use_act) throw ConfigError("greedy ranking takes no curve transformation");
  if (tcn.layers == 0 || tcn.filters == 0 || tcn.kernel == 0) throw ConfigError("tcn dims must be positive");
  if (lstm_dim == 0 || lstm_layers == 0 || embed_dim == 0 || head_hidden == 0) {
    throw ConfigError("ranker dims must be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("observation fraction must lie in (0, 1]");
  if (use_act && !(act.gamma > 0.0 && act.gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
}

std::string RankerConfig::ranker_name() const {
  switch (kind) {
    case RankerKind::kGreedy:
      return "greedy";
    case RankerKind::kSiamese:
      return use_act ? "siamese+act" : "siamese";
    case RankerKind::kR2:
      return use_act ? "r2+act" : "r2";
  }
  return "r2";
}

void RankerConfig::set_ranker_name(const std::string& name) {
  if (name == "greedy") {
    kind = RankerKind::kGreedy;
    use_act = false;
  } else if (name == "siamese" || name == "siamese+act") {
    kind = RankerKind::kSiamese;
    use_act = name.ends_with("+act");
  } else if (name == "r2" || name == "r2+act") {
    kind = RankerKind::kR2;
    use_act = name.ends_with("+act");
  } else {
    throw ConfigError("unknown ranker '" + name + "' (expected greedy, siamese, siamese+act, r2 or r2+act)");
  }
}

void to_json(nlohmann::json& j, const RankerConfig& c) {
  j = {{"ranker", c.ranker_name()},
       {"act", c.act},
       {"tcn", {{"layers", c.tcn.layers}, {"filters", c.tcn.filters}, {"kernel", c.tcn.kernel}}},
       {"lstm_dim", c.lstm_dim},
       {"lstm_layers", c.lstm_layers},
       {"embed_dim", c.embed_dim},
       {"head_hidden", c.head_hidden},
       {"dropout", c.dropout},
       {"lambda", c.lambda},
       {"metadata", c.metadata},
       {"fraction", c.fraction},
       {"eval_seed", c.eval_seed}};
}

void from_json(const nlohmann::json& j, RankerConfig& c) {
  const RankerConfig d;
  c.set_ranker_name(j.value("ranker", d.ranker_name()));
  c.act = j.contains("act") ? j.at("act").get<act::TransformConfig>() : d.act;
  if (j.contains("tcn")) {
    const auto& t = j.at("tcn");
    c.tcn.layers = t.value("layers", d.tcn.layers);
    c.tcn.filters = t.value("filters", d.tcn.filters);
    c.tcn.kernel = t.value("kernel", d.tcn.kernel);
  }
  c.lstm_dim = j.value("lstm_dim", d.lstm_dim);
  c.lstm_layers = j.value("lstm_layers", d.lstm_layers);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.head_hidden = j.value("head_hidden", d.head_hidden);
  c.dropout = j.value("dropout", d.dropout);
  c.tcn.dropout = c.dropout;
  c.lambda = j.value("lambda", d.lambda);
  c.metadata = j.value("metadata", d.metadata);
  c.fraction = j.value("fraction", d.fraction);
  c.eval_seed = j.value("eval_seed", d.eval_seed);
  c.validate();
}

FeatureSpace FeatureSpace::fit(const std::vector<ModelRecord>& records, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ConfigError("feature space: no training records");
  const ModelRecord& first = records.at(rows.front());
  FeatureSpace f;
  f.curve_length = first.curve.size();
  f.hyper_dim = first.hyperparameters.size();
  f.arch_layers = first.architecture.size();
  f.arch_features = f.arch_layers ? first.architecture.front().size() : 0;
  if (f.arch_layers == 0 || f.arch_features == 0) throw DomainError("feature space: empty architecture");
  const std::size_t slots = f.arch_layers * f.arch_features;
  std::vector<double> sum(slots, 0.0), sum_sq(slots, 0.0);
  std::map<std::string, bool> seen;
  for (std::size_t row : rows) {
    const ModelRecord& r = records.at(row);
    if (r.curve.size() != f.curve_length || r.hyperparameters.size() != f.hyper_dim ||
        r.architecture.size() != f.arch_layers) {
      throw ShapeError("feature space: record " + r.model_id + " does not match the first record's shape");
    }
    for (std::size_t l = 0; l < f.arch_layers; ++l) {
      if (r.architecture[l].size() != f.arch_features) throw ShapeError("feature space: ragged architecture");
      for (std::size_t k = 0; k < f.arch_features; ++k) {
        const double v = r.architecture[l][k];
        sum[l * f.arch_features + k] += v;
        sum_sq[l * f.arch_features + k] += v * v;
      }
    }
    if (!seen[r.domain_id]) {
      seen[r.domain_id] = true;
      f.domains.push_back(r.domain_id);
    }
  }
  std::sort(f.domains.begin(), f.domains.end());
  const double n = static_cast<double>(rows.size());
  f.arch_mean.resize(slots);
  f.arch_sd.resize(slots);
  for (std::size_t s = 0; s < slots; ++s) {
    f.arch_mean[s] = sum[s] / n;
    const double var = std::max(0.0, sum_sq[s] / n - f.arch_mean[s] * f.arch_mean[s]);
    f.arch_sd[s] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return f;
}

std::optional<std::size_t> FeatureSpace::domain_index(const std::string& id) const {
  auto it = std::lower_bound(domains.begin(), domains.end(), id);
  if (it == domains.end() || *it != id) return std::nullopt;
  return static_cast<std::size_t>(it - domains.begin());
}

std::vector<double> FeatureSpace::standardized_architecture(const ModelRecord& r) const {
  if (r.architecture.size() != arch_layers) {
    throw ShapeError("record " + r.model_id + ": architecture depth " + std::to_string(r.architecture.size()) +
                     ", expected " + std::to_string(arch_layers));
  }
  std::vector<double> out(arch_layers * arch_features);
  for (std::size_t l = 0; l < arch_layers; ++l) {
    if (r.architecture[l].size() != arch_features) throw ShapeError("record " + r.model_id + ": ragged architecture");
    for (std::size_t k = 0; k < arch_features; ++k) {
      const std::size_t s = l * arch_features + k;
      out[s] = (r.architecture[l][k] - arch_mean[s]) / arch_sd[s];
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const FeatureSpace& f) {
  j = {{"curve_length", f.curve_length}, {"hyper_dim", f.hyper_dim},   {"arch_layers", f.arch_layers},
       {"arch_features", f.arch_features}, {"arch_mean", f.arch_mean}, {"arch_sd", f.arch_sd},
       {"domains", f.domains}};
}

void from_json(const nlohmann::json& j, FeatureSpace& f) {
  j.at("curve_length").get_to(f.curve_length);
  j.at("hyper_dim").get_to(f.hyper_dim);
  j.at("arch_layers").get_to(f.arch_layers);
  j.at("arch_features").get_to(f.arch_features);
  j.at("arch_mean").get_to(f.arch_mean);
  j.at("arch_sd").get_to(f.arch_sd);
  j.at("domains").get_to(f.domains);
}

PairBatch PairBatch::build(const std::vector<ModelRecord>& records, std::span<const CurvePair> pairs) {
  PairBatch batch;
  std::map<std::size_t, std::size_t> slot;
  auto index_of = [&](std::size_t row) {
    auto [it, inserted] = slot.emplace(row, batch.records.size());
    if (inserted) batch.records.push_back(&records.at(row));
    return it->second;
  };
  for (const CurvePair& p : pairs) {
    batch.left.push_back(index_of(p.left));
    batch.right.push_back(index_of(p.right));
    batch.labels.push_back(static_cast<double>(p.label));
  }
  return batch;
}

double pairwise_probability(double delta) {
  if (delta >= 0.0) return 1.0 / (1.0 + std::exp(-delta));
  const double e = std::exp(delta);
  return e / (1.0 + e);
}

double ce_loss(double probability, int label) {
  if (label != 0 && label != 1) throw DomainError("ce_loss: label must be 0 or 1");
  const double q = std::clamp(probability, 1e-300, 1.0 - 1e-16);
  return label == 1 ? -std::log(q) : -std::log1p(-q);
}

double total_loss(double ce, double mse, double lambda) { return lambda == 0.0 ? ce : ce + lambda * mse; }

PairRanker::PairRanker(RankerConfig config, FeatureSpace features, std::uint64_t seed)
    : config_(std::move(config)), features_(std::move(features)), seed_(seed) {
  config_.validate();
  if (config_.kind == RankerKind::kGreedy) throw ConfigError("greedy ranking has no trainable model");
  config_.tcn.dropout = config_.dropout;
  observed_ = necurve::observed_length(features_.curve_length, config_.fraction);
  if (observed_ == 0) throw ConfigError("observation fraction leaves no visible points");
  std::mt19937_64 rng(seed);
  if (config_.use_act) transform_ = act::CurveTransform(params_, "act", observed_, config_.act, rng);
  tcn_ = TcnEncoder(params_, "tcn", 1, config_.tcn, rng);
  std::size_t width = config_.tcn.filters;
  if (config_.metadata) {
    hyper_norm_ = BatchNorm(params_, "hyper_norm", features_.hyper_dim);
    arch_encoder_ = Lstm(params_, "arch.encoder", features_.arch_features, config_.lstm_dim, config_.lstm_layers, rng);
    arch_decoder_ = Lstm(params_, "arch.decoder", config_.lstm_dim, config_.lstm_dim, config_.lstm_layers, rng);
    arch_readout_ = Linear(params_, "arch.readout", config_.lstm_dim, features_.arch_features, rng);
    params_.add("domain.table", normal_array({std::max<std::size_t>(features_.domains.size(), 1), config_.embed_dim}, rng));
    width += features_.hyper_dim + config_.lstm_dim + config_.embed_dim;
  }
  hidden_ = Linear(params_, "head.hidden", width, config_.head_hidden, rng);
  output_ = Linear(params_, "head.output", config_.head_hidden, 1, rng);
}

Var PairRanker::curves(Context& ctx, const PairBatch& batch) const {
  const std::size_t n = batch.records.size();
  Array y({n, observed_});
  for (std::size_t u = 0; u < n; ++u) {
    const ModelRecord& r = *batch.records[u];
    if (r.curve.size() != features_.curve_length) {
      throw ShapeError("record " + r.model_id + ": curve length " + std::to_string(r.curve.size()) + ", expected " +
                       std::to_string(features_.curve_length));
    }
    std::copy_n(r.curve.values.begin(), observed_, y.ptr() + u * observed_);
  }
  Var curves = ctx.constant(std::move(y));
  return config_.use_act ? transform_(ctx, curves) : curves;
}

Var PairRanker::domains(Context& ctx, const PairBatch& batch) const {
  const std::size_t n = batch.records.size(), dim = config_.embed_dim;
  std::vector<std::size_t> ids(n, 0);
  Array seen_mask({n, dim}, 1.0);
  Array unseen({n, dim});
  for (std::size_t u = 0; u < n; ++u) {
    const std::string& id = batch.records[u]->domain_id;
    if (auto index = features_.domain_index(id)) {
      ids[u] = *index;
      continue;
    }
    std::mt19937_64 rng(mix_seed(config_.eval_seed, fnv1a(id)));
    const Array vec = normal_array({dim}, rng);
    std::copy(vec.data().begin(), vec.data().end(), unseen.ptr() + u * dim);
    std::fill(seen_mask.ptr() + u * dim, seen_mask.ptr() + (u + 1) * dim, 0.0);
  }
  Var looked_up = diff::embedding(ctx.param("domain.table"), ids);
  return diff::add(diff::mul(looked_up, ctx.constant(std::move(seen_mask))), ctx.constant(std::move(unseen)));
}

std::pair<Var, std::vector<std::size_t>> PairRanker::architectures(Context& ctx, const PairBatch& batch,
                                                                   std::optional<Var>* reconstruction) const {
  std::vector<std::vector<double>> distinct;
  std::vector<std::size_t> index(batch.records.size());
  for (std::size_t u = 0; u < batch.records.size(); ++u) {
    std::vector<double> arch = features_.standardized_architecture(*batch.records[u]);
    auto it = std::find(distinct.begin(), distinct.end(), arch);
    index[u] = static_cast<std::size_t>(it - distinct.begin());
    if (it == distinct.end()) distinct.push_back(std::move(arch));
  }
  const std::size_t count = distinct.size(), feats = features_.arch_features;
  std::vector<Var> steps;
  Array target({count, features_.arch_layers, feats});
  for (std::size_t l = 0; l < features_.arch_layers; ++l) {
    Array step({count, feats});
    for (std::size_t a = 0; a < count; ++a)
      for (std::size_t k = 0; k < feats; ++k) {
        step.at(a, k) = distinct[a][l * feats + k];
        target.at(a, l, k) = distinct[a][l * feats + k];
      }
    steps.push_back(ctx.constant(std::move(step)));
  }
  Var embedding = arch_encoder_(ctx, steps).back();
  if (reconstruction != nullptr) {
    const std::vector<Var> repeated(features_.arch_layers, embedding);
    std::vector<Var> decoded;
    for (const Var& h : arch_decoder_(ctx, repeated)) decoded.push_back(arch_readout_(ctx, h));
    *reconstruction = diff::mse(diff::stack(decoded, 1), ctx.constant(std::move(target)));
  }
  return {embedding, index};
}

Var PairRanker::head(Context& ctx, Var features) const {
  Var h = diff::relu(hidden_(ctx, features));
  h = diff::dropout(h, config_.dropout, ctx.rng(), ctx.training());
  Var out = output_(ctx, h);
  return diff::reshape(out, {out.shape()[0]});
}

Var PairRanker::pair_features(Context& ctx, const PairBatch& batch, std::optional<Var>* reconstruction) const {
  const std::size_t pairs = batch.size();
  Var z = curves(ctx, batch);
  Var diff_curves = diff::sub(diff::gather_rows(z, batch.left), diff::gather_rows(z, batch.right));
  Var encoded = tcn_(ctx, diff::reshape(diff_curves, {pairs, 1, observed_}));
  if (!config_.metadata) return encoded;

  Array hyper({pairs, features_.hyper_dim});
  std::vector<bool> same_arch(pairs), same_domain(pairs);
  for (std::size_t p = 0; p < pairs; ++p) {
    const ModelRecord& a = *batch.records[batch.left[p]];
    const ModelRecord& b = *batch.records[batch.right[p]];
    for (std::size_t k = 0; k < features_.hyper_dim; ++k) hyper.at(p, k) = a.hyperparameters[k] - b.hyperparameters[k];
    same_arch[p] = a.architecture == b.architecture;
    same_domain[p] = a.domain_id == b.domain_id;
  }
  Var hyper_features = hyper_norm_(ctx, ctx.constant(std::move(hyper)));
  auto [arch, arch_index] = architectures(ctx, batch, reconstruction);
  Var arch_features = shared_or_difference(diff::gather_rows(arch, pick(arch_index, batch.left)),
                                           diff::gather_rows(arch, pick(arch_index, batch.right)), same_arch);
  Var dom = domains(ctx, batch);
  Var domain_features =
      shared_or_difference(diff::gather_rows(dom, batch.left), diff::gather_rows(dom, batch.right), same_domain);
  const Var parts[] = {encoded, hyper_features, arch_features, domain_features};
  return diff::concat(parts, 1);
}

Var PairRanker::record_scores(Context& ctx, const PairBatch& batch, std::optional<Var>* reconstruction) const {
  const std::size_t n = batch.records.size();
  Var z = curves(ctx, batch);
  Var encoded = tcn_(ctx, diff::reshape(z, {n, 1, observed_}));
  Var features = encoded;
  if (config_.metadata) {
    Array hyper({n, features_.hyper_dim});
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t k = 0; k < features_.hyper_dim; ++k) hyper.at(u, k) = batch.records[u]->hyperparameters[k];
    auto [arch, arch_index] = architectures(ctx, batch, reconstruction);
    const Var parts[] = {encoded, hyper_norm_(ctx, ctx.constant(std::move(hyper))), diff::gather_rows(arch, arch_index),
                         domains(ctx, batch)};
    features = diff::concat(parts, 1);
  }
  return head(ctx, features);
}

RankerOutput PairRanker::forward(Context& ctx, const PairBatch& batch) const {
  if (batch.size() == 0) throw ShapeError("ranker: empty batch");
  RankerOutput out;
  std::optional<Var>* recon = config_.metadata ? &out.reconstruction : nullptr;
  if (config_.kind == RankerKind::kR2) {
    out.delta = head(ctx, pair_features(ctx, batch, recon));
  } else {
    Var scores = diff::reshape(record_scores(ctx, batch, recon), {batch.records.size(), 1});
    Var delta = diff::sub(diff::gather_rows(scores, batch.left), diff::gather_rows(scores, batch.right));
    out.delta = diff::reshape(delta, {batch.size()});
  }
  return out;
}

Var PairRanker::loss(Context& ctx, const PairBatch& batch) const {
  RankerOutput out = forward(ctx, batch);
  Var ce = diff::bce_with_logits(out.delta, Array({batch.size()}, batch.labels));
  if (!out.reconstruction || config_.lambda == 0.0) return ce;
  return diff::add(ce, diff::scale(*out.reconstruction, config_.lambda));
}

std::vector<double> PairRanker::predict(const PairBatch& batch) const {
  diff::Tape tape;
  std::mt19937_64 rng(seed_);
  Context ctx(tape, const_cast<diff::ParamStore&>(params_), false, rng);
  const Var delta = forward(ctx, batch).delta;
  std::vector<double> p(batch.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = pairwise_probability(delta.value()[i]);
  return p;
}

nlohmann::json PairRanker::checkpoint() const {
  return {{"config", config_}, {"features", features_}, {"seed", seed_}, {"params", params_.to_json()}};
}

PairRanker PairRanker::from_checkpoint(const nlohmann::json& j) {
  PairRanker ranker(j.at("config").get<RankerConfig>(), j.at("features").get<FeatureSpace>(),
                    j.at("seed").get<std::uint64_t>());
  diff::ParamStore saved = diff::ParamStore::from_json(j.at("params"));
  for (auto& [name, p] : ranker.params_.all()) {
    if (!saved.contains(name)) throw ConfigError("checkpoint: missing parameter " + name);
    const diff::Parameter& s = saved.get(name);
    if (s.value.shape() != p.value.shape()) throw ShapeError("checkpoint: shape mismatch for " + name);
    p.value = s.value;
  }
  return ranker;
}

}  // namespace necurve
