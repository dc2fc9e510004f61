#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "necurve/diff/grad_check.hpp"
#include "necurve/error.hpp"
#include "necurve/rankers.hpp"

using namespace necurve;
using diff::Array;
using diff::Tape;
using diff::Var;

namespace {

const std::vector<ModelRecord>& small_records() {
  static const std::vector<ModelRecord> records = [] {
    GeneratorConfig c;
    c.jobs = 6;
    c.models_per_job = 5;
    c.resample_length = 40;
    return generate_dataset(c);
  }();
  return records;
}

FeatureSpace all_features(const std::vector<ModelRecord>& records) {
  std::vector<std::size_t> rows(records.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return FeatureSpace::fit(records, rows);
}

RankerConfig small_config(const std::string& name) {
  RankerConfig c;
  c.set_ranker_name(name);
  c.tcn.filters = 4;
  c.lstm_dim = 4;
  c.embed_dim = 3;
  c.head_hidden = 6;
  c.fraction = 1.0;
  return c;
}

}  // namespace

TEST_CASE("pairwise probability and losses") {
  CHECK(pairwise_probability(std::log(3.0)) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(pairwise_probability(0.0) == 0.5);
  CHECK(pairwise_probability(-800.0) == 0.0);
  CHECK(pairwise_probability(800.0) == 1.0);
  CHECK(ce_loss(0.5, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(ce_loss(0.5, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(std::isfinite(ce_loss(0.0, 1)));
  CHECK(total_loss(0.7, 3.0, 0.0) == 0.7);
  CHECK(total_loss(0.7, 3.0, 0.1) == doctest::Approx(1.0));
}

TEST_CASE("ranker names") {
  RankerConfig c;
  for (const std::string name : {"greedy", "siamese", "siamese+act", "r2", "r2+act"}) {
    c.set_ranker_name(name);
    CHECK(c.ranker_name() == name);
  }
  CHECK_THROWS_AS(c.set_ranker_name("lstm"), ConfigError);
  c.set_ranker_name("r2");
  c.lambda = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("Siamese predictions are antisymmetric") {
  const auto& records = small_records();
  const PairRanker ranker(small_config("siamese+act"), all_features(records), 4);
  const std::vector<CurvePair> pairs = pair_and_label(records, PairOrdering::kCanonical);
  std::vector<CurvePair> swapped;
  for (const CurvePair& p : pairs) swapped.push_back({p.right, p.left, 1 - p.label});
  const std::vector<double> a = ranker.predict(PairBatch::build(records, pairs));
  const std::vector<double> b = ranker.predict(PairBatch::build(records, swapped));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] + b[i] - 1.0) <= 1e-12);
}

TEST_CASE("R2 curve input is the antisymmetric difference") {
  const auto& records = small_records();
  const PairRanker ranker(small_config("r2+act"), all_features(records), 5);
  const std::vector<CurvePair> pairs{{0, 1, 1}, {1, 0, 0}};
  const PairBatch batch = PairBatch::build(records, pairs);
  Tape t;
  std::mt19937_64 rng(0);
  diff::ParamStore& store = const_cast<diff::ParamStore&>(ranker.params());
  Context ctx(t, store, false, rng);
  const Array z = ranker.curves(ctx, batch).value();
  const std::size_t n = ranker.observed_length();
  for (std::size_t c = 0; c < n; ++c) {
    const double forward = z.at(batch.left[0], c) - z.at(batch.right[0], c);
    const double backward = z.at(batch.left[1], c) - z.at(batch.right[1], c);
    CHECK(forward == -backward);
  }
}

TEST_CASE("fraction truncates the curve input") {
  const auto& records = small_records();
  RankerConfig c = small_config("r2");
  c.fraction = 0.4;
  const PairRanker ranker(c, all_features(records), 1);
  CHECK(ranker.observed_length() == 16);
  const PairBatch batch = PairBatch::build(records, std::vector<CurvePair>{{0, 1, 1}});
  Tape t;
  std::mt19937_64 rng(0);
  Context ctx(t, const_cast<diff::ParamStore&>(ranker.params()), false, rng);
  const Array z = ranker.curves(ctx, batch).value();
  CHECK(z.shape() == diff::Shape{2, 16});
  for (std::size_t i = 0; i < 16; ++i) CHECK(z.at(batch.left[0], i) == records[0].curve.values[i]);
}

TEST_CASE("unseen domains get keyed vectors") {
  auto records = small_records();
  const FeatureSpace features = all_features(records);
  records[0].domain_id = "never-seen";
  records[1].domain_id = "never-seen";
  records[2].domain_id = "also-new";
  RankerConfig c = small_config("r2");
  c.eval_seed = 3;
  const PairRanker ranker(c, features, 2);
  const PairBatch batch = PairBatch::build(records, std::vector<CurvePair>{{0, 1, 1}, {2, 3, 0}});
  auto domains_of = [&](const PairRanker& r) {
    Tape t;
    std::mt19937_64 rng(0);
    Context ctx(t, const_cast<diff::ParamStore&>(r.params()), false, rng);
    return r.domains(ctx, batch).value();
  };
  const Array d = domains_of(ranker);
  const std::size_t dim = c.embed_dim;
  auto row = [&](const Array& a, std::size_t r) {
    return std::vector<double>(a.ptr() + r * dim, a.ptr() + (r + 1) * dim);
  };
  CHECK(row(d, batch.left[0]) == row(d, batch.right[0]));
  CHECK(row(d, batch.left[1]) != row(d, batch.left[0]));
  CHECK(domains_of(ranker) == d);
  c.eval_seed = 4;
  const PairRanker other(c, features, 2);
  CHECK(row(domains_of(other), batch.left[0]) != row(d, batch.left[0]));
  CHECK(row(domains_of(other), batch.right[1]) == row(d, batch.right[1]));
}

TEST_CASE("TCN is causal with the expected receptive field") {
  TcnConfig config;
  config.filters = 16;
  CHECK(tcn_receptive_field(config) == 31);
  std::mt19937_64 rng(7);
  diff::ParamStore store;
  const TcnEncoder tcn(store, "tcn", 1, config, rng);
  const std::size_t n = 64;
  Array x({1, 1, n});
  std::normal_distribution<double> normal;
  for (double& v : x.data()) v = normal(rng);
  auto top = [&](const Array& input) {
    Tape t;
    Context ctx(t, store, false, rng);
    return tcn.activations(ctx, t.constant(input)).back().value();
  };
  const Array base = top(x);
  const std::size_t s = 10;
  Array moved = x;
  moved.at(0, 0, s) += 5.0;
  const Array after = top(moved);
  bool reached_edge = false;
  for (std::size_t t = 0; t < n; ++t) {
    bool same = true;
    for (std::size_t f = 0; f < config.filters; ++f) same = same && after.at(0, f, t) == base.at(0, f, t);
    if (t < s || t >= s + 31) CHECK(same);
    if (t == s + 30 && !same) reached_edge = true;
  }
  CHECK(reached_edge);
}

TEST_CASE("ranker loss passes gradient checks") {
  const auto& records = small_records();
  for (const std::string name : {"r2+act", "siamese"}) {
    RankerConfig c = small_config(name);
    c.dropout = 0.0;
    c.tcn.dropout = 0.0;
    c.tcn.layers = 2;
    c.act.gamma = 0.5;
    c.fraction = 0.2;
    PairRanker ranker(c, all_features(records), 9);
    const PairBatch batch = PairBatch::build(records, std::vector<CurvePair>{{0, 1, 1}, {5, 6, 0}});
    const auto r = diff::grad_check_params(
        ranker.params(),
        [&](Tape& t) {
          std::mt19937_64 rng(0);
          Context ctx(t, ranker.params(), true, rng);
          return ranker.loss(ctx, batch);
        },
        1e-6, 6, 2);
    INFO(name << " worst " << r.worst_param);
    CHECK(r.max_error <= 1e-4);
  }
}

TEST_CASE("reconstruction appears only with metadata") {
  const auto& records = small_records();
  const PairBatch batch = PairBatch::build(records, std::vector<CurvePair>{{0, 1, 1}});
  for (bool metadata : {true, false}) {
    RankerConfig c = small_config("r2");
    c.metadata = metadata;
    const PairRanker ranker(c, all_features(records), 1);
    Tape t;
    std::mt19937_64 rng(0);
    Context ctx(t, const_cast<diff::ParamStore&>(ranker.params()), false, rng);
    CHECK(ranker.forward(ctx, batch).reconstruction.has_value() == metadata);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto& records = small_records();
  const PairRanker ranker(small_config("r2+act"), all_features(records), 6);
  const std::vector<CurvePair> pairs = pair_and_label(records, PairOrdering::kBoth);
  const PairBatch batch = PairBatch::build(records, pairs);
  const PairRanker back = PairRanker::from_checkpoint(nlohmann::json::parse(ranker.checkpoint().dump()));
  CHECK(back.predict(batch) == ranker.predict(batch));
  CHECK(back.config().ranker_name() == "r2+act");
}

TEST_CASE("feature space") {
  const auto& records = small_records();
  const FeatureSpace f = all_features(records);
  CHECK(f.curve_length == 40);
  CHECK(std::is_sorted(f.domains.begin(), f.domains.end()));
  CHECK(f.domain_index(records[0].domain_id).has_value());
  CHECK_FALSE(f.domain_index("nope").has_value());
  CHECK(f.standardized_architecture(records[0]).size() == f.arch_layers * f.arch_features);
  const FeatureSpace back = nlohmann::json(f).get<FeatureSpace>();
  CHECK(back.arch_mean == f.arch_mean);
}
