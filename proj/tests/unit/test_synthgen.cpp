#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "necurve/error.hpp"
#include "necurve/synthgen.hpp"

using namespace necurve;

namespace {

GeneratorConfig small_config() {
  GeneratorConfig c;
  c.jobs = 10;
  c.models_per_job = 6;
  return c;
}

std::vector<std::size_t> every_example(std::size_t n) {
  std::vector<std::size_t> out(n);
  std::iota(out.begin(), out.end(), std::size_t{1});
  return out;
}

}  // namespace

TEST_CASE("generate_stream flat without noise or decay") {
  GeneratorConfig config;
  config.noise = 0.0;
  CurveParams p;
  p.examples = 400;
  p.asymptote = 0.7;
  p.amplitude = 0.0;
  p.wiggle = 0.0;
  const LossStream s = generate_stream(p, config, 3);
  for (double v : lne_curve(s, every_example(400)).values) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("generate_stream gives exact WNE from LNE without CTR drift") {
  GeneratorConfig config;
  CurveParams p;
  p.examples = 300;
  p.late_slope = 0.1;
  const LossStream s = generate_stream(p, config, 5);
  const LearningCurve c = lne_curve(s, every_example(s.size()));
  for (std::size_t t = 1; t <= s.size(); t += 7)
    for (std::size_t d = 1; d <= t; d += 5) {
      const double direct = wne_direct(s, {t, d});
      CHECK(std::abs(wne_from_lne(c, {t, d}) - direct) <= 1e-9 * std::max(1.0, direct));
    }
}

TEST_CASE("WNE-from-LNE error grows with CTR drift on average") {
  CurveParams p;
  p.examples = 2000;
  std::vector<double> errors;
  for (double drift : {0.0, 0.5, 2.0}) {
    GeneratorConfig config;
    config.ctr_drift = drift;
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      const LossStream s = generate_stream(p, config, seed);
      const LearningCurve c = lne_curve(s, every_example(s.size()));
      for (std::size_t t = 100; t <= s.size(); t += 100) total += std::abs(wne_from_lne(c, {t, 50}) - wne_direct(s, {t, 50}));
    }
    errors.push_back(total);
  }
  CHECK(errors[0] < 1e-9);
  CHECK(errors[0] <= errors[1]);
  CHECK(errors[1] <= errors[2]);
}

TEST_CASE("generate_stream rejects non-positive expected losses") {
  CurveParams p;
  p.examples = 10;
  p.asymptote = 0.1;
  CHECK_THROWS_AS(generate_stream(p, GeneratorConfig{}, 1), GenerationError);
  p.asymptote = 0.8;
  p.examples = 0;
  CHECK_THROWS_AS(generate_stream(p, GeneratorConfig{}, 1), GenerationError);
}

TEST_CASE("generate_dataset shape and filtering") {
  const GeneratorConfig config = small_config();
  const auto records = generate_dataset(config);
  REQUIRE_FALSE(records.empty());
  for (const ModelRecord& r : records) {
    CHECK(r.curve.size() == config.resample_length);
    CHECK(r.hyperparameters.size() == config.hyper_dim);
    CHECK(r.raw_points >= config.min_points);
    CHECK(std::isfinite(r.final_wne));
    CHECK(r.curve.values.back() == r.final_lne);
    CHECK(r.day_window == std::min(config.resolved_day_window(), r.examples));
  }
  CHECK(config.resolved_day_window() == 1630);
}

TEST_CASE("generate_dataset is deterministic") {
  std::ostringstream a, b;
  write_jsonl(a, generate_dataset(small_config()));
  write_jsonl(b, generate_dataset(small_config()));
  CHECK(a.str() == b.str());
}

TEST_CASE("calibrated inconsistency near target") {
  GeneratorConfig config;
  const auto records = generate_dataset(config);
  CHECK(pair_and_label(records, PairOrdering::kCanonical).size() >= 1000);
  CHECK(std::abs(inconsistency_rate(records) - 0.2) <= 0.03);
}

TEST_CASE("JSON-Lines round trip") {
  const auto records = generate_dataset(small_config());
  std::stringstream io;
  write_jsonl(io, records);
  const auto back = read_jsonl(io);
  REQUIRE(back.size() == records.size());
  CHECK(back[3].curve.values == records[3].curve.values);
  CHECK(back[3].architecture == records[3].architecture);
  CHECK(back[3].final_wne == records[3].final_wne);
}

TEST_CASE("pair_and_label") {
  const auto records = generate_dataset(small_config());
  const auto both = pair_and_label(records, PairOrdering::kBoth);
  const auto canonical = pair_and_label(records, PairOrdering::kCanonical);
  CHECK(both.size() == 2 * canonical.size());
  std::size_t ones = 0;
  for (const CurvePair& p : both) {
    CHECK(records[p.left].job_id == records[p.right].job_id);
    CHECK(p.left != p.right);
    CHECK(p.label == (records[p.left].final_wne < records[p.right].final_wne ? 1 : 0));
    ones += p.label;
  }
  CHECK(ones * 2 == both.size());
  for (const CurvePair& p : canonical) CHECK(p.left < p.right);

  SUBCASE("one model per job gives no pairs") {
    GeneratorConfig c = small_config();
    c.models_per_job = 1;
    CHECK(pair_and_label(generate_dataset(c), PairOrdering::kBoth).empty());
  }
  SUBCASE("k models give k(k-1) ordered pairs") {
    const auto jobs = job_ids(records);
    const std::vector<std::string> one{jobs.front()};
    CHECK(pair_and_label(records, PairOrdering::kBoth, one).size() == 6 * 5);
  }
  SUBCASE("missing final WNE") {
    auto broken = records;
    broken[0].final_wne = std::nan("");
    CHECK_THROWS_AS(pair_and_label(broken, PairOrdering::kBoth), LabelingError);
  }
  SUBCASE("polarity") {
    std::vector<ModelRecord> two(2, records[0]);
    two[0].final_wne = 0.41;
    two[1].final_wne = 0.43;
    const auto pairs = pair_and_label(two, PairOrdering::kCanonical);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].label == 1);
  }
}

TEST_CASE("grouped_kfold partitions jobs") {
  const auto records = generate_dataset(small_config());
  const auto jobs = job_ids(records);
  const auto splits = grouped_kfold(records, 5, {}, 9);
  REQUIRE(splits.size() == 5);
  std::multiset<std::string> tested;
  for (const DatasetSplit& s : splits) {
    std::set<std::string> all;
    for (const auto* part : {&s.train_jobs, &s.validation_jobs, &s.test_jobs})
      for (const std::string& j : *part) CHECK(all.insert(j).second);
    CHECK(all.size() == jobs.size());
    CHECK(s.test_jobs.size() == 2);
    for (const std::string& j : s.test_jobs) tested.insert(j);
    for (const CurvePair& p : s.test) {
      CHECK(std::find(s.test_jobs.begin(), s.test_jobs.end(), records[p.left].job_id) != s.test_jobs.end());
    }
  }
  CHECK(tested.size() == jobs.size());
  CHECK(std::set<std::string>(tested.begin(), tested.end()).size() == jobs.size());

  const auto again = grouped_kfold(records, 5, {}, 9);
  CHECK(again[2].test_jobs == splits[2].test_jobs);
  CHECK(splits_manifest(splits, 9).at("folds").size() == 5);
  CHECK_THROWS_AS(grouped_kfold(records, 11, {}, 9), SplitError);
}

TEST_CASE("config validation") {
  GeneratorConfig c;
  c.inconsistency_target = 0.6;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = GeneratorConfig{};
  c.jobs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  const GeneratorConfig big = GeneratorConfig::production_scale();
  CHECK(big.jobs == 79);
  CHECK(big.models_per_job == 60);
  const GeneratorConfig back = nlohmann::json(big).get<GeneratorConfig>();
  CHECK(back.jobs == big.jobs);
  CHECK(back.domains == big.domains);
}
