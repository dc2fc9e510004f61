#include <doctest.h>

#include <cmath>
#include <random>

#include "necurve/error.hpp"
#include "necurve/harness.hpp"

using namespace necurve;

namespace {

double brute_force_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[i] != 1 || labels[j] != 0) continue;
      total += 1.0;
      wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  return total == 0.0 ? 0.5 : wins / total;
}

std::vector<ModelRecord> small_records() {
  GeneratorConfig c;
  c.jobs = 8;
  c.models_per_job = 5;
  c.resample_length = 30;
  return generate_dataset(c);
}

}  // namespace

TEST_CASE("roc_auc against the pairwise oracle") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial;
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    std::uniform_int_distribution<int> level(0, 4), coin(0, 1);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = 0.25 * level(rng);
      labels[i] = coin(rng);
    }
    CHECK(std::abs(roc_auc(scores, labels) - brute_force_auc(scores, labels)) <= 1e-12);
  }
  const std::vector<double> s{0.1, 0.9};
  const std::vector<int> ones{1, 1};
  CHECK(roc_auc(s, ones) == 0.5);
}

TEST_CASE("pair_accuracy counts ties as wrong") {
  const std::vector<double> p{0.9, 0.5, 0.5, 0.2};
  const std::vector<int> l{1, 1, 0, 0};
  CHECK(pair_accuracy(p, l) == 0.5);
}

TEST_CASE("greedy accuracy equals the consistency counter") {
  const auto records = small_records();
  const auto pairs = pair_and_label(records, PairOrdering::kCanonical);
  const std::vector<double> fractions{0.2, 0.6, 1.0};
  const auto points = consistency_analysis(records, Criterion::kWne, fractions);
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    CHECK(evaluate_greedy(records, pairs, fractions[i]).accuracy == doctest::Approx(points[i].accuracy).epsilon(1e-15));
  }
  const std::vector<double> full{1.0};
  CHECK(consistency_analysis(records, Criterion::kLne, full)[0].accuracy == 1.0);
  CHECK(points.back().accuracy == doctest::Approx(1.0 - inconsistency_rate(records)).epsilon(1e-12));
}

TEST_CASE("train config") {
  TrainConfig c = TrainConfig::desk();
  c.validate();
  const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  CHECK(back.epochs == c.epochs);
  CHECK(back.model.tcn.filters == c.model.tcn.filters);
  c.fractions = {0.0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("report JSON round trip and summary") {
  EvalReport r;
  r.ranker = "r2+act";
  r.folds = {{0, 0.2, {0.8, 0.7, 10}, 3, 0.81}, {1, 0.2, {0.6, 0.5, 12}, 4, 0.7}};
  r.summary = summarize(r.folds);
  REQUIRE(r.summary.size() == 1);
  CHECK(r.at(0.2).auc_mean == doctest::Approx(0.7));
  CHECK(r.at(0.2).auc_sd == doctest::Approx(std::sqrt(0.02)));
  CHECK_THROWS_AS(r.at(0.4), EvaluationError);
  const EvalReport back = nlohmann::json::parse(nlohmann::json(r).dump()).get<EvalReport>();
  CHECK(back.folds.size() == 2);
  CHECK(back.at(0.2).accuracy_mean == r.at(0.2).accuracy_mean);
}

TEST_CASE("training is deterministic and records the best epoch") {
  const auto records = small_records();
  const auto splits = grouped_kfold(records, 4, {}, 1);
  TrainConfig c = TrainConfig::desk();
  c.epochs = 2;
  c.model.set_ranker_name("r2+act");
  c.model.tcn.filters = 4;
  c.model.lstm_dim = 4;
  c.model.embed_dim = 4;
  c.model.head_hidden = 8;
  std::size_t calls = 0;
  const TrainResult a = train(records, splits[0].train, splits[0].validation, c, 0.4, 5,
                              [&](std::size_t, double loss, double) {
                                CHECK(std::isfinite(loss));
                                ++calls;
                              });
  const TrainResult b = train(records, splits[0].train, splits[0].validation, c, 0.4, 5);
  CHECK(calls == 2);
  CHECK(a.epoch_losses == b.epoch_losses);
  CHECK(a.best_epoch >= 1);
  CHECK(a.best_epoch <= 2);
  CHECK(predict_pairs(a.ranker, records, splits[0].test) == predict_pairs(b.ranker, records, splits[0].test));
}

TEST_CASE("cross-validation on greedy") {
  const auto records = small_records();
  TrainConfig c = TrainConfig::desk();
  c.folds = 4;
  c.model.set_ranker_name("greedy");
  const EvalReport r = cross_validate(records, c);
  CHECK(r.folds.size() == 4 * c.fractions.size());
  CHECK(r.summary.size() == c.fractions.size());
  for (const FoldResult& f : r.folds) CHECK(f.test.pairs > 0);
}

TEST_CASE("worker threads") {
  CHECK(worker_threads() >= 1);
}
