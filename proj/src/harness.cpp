#include "necurve/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "necurve/error.hpp"

namespace necurve {

namespace {

using Snapshot = std::map<std::string, diff::Array>;

Snapshot snapshot(const diff::ParamStore& store) {
  Snapshot out;
  for (const auto& [name, p] : store.all()) out.emplace(name, p.value);
  return out;
}

void restore(diff::ParamStore& store, const Snapshot& saved) {
  for (auto& [name, p] : store.all()) p.value = saved.at(name);
}

/// Pairs grouped by job (each job shuffled, then chunked), chunks shuffled.
std::vector<std::vector<CurvePair>> job_batches(const std::vector<ModelRecord>& records,
                                                std::span<const CurvePair> pairs, std::size_t batch,
                                                std::mt19937_64& rng) {
  std::map<std::string, std::vector<CurvePair>> by_job;
  for (const CurvePair& p : pairs) by_job[records[p.left].job_id].push_back(p);
  std::vector<std::vector<CurvePair>> batches;
  for (auto& [job, list] : by_job) {
    std::shuffle(list.begin(), list.end(), rng);
    for (std::size_t i = 0; i < list.size(); i += batch) {
      batches.emplace_back(list.begin() + static_cast<std::ptrdiff_t>(i),
                           list.begin() + static_cast<std::ptrdiff_t>(std::min(list.size(), i + batch)));
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

std::vector<int> labels_of(std::span<const CurvePair> pairs) {
  std::vector<int> out(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) out[i] = pairs[i].label;
  return out;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation; 0 for fewer than two values.
double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

bool same_fraction(double a, double b) { return std::abs(a - b) < 1e-12; }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw EvaluationError("cannot write " + path.string());
  out << text;
}

}  // namespace

void check_disjoint(const DatasetSplit& split) {
  const std::set<std::string> train(split.train_jobs.begin(), split.train_jobs.end());
  const std::set<std::string> val(split.validation_jobs.begin(), split.validation_jobs.end());
  for (const std::string& job : split.test_jobs) {
    if (train.count(job) || val.count(job)) throw SplitError("fold " + std::to_string(split.fold) + ": job " + job + " leaks into test");
  }
  for (const std::string& job : split.validation_jobs) {
    if (train.count(job)) throw SplitError("fold " + std::to_string(split.fold) + ": job " + job + " leaks into validation");
  }
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.epochs = 12;
  c.model.tcn.filters = 16;
  c.model.lstm_dim = 16;
  c.model.embed_dim = 16;
  c.model.head_hidden = 32;
  c.max_pairs_per_epoch = 2048;
  return c;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be at least 1");
  if (batch == 0) throw ConfigError("batch must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (fractions.empty()) throw ConfigError("at least one observation fraction is required");
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("observation fractions must lie in (0, 1]");
  }
  if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
  model.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch", c.batch},
       {"lr", c.learning_rate},
       {"seed", c.seed},
       {"fractions", c.fractions},
       {"model", c.model},
       {"max_pairs_per_epoch", c.max_pairs_per_epoch},
       {"folds", c.folds},
       {"split", {{"train", c.ratios.train}, {"validation", c.ratios.validation}, {"test", c.ratios.test}}}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d = TrainConfig::desk();
  c.epochs = j.value("epochs", d.epochs);
  c.batch = j.value("batch", d.batch);
  c.learning_rate = j.value("lr", d.learning_rate);
  c.seed = j.value("seed", d.seed);
  c.fractions = j.value("fractions", d.fractions);
  if (j.contains("model")) {
    nlohmann::json model = nlohmann::json(d.model);
    model.merge_patch(j.at("model"));
    c.model = model.get<RankerConfig>();
  } else {
    c.model = d.model;
  }
  c.max_pairs_per_epoch = j.value("max_pairs_per_epoch", d.max_pairs_per_epoch);
  c.folds = j.value("folds", d.folds);
  if (j.contains("split")) {
    const auto& s = j.at("split");
    c.ratios.train = s.value("train", d.ratios.train);
    c.ratios.validation = s.value("validation", d.ratios.validation);
    c.ratios.test = s.value("test", d.ratios.test);
  }
  c.validate();
}

TrainResult train(const std::vector<ModelRecord>& records, std::span<const CurvePair> train_pairs,
                  std::span<const CurvePair> validation, const TrainConfig& config, double fraction,
                  std::uint64_t seed, const EpochCallback& on_epoch) {
  config.validate();
  if (train_pairs.empty()) throw TrainingError("no training pairs", 0);
  std::vector<std::size_t> rows;
  for (const CurvePair& p : train_pairs) {
    rows.push_back(p.left);
    rows.push_back(p.right);
  }
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());

  RankerConfig model = config.model;
  model.fraction = fraction;
  model.eval_seed = mix_seed(seed, 0xE7A1);
  TrainResult result{PairRanker(model, FeatureSpace::fit(records, rows), seed), 0, -1.0, {}};
  PairRanker& ranker = result.ranker;
  diff::Adam adam({config.learning_rate});
  std::mt19937_64 rng(mix_seed(seed, 0xBA7C));
  Snapshot best;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const auto& chunk : job_batches(records, train_pairs, config.batch, rng)) {
      if (config.max_pairs_per_epoch != 0 && seen >= config.max_pairs_per_epoch) break;
      const PairBatch batch = PairBatch::build(records, chunk);
      diff::Tape tape;
      Context ctx(tape, ranker.params(), true, rng);
      diff::Var loss = ranker.loss(ctx, batch);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) throw TrainingError("non-finite training loss", epoch);
      tape.backward(loss);
      adam.step(ranker.params());
      ranker.params().zero_grad();
      loss_sum += value * static_cast<double>(batch.size());
      seen += batch.size();
    }
    const double epoch_loss = loss_sum / static_cast<double>(seen);
    result.epoch_losses.push_back(epoch_loss);
    double val_auc = 0.0;
    if (!validation.empty()) {
      val_auc = evaluate(ranker, records, validation).auc;
      if (val_auc > result.best_validation_auc) {
        result.best_validation_auc = val_auc;
        result.best_epoch = epoch;
        best = snapshot(ranker.params());
      }
    }
    if (on_epoch) on_epoch(epoch, epoch_loss, val_auc);
  }
  if (validation.empty()) {
    result.best_epoch = config.epochs;
    result.best_validation_auc = 0.0;
  } else {
    restore(ranker.params(), best);
  }
  return result;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw EvaluationError("roc_auc: score and label counts differ");
  const std::size_t n = scores.size();
  std::size_t positives = 0;
  for (int l : labels) positives += l == 1;
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) return 0.5;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) rank_sum += midrank;
    }
    i = j + 1;
  }
  const double p = static_cast<double>(positives);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(negatives));
}

double pair_accuracy(std::span<const double> probabilities, std::span<const int> labels) {
  if (probabilities.size() != labels.size()) throw EvaluationError("pair_accuracy: size mismatch");
  if (probabilities.empty()) throw EvaluationError("pair_accuracy: no pairs");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = probabilities[i];
    if (p == 0.5) continue;
    correct += (p > 0.5) == (labels[i] == 1);
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::vector<double> predict_pairs(const PairRanker& ranker, const std::vector<ModelRecord>& records,
                                  std::span<const CurvePair> pairs, std::size_t batch) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); i += batch) {
    const auto chunk = pairs.subspan(i, std::min(batch, pairs.size() - i));
    const std::vector<double> p = ranker.predict(PairBatch::build(records, chunk));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Metrics evaluate(const PairRanker& ranker, const std::vector<ModelRecord>& records, std::span<const CurvePair> pairs) {
  if (pairs.empty()) throw EvaluationError("evaluate: empty pair set");
  const std::vector<double> p = predict_pairs(ranker, records, pairs);
  const std::vector<int> labels = labels_of(pairs);
  return {roc_auc(p, labels), pair_accuracy(p, labels), pairs.size()};
}

Metrics evaluate_greedy(const std::vector<ModelRecord>& records, std::span<const CurvePair> pairs, double fraction) {
  if (pairs.empty()) throw EvaluationError("evaluate: empty pair set");
  std::vector<double> p(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    p[i] = greedy_rank(records[pairs[i].left].curve, records[pairs[i].right].curve, fraction).probability;
  }
  const std::vector<int> labels = labels_of(pairs);
  return {roc_auc(p, labels), pair_accuracy(p, labels), pairs.size()};
}

const FractionSummary& EvalReport::at(double fraction) const {
  for (const FractionSummary& s : summary) {
    if (same_fraction(s.fraction, fraction)) return s;
  }
  throw EvaluationError("report has no fraction " + std::to_string(fraction));
}

double EvalReport::mean_auc() const {
  std::vector<double> v;
  for (const FractionSummary& s : summary) v.push_back(s.auc_mean);
  return mean_of(v);
}

double EvalReport::mean_accuracy() const {
  std::vector<double> v;
  for (const FractionSummary& s : summary) v.push_back(s.accuracy_mean);
  return mean_of(v);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const FoldResult& f : r.folds) {
    folds.push_back({{"fold", f.fold},
                     {"fraction", f.fraction},
                     {"auc", f.test.auc},
                     {"accuracy", f.test.accuracy},
                     {"pairs", f.test.pairs},
                     {"best_epoch", f.best_epoch},
                     {"validation_auc", f.validation_auc}});
  }
  nlohmann::json summary = nlohmann::json::array();
  for (const FractionSummary& s : r.summary) {
    summary.push_back({{"fraction", s.fraction},
                       {"auc_mean", s.auc_mean},
                       {"auc_sd", s.auc_sd},
                       {"accuracy_mean", s.accuracy_mean},
                       {"accuracy_sd", s.accuracy_sd}});
  }
  j = {{"ranker", r.ranker}, {"metadata", r.metadata},        {"config", r.config},
       {"folds", folds},     {"summary", summary},            {"runtime_seconds", r.runtime_seconds}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  j.at("ranker").get_to(r.ranker);
  r.metadata = j.value("metadata", true);
  r.config = j.value("config", nlohmann::json::object());
  r.folds.clear();
  for (const auto& f : j.at("folds")) {
    FoldResult fr;
    f.at("fold").get_to(fr.fold);
    f.at("fraction").get_to(fr.fraction);
    f.at("auc").get_to(fr.test.auc);
    f.at("accuracy").get_to(fr.test.accuracy);
    f.at("pairs").get_to(fr.test.pairs);
    fr.best_epoch = f.value("best_epoch", std::size_t{0});
    fr.validation_auc = f.value("validation_auc", 0.0);
    r.folds.push_back(fr);
  }
  r.summary.clear();
  for (const auto& s : j.at("summary")) {
    r.summary.push_back({s.at("fraction").get<double>(), s.at("auc_mean").get<double>(), s.at("auc_sd").get<double>(),
                         s.at("accuracy_mean").get<double>(), s.at("accuracy_sd").get<double>()});
  }
  r.runtime_seconds = j.value("runtime_seconds", 0.0);
}

std::vector<FractionSummary> summarize(const std::vector<FoldResult>& folds) {
  std::vector<double> fractions;
  for (const FoldResult& f : folds) {
    if (std::none_of(fractions.begin(), fractions.end(), [&](double x) { return same_fraction(x, f.fraction); })) {
      fractions.push_back(f.fraction);
    }
  }
  std::vector<FractionSummary> out;
  for (double fraction : fractions) {
    std::vector<double> aucs, accs;
    for (const FoldResult& f : folds) {
      if (!same_fraction(f.fraction, fraction)) continue;
      aucs.push_back(f.test.auc);
      accs.push_back(f.test.accuracy);
    }
    out.push_back({fraction, mean_of(aucs), sd_of(aucs), mean_of(accs), sd_of(accs)});
  }
  return out;
}

std::size_t worker_threads() {
  const char* env = std::getenv("NECURVE_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) throw ConfigError("NECURVE_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

EvalReport cross_validate(const std::vector<ModelRecord>& records, const TrainConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const std::vector<DatasetSplit> splits = grouped_kfold(records, config.folds, config.ratios, config.seed);
  for (const DatasetSplit& s : splits) check_disjoint(s);

  struct Task {
    std::size_t split;
    std::size_t fraction_index;
  };
  std::vector<Task> tasks;
  for (std::size_t s = 0; s < splits.size(); ++s)
    for (std::size_t f = 0; f < config.fractions.size(); ++f) tasks.push_back({s, f});

  std::vector<FoldResult> results(tasks.size());
  const bool greedy = config.model.kind == RankerKind::kGreedy;
  auto run = [&](std::size_t t) {
    const DatasetSplit& split = splits[tasks[t].split];
    const double fraction = config.fractions[tasks[t].fraction_index];
    FoldResult& out = results[t];
    out.fold = split.fold;
    out.fraction = fraction;
    if (greedy) {
      out.test = evaluate_greedy(records, split.test, fraction);
      return;
    }
    const std::uint64_t seed = mix_seed(config.seed, split.fold + 1, tasks[t].fraction_index + 1);
    TrainResult trained = train(records, split.train, split.validation, config, fraction, seed);
    out.test = evaluate(trained.ranker, records, split.test);
    out.best_epoch = trained.best_epoch;
    out.validation_auc = trained.best_validation_auc;
  };

  const std::size_t threads = std::min(worker_threads(), tasks.size());
  if (threads <= 1 || greedy) {
    for (std::size_t t = 0; t < tasks.size(); ++t) run(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (std::size_t t = next++; t < tasks.size(); t = next++) {
          try {
            run(t);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (std::thread& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }

  EvalReport report;
  report.ranker = config.model.ranker_name();
  report.metadata = config.model.metadata;
  report.config = config;
  report.folds = std::move(results);
  report.summary = summarize(report.folds);
  report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::vector<ConsistencyPoint> consistency_analysis(const std::vector<ModelRecord>& records, Criterion criterion,
                                                   std::span<const double> fractions) {
  const std::vector<CurvePair> pairs = pair_and_label(records, PairOrdering::kCanonical);
  std::vector<ConsistencyPoint> out;
  for (double fraction : fractions) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw DomainError("consistency: fraction must lie in (0, 1]");
    std::size_t agree = 0;
    for (const CurvePair& p : pairs) {
      const ModelRecord& a = records[p.left];
      const ModelRecord& b = records[p.right];
      const std::size_t at = observed_length(a.curve.size(), fraction) - 1;
      const bool prefix = a.curve.values[at] < b.curve.values[at];
      const bool final = criterion == Criterion::kLne ? a.final_lne < b.final_lne : a.final_wne < b.final_wne;
      agree += prefix == final;
    }
    out.push_back({fraction, pairs.empty() ? 0.0 : static_cast<double>(agree) / static_cast<double>(pairs.size()),
                   pairs.size()});
  }
  return out;
}

void write_report(const std::string& directory, const std::vector<EvalReport>& reports,
                  const std::vector<ModelRecord>& records) {
  namespace fs = std::filesystem;
  const fs::path root(directory);
  fs::create_directories(root / "plotdata");

  std::ostringstream csv;
  csv.precision(10);
  csv << "ranker,metadata,fraction,fold,auc,accuracy,pairs\n";
  for (const EvalReport& r : reports) {
    for (const FoldResult& f : r.folds) {
      csv << r.ranker << ',' << (r.metadata ? 1 : 0) << ',' << f.fraction << ',' << f.fold << ',' << f.test.auc << ','
          << f.test.accuracy << ',' << f.test.pairs << '\n';
    }
    for (const FractionSummary& s : r.summary) {
      csv << r.ranker << ',' << (r.metadata ? 1 : 0) << ',' << s.fraction << ",mean," << s.auc_mean << ','
          << s.accuracy_mean << ",\n";
      csv << r.ranker << ',' << (r.metadata ? 1 : 0) << ',' << s.fraction << ",sd," << s.auc_sd << ','
          << s.accuracy_sd << ",\n";
    }
  }
  write_text(root / "metrics.csv", csv.str());
  write_text(root / "report.json", nlohmann::json(reports).dump(2) + "\n");

  std::vector<double> grid;
  for (int i = 1; i <= 20; ++i) grid.push_back(0.05 * i);
  nlohmann::json consistency = nlohmann::json::object();
  for (auto [name, criterion] : {std::pair{"lne", Criterion::kLne}, std::pair{"wne", Criterion::kWne}}) {
    nlohmann::json points = nlohmann::json::array();
    for (const ConsistencyPoint& p : consistency_analysis(records, criterion, grid)) {
      points.push_back({{"fraction", p.fraction}, {"accuracy", p.accuracy}, {"pairs", p.pairs}});
    }
    consistency[name] = points;
  }
  write_text(root / "plotdata" / "consistency.json", consistency.dump(2) + "\n");

  nlohmann::json curves = nlohmann::json::array();
  for (std::size_t i = 0; i < records.size() && i < 40; ++i) {
    curves.push_back({{"model_id", records[i].model_id},
                      {"job_id", records[i].job_id},
                      {"lne", records[i].curve.values},
                      {"final_wne", records[i].final_wne}});
  }
  write_text(root / "plotdata" / "curves.json", curves.dump() + "\n");

  nlohmann::json table = nlohmann::json::array();
  for (const EvalReport& r : reports) {
    for (const FractionSummary& s : r.summary) {
      table.push_back({{"ranker", r.ranker},
                       {"metadata", r.metadata},
                       {"fraction", s.fraction},
                       {"auc_mean", s.auc_mean},
                       {"auc_sd", s.auc_sd},
                       {"accuracy_mean", s.accuracy_mean},
                       {"accuracy_sd", s.accuracy_sd}});
    }
  }
  write_text(root / "plotdata" / "metrics_by_fraction.json", table.dump(2) + "\n");
}

}  // namespace necurve
