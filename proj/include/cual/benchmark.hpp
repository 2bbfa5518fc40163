#pragma once

// Continual task streams, the simulated annotator, metrics and the
// multi-task experiment driver.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cual/loop.hpp"

namespace cual {

struct StreamSpec {
  std::size_t classes_per_task = 2;
  std::size_t num_tasks = 4;
  std::vector<ClassId> pretrain_classes;  // empty: every class not used by a task
  std::size_t ratio_old = 2;
  std::size_t ratio_new = 1;
  double holdout_fraction = 0.65;
  double eval_fraction = 0.2;
  double budget_fraction = 0.0125;
  std::uint64_t seed = 0;
};

struct TaskSplit {
  std::size_t index = 0;
  EmbeddingSet pool;  // task 0 labeled, later tasks unlabeled
  std::vector<ClassId> new_classes;
  std::size_t old_count = 0;
  std::size_t new_count = 0;
};

struct Stream {
  std::vector<TaskSplit> tasks;
  std::map<ClassId, EmbeddingSet> eval_sets;
  std::unordered_map<SampleId, ClassId> truth;

  /// Ground-truth classes introduced at or before task t.
  std::vector<ClassId> classes_through(std::size_t t) const {
    std::vector<ClassId> out;
    for (std::size_t k = 0; k <= t && k < tasks.size(); ++k)
      out.insert(out.end(), tasks[k].new_classes.begin(), tasks[k].new_classes.end());
    std::sort(out.begin(), out.end());
    return out;
  }
};

class StreamError : public Error {
 public:
  using Error::Error;
};

/// Splits a labeled dataset into a pretraining pool plus `num_tasks` pools.
/// Per class: a random eval_fraction goes to evaluation, holdout_fraction of
/// the rest is reserved as the source of unseen old-class samples, and the
/// remainder is the class's own pool share. Task t mixes its new classes'
/// shares with unused reserved samples of earlier classes at ratio_old :
/// ratio_new (new count rounded down to a multiple of ratio_new), drawing
/// round-robin across old classes.
inline Stream build_stream(const EmbeddingSet& dataset, const StreamSpec& spec) {
  if (!dataset.has_labels()) throw StreamError("build_stream: dataset must be labeled");
  if (spec.classes_per_task == 0) throw StreamError("build_stream: classes_per_task must be positive");
  if (spec.ratio_old == 0 || spec.ratio_new == 0) throw StreamError("build_stream: mixing ratio must be positive");
  if (!(spec.holdout_fraction > 0.0 && spec.holdout_fraction < 1.0))
    throw StreamError("build_stream: holdout_fraction must be in (0, 1)");
  if (!(spec.eval_fraction > 0.0 && spec.eval_fraction < 1.0))
    throw StreamError("build_stream: eval_fraction must be in (0, 1)");

  std::map<ClassId, std::vector<std::size_t>> rows_by_class;
  for (std::size_t i = 0; i < dataset.size(); ++i) rows_by_class[dataset.label(i)].push_back(i);

  std::vector<ClassId> pretrain = spec.pretrain_classes;
  std::vector<ClassId> remaining;
  const std::size_t consumed_by_tasks = spec.classes_per_task * spec.num_tasks;
  if (pretrain.empty()) {
    if (rows_by_class.size() <= consumed_by_tasks)
      throw StreamError("build_stream: " + std::to_string(rows_by_class.size()) + " classes cannot cover " +
                        std::to_string(spec.num_tasks) + " tasks of " + std::to_string(spec.classes_per_task) +
                        " plus a pretraining set");
    const std::size_t n_pre = rows_by_class.size() - consumed_by_tasks;
    for (const auto& [c, rows] : rows_by_class)
      (pretrain.size() < n_pre ? pretrain : remaining).push_back(c);
  } else {
    for (ClassId c : pretrain)
      if (!rows_by_class.contains(c)) throw StreamError("build_stream: pretrain class " + std::to_string(c) + " absent");
    for (const auto& [c, rows] : rows_by_class)
      if (std::find(pretrain.begin(), pretrain.end(), c) == pretrain.end()) remaining.push_back(c);
    std::sort(pretrain.begin(), pretrain.end());
  }
  if (pretrain.empty()) throw StreamError("build_stream: no pretraining classes");
  if (remaining.size() < consumed_by_tasks)
    throw StreamError("build_stream: insufficient classes: " + std::to_string(spec.num_tasks) + " tasks x " +
                      std::to_string(spec.classes_per_task) + " need " + std::to_string(consumed_by_tasks) +
                      " non-pretraining classes, have " + std::to_string(remaining.size()));

  Rng rng(derive_seed(spec.seed, "stream"));
  Stream stream;
  std::map<ClassId, std::vector<std::size_t>> share;
  std::map<ClassId, std::vector<std::size_t>> reserve;
  for (auto& [c, rows] : rows_by_class) {
    rng.shuffle(rows);
    const auto n_eval = static_cast<std::size_t>(std::floor(spec.eval_fraction * static_cast<double>(rows.size())));
    const std::size_t rest = rows.size() - n_eval;
    const auto n_hold = static_cast<std::size_t>(std::floor(spec.holdout_fraction * static_cast<double>(rest)));
    if (n_eval == 0) throw StreamError("build_stream: class " + std::to_string(c) + " too small for an eval split");
    std::vector<std::size_t> ev(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_eval));
    std::sort(ev.begin(), ev.end());
    stream.eval_sets.emplace(c, dataset.subset(ev));
    reserve[c].assign(rows.begin() + static_cast<std::ptrdiff_t>(n_eval),
                      rows.begin() + static_cast<std::ptrdiff_t>(n_eval + n_hold));
    share[c].assign(rows.begin() + static_cast<std::ptrdiff_t>(n_eval + n_hold), rows.end());
  }
  for (std::size_t i = 0; i < dataset.size(); ++i) stream.truth.emplace(dataset.id(i), dataset.label(i));

  // Task 0: fully labeled pretraining pool.
  {
    TaskSplit t0;
    t0.index = 0;
    t0.new_classes = pretrain;
    std::vector<std::size_t> rows;
    for (ClassId c : pretrain) rows.insert(rows.end(), share[c].begin(), share[c].end());
    std::sort(rows.begin(), rows.end());
    t0.pool = dataset.subset(rows);
    t0.new_count = rows.size();
    stream.tasks.push_back(std::move(t0));
  }

  std::vector<ClassId> learned = pretrain;
  std::map<ClassId, std::size_t> reserve_used;
  for (std::size_t t = 1; t <= spec.num_tasks; ++t) {
    TaskSplit task;
    task.index = t;
    task.new_classes.assign(remaining.begin() + static_cast<std::ptrdiff_t>((t - 1) * spec.classes_per_task),
                            remaining.begin() + static_cast<std::ptrdiff_t>(t * spec.classes_per_task));
    std::vector<std::size_t> new_rows;
    for (ClassId c : task.new_classes) new_rows.insert(new_rows.end(), share[c].begin(), share[c].end());
    const std::size_t units = new_rows.size() / spec.ratio_new;
    const std::size_t n_new = units * spec.ratio_new;
    const std::size_t n_old = units * spec.ratio_old;
    if (n_new == 0) throw StreamError("build_stream: task " + std::to_string(t) + " has no new-class samples");
    std::sort(new_rows.begin(), new_rows.end());
    new_rows.resize(n_new);

    std::size_t available = 0;
    for (ClassId c : learned) available += reserve[c].size() - reserve_used[c];
    if (available < n_old) {
      const double achievable = static_cast<double>(available) / static_cast<double>(n_new);
      throw StreamError("build_stream: insufficient holdout samples for task " + std::to_string(t) + ": need " +
                        std::to_string(n_old) + " old-class samples, have " + std::to_string(available) +
                        " (achievable old:new ratio " + std::to_string(achievable) + ":1)");
    }
    std::vector<std::size_t> old_rows;
    while (old_rows.size() < n_old) {
      for (ClassId c : learned) {
        if (old_rows.size() == n_old) break;
        if (reserve_used[c] < reserve[c].size()) old_rows.push_back(reserve[c][reserve_used[c]++]);
      }
    }

    std::vector<std::size_t> rows = old_rows;
    rows.insert(rows.end(), new_rows.begin(), new_rows.end());
    rng.shuffle(rows);
    task.pool = dataset.subset(rows).without_labels();
    task.old_count = n_old;
    task.new_count = n_new;
    stream.tasks.push_back(std::move(task));
    learned.insert(learned.end(), stream.tasks.back().new_classes.begin(), stream.tasks.back().new_classes.end());
  }
  return stream;
}

/// Simulated annotator over the current task's pool. Every id returned
/// counts as one oracle call.
class StreamOracle {
 public:
  explicit StreamOracle(const Stream& stream) : stream_(&stream) {}

  void set_task(std::size_t t) {
    current_.clear();
    for (SampleId id : stream_->tasks.at(t).pool.ids()) current_.insert(id);
  }

  std::vector<ClassId> label(std::span<const SampleId> ids) {
    std::vector<ClassId> out;
    out.reserve(ids.size());
    for (SampleId id : ids) {
      if (!current_.contains(id)) throw Error("oracle: unknown sample id " + std::to_string(id));
      out.push_back(stream_->truth.at(id));
    }
    calls_ += ids.size();
    return out;
  }

  std::size_t calls() const { return calls_; }

  /// Ground truth for metrics; not an oracle call.
  ClassId truth(SampleId id) const { return stream_->truth.at(id); }

 private:
  const Stream* stream_;
  std::unordered_set<SampleId> current_;
  std::size_t calls_ = 0;
};

struct AccuracyReport {
  double macro = 0.0;  // mean of per-class accuracies
  double micro = 0.0;  // pooled over samples
  std::map<ClassId, double> per_class;
};

/// Accuracy over the given classes' evaluation sets. A class the head cannot
/// output scores 0.
inline AccuracyReport cumulative_accuracy(const LongTermHead& head, const std::map<ClassId, EmbeddingSet>& eval_sets,
                                          const std::vector<ClassId>& classes) {
  if (classes.empty()) throw Error("cumulative_accuracy: no classes");
  AccuracyReport r;
  std::size_t correct_total = 0;
  std::size_t n_total = 0;
  for (ClassId c : classes) {
    auto it = eval_sets.find(c);
    if (it == eval_sets.end() || it->second.empty())
      throw Error("cumulative_accuracy: missing evaluation set for class " + std::to_string(c));
    const auto pred = predict_classes(head, it->second);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == it->second.label(i)) ++correct;
    r.per_class[c] = static_cast<double>(correct) / static_cast<double>(pred.size());
    correct_total += correct;
    n_total += pred.size();
  }
  for (const auto& [c, a] : r.per_class) r.macro += a;
  r.macro /= static_cast<double>(classes.size());
  r.micro = static_cast<double>(correct_total) / static_cast<double>(n_total);
  return r;
}

// ---------------------------------------------------------------------------
// Strategies

enum class Strategy {
  Cual,
  CualAlTop,
  CualAlRand,
  CualAlOneshot,
  CualOnlyAl,
  ErEnt,
  ErRand,
  ErEntOneshot,
  PseudoErEnt,
};

inline constexpr std::array<std::pair<Strategy, std::string_view>, 9> kStrategyNames{{
    {Strategy::Cual, "CUAL"},
    {Strategy::CualAlTop, "CUAL-AL-Top"},
    {Strategy::CualAlRand, "CUAL-AL-Rand"},
    {Strategy::CualAlOneshot, "CUAL-AL-oneshot"},
    {Strategy::CualOnlyAl, "CUAL-only-AL"},
    {Strategy::ErEnt, "ER-Ent"},
    {Strategy::ErRand, "ER-Rand"},
    {Strategy::ErEntOneshot, "ER-Ent-oneshot"},
    {Strategy::PseudoErEnt, "PseudoER-Ent"},
}};

inline std::string_view to_string(Strategy s) {
  for (const auto& [k, name] : kStrategyNames)
    if (k == s) return name;
  return "?";
}

inline Strategy parse_strategy(std::string_view name) {
  for (const auto& [k, n] : kStrategyNames)
    if (n == name) return k;
  // Short aliases used by sweeps: AL-Top, only-AL, ...
  for (const auto& [k, n] : kStrategyNames)
    if (n.size() > 5 && n.substr(0, 5) == "CUAL-" && n.substr(5) == name) return k;
  throw Error("unknown strategy '" + std::string(name) + "'");
}

inline LoopPolicy policy_for(Strategy s) {
  LoopPolicy p;
  switch (s) {
    case Strategy::Cual:
      break;
    case Strategy::CualAlTop:
      p.query = QueryRule::Top;
      break;
    case Strategy::CualAlRand:
      p.first_query = QueryRule::Random;
      p.query = QueryRule::Random;
      break;
    case Strategy::CualAlOneshot:
      p.one_shot = true;
      break;
    case Strategy::CualOnlyAl:
      p.pseudo_label = false;
      break;
    case Strategy::ErEnt:
      p = {ScoreSource::Entropy, QueryRule::Ambiguous, QueryRule::Ambiguous, false, false};
      break;
    case Strategy::ErRand:
      p = {ScoreSource::Entropy, QueryRule::Random, QueryRule::Random, false, false};
      break;
    case Strategy::ErEntOneshot:
      p = {ScoreSource::Entropy, QueryRule::Ambiguous, QueryRule::Ambiguous, false, true};
      break;
    case Strategy::PseudoErEnt:
      p = {ScoreSource::Entropy, QueryRule::Ambiguous, QueryRule::Ambiguous, true, false};
      break;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentConfig {
  LoopConfig loop;
  PretrainConfig pretrain;
};

struct TaskMetrics {
  std::size_t task = 0;
  double cumulative_accuracy = 0.0;
  double cumulative_accuracy_micro = 0.0;
  std::size_t labels_used = 0;
  std::size_t pseudo_labels_used = 0;
  std::optional<double> pseudo_label_precision;  // absent when nothing was pseudo-labeled
  double discovery_recall = 0.0;
  std::vector<ClassId> new_classes;
  std::vector<ClassId> discovered;
  double wall_seconds = 0.0;
};

struct ExperimentResult {
  Strategy strategy = Strategy::Cual;
  std::vector<TaskMetrics> tasks;
  std::vector<IterationTrace> trace;
  std::vector<std::uint64_t> pool_digests;  // per task, for pool-identity audits
  std::size_t oracle_calls = 0;

  /// Mean cumulative accuracy over the post-pretraining tasks.
  double averaged_accuracy() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& t : tasks)
      if (t.task > 0) {
        sum += t.cumulative_accuracy;
        ++n;
      }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  }

  double final_accuracy() const { return tasks.empty() ? 0.0 : tasks.back().cumulative_accuracy; }

  double overall_discovery_recall() const {
    std::size_t found = 0;
    std::size_t total = 0;
    for (const auto& t : tasks)
      if (t.task > 0) {
        total += t.new_classes.size();
        for (ClassId c : t.discovered)
          if (std::find(t.new_classes.begin(), t.new_classes.end(), c) != t.new_classes.end()) ++found;
      }
    return total == 0 ? 1.0 : static_cast<double>(found) / static_cast<double>(total);
  }
};

inline std::uint64_t pool_digest(const EmbeddingSet& pool) {
  std::vector<SampleId> ids = pool.ids();
  std::sort(ids.begin(), ids.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (SampleId id : ids) h = mix64(h ^ id);
  return h;
}

/// Pretrains on task 0, then runs every task under `strategy`. All randomness
/// derives from cfg.loop.seed; the stream is built from spec.seed.
inline ExperimentResult run_experiment(const EmbeddingSet& dataset, const StreamSpec& spec, Strategy strategy,
                                       const ExperimentConfig& cfg) {
  using Clock = std::chrono::steady_clock;
  const Stream stream = build_stream(dataset, spec);
  ExperimentResult result;
  result.strategy = strategy;
  LoopConfig loop = cfg.loop;
  loop.budget_fraction = spec.budget_fraction;

  auto t0 = Clock::now();
  AgentState agent = pretrain_agent(stream.tasks[0].pool, loop, cfg.pretrain);
  {
    TaskMetrics m;
    m.task = 0;
    const auto acc = cumulative_accuracy(agent.head, stream.eval_sets, stream.classes_through(0));
    m.cumulative_accuracy = acc.macro;
    m.cumulative_accuracy_micro = acc.micro;
    m.new_classes = stream.tasks[0].new_classes;
    m.discovered = m.new_classes;
    m.discovery_recall = 1.0;
    m.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    result.tasks.push_back(std::move(m));
    result.pool_digests.push_back(pool_digest(stream.tasks[0].pool));
  }

  StreamOracle oracle(stream);
  const LoopPolicy policy = policy_for(strategy);
  for (std::size_t t = 1; t < stream.tasks.size(); ++t) {
    const auto start = Clock::now();
    const TaskSplit& split = stream.tasks[t];
    oracle.set_task(t);
    TaskOutcome out = run_task(agent, split.pool, oracle, loop, policy, t);

    TaskMetrics m;
    m.task = t;
    const auto acc = cumulative_accuracy(agent.head, stream.eval_sets, stream.classes_through(t));
    m.cumulative_accuracy = acc.macro;
    m.cumulative_accuracy_micro = acc.micro;
    m.labels_used = out.labels_spent;
    m.pseudo_labels_used = out.pseudo_labels;
    if (!out.state.pl_store.empty()) {
      std::size_t right = 0;
      for (const auto& [id, c] : out.state.pl_store)
        if (oracle.truth(id) == c) ++right;
      m.pseudo_label_precision = static_cast<double>(right) / static_cast<double>(out.state.pl_store.size());
    }
    m.new_classes = split.new_classes;
    m.discovered = out.discovered;
    std::size_t found = 0;
    for (ClassId c : out.discovered)
      if (std::find(split.new_classes.begin(), split.new_classes.end(), c) != split.new_classes.end()) ++found;
    m.discovery_recall = static_cast<double>(found) / static_cast<double>(split.new_classes.size());
    m.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    result.tasks.push_back(std::move(m));
    result.trace.insert(result.trace.end(), out.trace.begin(), out.trace.end());
    result.pool_digests.push_back(pool_digest(split.pool));
  }
  result.oracle_calls = oracle.calls();
  return result;
}

}  // namespace cual
