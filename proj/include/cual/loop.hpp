#pragma once

// The per-task active-learning inner loop.
//
// i = 0: score the pool against frozen old-class subspaces, calibrate the
//        threshold on the validation store, query uniformly above it, and
//        seed novel classes from the oracle's answers.
// i > 0: ratio scores through the short-term head; pseudo-label the most
//        confident fraction above the threshold, actively label the samples
//        nearest the threshold, refit novel subspaces and retrain the head.
// end:   final novel subspaces, validation holdout, replay update of the
//        long-term head, buffer insert, promotion of novel classes to old.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cual/heads.hpp"
#include "cual/replay.hpp"
#include "cual/rng.hpp"
#include "cual/scoring.hpp"
#include "cual/subspace.hpp"

namespace cual {

/// Anything that can reveal the labels of pool samples. One call per id.
template <class O>
concept LabelOracle = requires(O o, std::span<const SampleId> ids) {
  { o.label(ids) } -> std::convertible_to<std::vector<ClassId>>;
};

enum class ScoreSource { Reconstruction, Entropy };
enum class QueryRule { UniformAboveThreshold, Ambiguous, Top, Random };

/// Which pieces of the loop are active. The default is the full method;
/// ablations and entropy baselines flip individual switches.
struct LoopPolicy {
  ScoreSource score = ScoreSource::Reconstruction;
  QueryRule first_query = QueryRule::UniformAboveThreshold;
  QueryRule query = QueryRule::Ambiguous;
  bool pseudo_label = true;
  bool one_shot = false;  // whole budget spent at i = 0
};

struct LoopConfig {
  double alpha = 0.20;
  double k_std = 2.0;
  std::size_t max_iterations = 5;
  double budget_fraction = 0.0125;
  double eps_den = kDefaultEpsDen;
  double eps_amb = kDefaultEpsAmb;
  double variance_retained = kDefaultVarianceRetained;
  double holdout_rate = 0.001;
  std::size_t holdout_min = 5;
  TrainConfig short_train = TrainConfig::short_term();
  TrainConfig long_train = TrainConfig::long_term();
  LossWeights loss_weights{};
  std::uint64_t seed = 0;

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw Error("alpha must be in (0, 1]");
    if (max_iterations < 1) throw Error("max_iterations must be >= 1");
    if (!(k_std >= 0.0)) throw Error("k_std must be >= 0");
    if (!(budget_fraction >= 0.0 && budget_fraction < 1.0)) throw Error("budget_fraction must be in [0, 1)");
    if (!(eps_den > 0.0) || !(eps_amb > 0.0)) throw Error("eps_den and eps_amb must be > 0");
    if (!(holdout_rate >= 0.0 && holdout_rate < 1.0)) throw Error("holdout_rate must be in [0, 1)");
    loss_weights.validate();
  }
};

/// Persistent learner state carried across tasks.
struct AgentState {
  SubspaceRegistry registry;
  LongTermHead head;
  ReplayBuffer buffer{1};
  EmbeddingSet validation;  // labeled in-distribution holdout

  std::vector<ClassId> old_classes() const {
    std::vector<ClassId> out;
    for (const auto& [id, s] : registry.old_classes()) out.push_back(id);
    return out;
  }
};

struct TaskState {
  std::size_t task_index = 0;
  std::map<SampleId, ClassId> al_store;
  std::map<SampleId, ClassId> pl_store;
  std::vector<SampleId> pl_order;  // pseudo-labels in the order they were assigned
  std::size_t budget_total = 0;
  std::size_t budget_used = 0;
  std::size_t iteration = 0;
  std::set<ClassId> discovered_classes;
  std::optional<ShortTermHead> short_head;
  std::vector<double> frozen_numerators;

  std::size_t budget_remaining() const { return budget_total - budget_used; }
  bool is_labeled(SampleId id) const { return al_store.contains(id) || pl_store.contains(id); }
};

struct IterationTrace {
  std::size_t task = 0;
  std::size_t iteration = 0;
  double threshold = 0.0;
  std::size_t above_threshold = 0;
  std::size_t queried = 0;
  std::size_t queried_novel = 0;
  std::size_t pseudo_labeled = 0;
  std::vector<ClassId> discovered;
  std::size_t budget_used = 0;
  std::size_t budget_total = 0;
  std::string event;
};

struct TaskOutcome {
  TaskState state;
  std::vector<ClassId> discovered;
  std::size_t labels_spent = 0;
  std::size_t pseudo_labels = 0;
  bool model_updated = false;
  std::vector<IterationTrace> trace;
};

// ---------------------------------------------------------------------------
// Budget

/// Oracle calls allowed for a pool: ceil(fraction * size), at least 1 when
/// fraction > 0.
inline std::size_t task_budget(std::size_t pool_size, double fraction) {
  if (fraction <= 0.0 || pool_size == 0) return 0;
  const double raw = fraction * static_cast<double>(pool_size);
  const auto b = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::max<std::size_t>(b, 1);
}

/// Even split across iterations, remainder to iteration 0.
inline std::size_t allocate_quota(std::size_t budget_total, std::size_t max_iterations, std::size_t i) {
  if (max_iterations == 0 || i >= max_iterations) throw Error("allocate_quota: iteration out of range");
  const std::size_t base = budget_total / max_iterations;
  return i == 0 ? base + budget_total % max_iterations : base;
}

// ---------------------------------------------------------------------------
// Selection rules

/// Uniform draw without replacement from records scoring strictly above the
/// threshold. Returned ids are sorted ascending.
inline std::vector<SampleId> initial_query(std::span<const ScoreRecord> records, const Threshold& threshold,
                                           std::size_t quota, std::uint64_t seed,
                                           const std::unordered_set<SampleId>& exclude = {}) {
  std::vector<SampleId> above;
  for (const auto& r : records)
    if (r.score > threshold.value && !exclude.contains(r.sample_id)) above.push_back(r.sample_id);
  Rng rng(derive_seed(seed, "initial-query"));
  std::vector<SampleId> out;
  for (std::size_t k : rng.sample_indices(above.size(), quota)) out.push_back(above[k]);
  std::sort(out.begin(), out.end());
  return out;
}

/// The `quota` most ambiguous samples, i.e. highest 1 / max((s - T)^2, eps);
/// ties by lower sample id.
inline std::vector<SampleId> ambiguous_query(std::span<const ScoreRecord> records, const Threshold& threshold,
                                             std::size_t quota, const std::unordered_set<SampleId>& exclude,
                                             double eps_amb = kDefaultEpsAmb) {
  std::vector<std::pair<double, SampleId>> keyed;
  for (const auto& r : records)
    if (!exclude.contains(r.sample_id)) keyed.emplace_back(ambiguity_key(r.score, threshold, eps_amb), r.sample_id);
  const std::size_t k = std::min(quota, keyed.size());
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(k), keyed.end());
  std::vector<SampleId> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(keyed[i].second);
  return out;
}

/// Highest scores first; ties by lower sample id.
inline std::vector<SampleId> top_query(std::span<const ScoreRecord> records, std::size_t quota,
                                       const std::unordered_set<SampleId>& exclude) {
  std::vector<std::pair<double, SampleId>> keyed;
  for (const auto& r : records)
    if (!exclude.contains(r.sample_id)) keyed.emplace_back(-r.score, r.sample_id);
  const std::size_t k = std::min(quota, keyed.size());
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(k), keyed.end());
  std::vector<SampleId> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(keyed[i].second);
  return out;
}

/// Uniform draw from every non-excluded record, ignoring scores.
inline std::vector<SampleId> random_query(std::span<const ScoreRecord> records, std::size_t quota,
                                          std::uint64_t seed, const std::unordered_set<SampleId>& exclude) {
  std::vector<SampleId> pool;
  for (const auto& r : records)
    if (!exclude.contains(r.sample_id)) pool.push_back(r.sample_id);
  Rng rng(derive_seed(seed, "random-query"));
  std::vector<SampleId> out;
  for (std::size_t k : rng.sample_indices(pool.size(), quota)) out.push_back(pool[k]);
  std::sort(out.begin(), out.end());
  return out;
}

/// Among non-excluded records above the threshold, the floor(alpha * count)
/// highest scores, each labeled with its predicted novel class.
inline std::vector<std::pair<SampleId, ClassId>> pseudo_label_select(std::span<const ScoreRecord> records,
                                                                     const Threshold& threshold, double alpha,
                                                                     const std::unordered_set<SampleId>& exclude = {}) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw Error("pseudo_label_select: alpha must be in (0, 1]");
  std::vector<const ScoreRecord*> above;
  for (const auto& r : records)
    if (r.score > threshold.value && !exclude.contains(r.sample_id)) above.push_back(&r);
  const auto take = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(above.size()) + 1e-9));
  std::sort(above.begin(), above.end(), [](const ScoreRecord* a, const ScoreRecord* b) {
    if (a->score != b->score) return a->score > b->score;
    return a->sample_id < b->sample_id;
  });
  std::vector<std::pair<SampleId, ClassId>> out;
  for (std::size_t i = 0; i < take; ++i) {
    if (!above[i]->predicted_novel_class) throw Error("pseudo_label_select: record has no predicted class");
    out.emplace_back(above[i]->sample_id, *above[i]->predicted_novel_class);
  }
  return out;
}

struct StopDecision {
  bool stop = false;
  bool query_allowed = true;  // false once the label budget is gone
  std::string reason;
};

/// Stop when nothing unlabeled scores above the threshold or the iteration
/// cap is reached. An exhausted budget only disables querying.
inline StopDecision check_stop(std::span<const ScoreRecord> records, const Threshold& threshold,
                               std::size_t budget_remaining, std::size_t iteration, std::size_t max_iterations,
                               const std::unordered_set<SampleId>& exclude = {}) {
  StopDecision d;
  if (iteration >= max_iterations) {
    d.stop = true;
    d.reason = "iteration-cap";
    return d;
  }
  const bool any_above = std::any_of(records.begin(), records.end(), [&](const ScoreRecord& r) {
    return r.score > threshold.value && !exclude.contains(r.sample_id);
  });
  if (!any_above) {
    d.stop = true;
    d.reason = "nothing-above-threshold";
    return d;
  }
  d.query_allowed = budget_remaining > 0;
  if (!d.query_allowed) d.reason = "budget-exhausted";
  return d;
}

// ---------------------------------------------------------------------------
// Pretraining (task 0)

struct PretrainConfig {
  std::size_t hidden_size = kDefaultHiddenSize;
  std::size_t buffer_capacity = 2500;
};

namespace detail {

inline std::vector<std::size_t> rows_of_class(const EmbeddingSet& set, ClassId c) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < set.size(); ++i)
    if (set.label(i) == c) rows.push_back(i);
  return rows;
}

inline std::size_t holdout_count(std::size_t n, const LoopConfig& cfg) {
  const auto by_rate = static_cast<std::size_t>(std::ceil(cfg.holdout_rate * static_cast<double>(n) - 1e-9));
  return std::min(std::max(by_rate, cfg.holdout_min), n / 2);
}

}  // namespace detail

/// Supervised start: per class, hold a few samples out for the validation
/// store, fit frozen subspaces on the rest, train the long-term head and fill
/// the replay buffer.
inline AgentState pretrain_agent(const EmbeddingSet& labeled, const LoopConfig& cfg, const PretrainConfig& pcfg) {
  cfg.validate();
  if (labeled.empty() || !labeled.has_labels()) throw Error("pretrain: need a non-empty labeled set");
  std::set<ClassId> classes(labeled.labels().begin(), labeled.labels().end());

  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> val_rows;
  AgentState agent;
  agent.buffer = ReplayBuffer(pcfg.buffer_capacity);
  Rng rng(derive_seed(cfg.seed, "pretrain-holdout"));
  for (ClassId c : classes) {
    auto rows = detail::rows_of_class(labeled, c);
    rng.shuffle(rows);
    const std::size_t hold = detail::holdout_count(rows.size(), cfg);
    val_rows.insert(val_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(hold));
    std::vector<std::size_t> fit(rows.begin() + static_cast<std::ptrdiff_t>(hold), rows.end());
    std::sort(fit.begin(), fit.end());
    agent.registry.add_old(fit_subspace(labeled.subset(fit), c, cfg.variance_retained));
    train_rows.insert(train_rows.end(), fit.begin(), fit.end());
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(val_rows.begin(), val_rows.end());
  const EmbeddingSet train = labeled.subset(train_rows);
  agent.validation = labeled.subset(val_rows);

  agent.head = init_long_head(std::vector<ClassId>(classes.begin(), classes.end()), labeled.dim(), pcfg.hidden_size,
                              derive_seed(cfg.seed, "pretrain-head"));
  TrainConfig tc = cfg.long_train;
  tc.seed = derive_seed(cfg.seed, "pretrain-train");
  agent.head = train_head(std::move(agent.head), train, tc);
  agent.buffer.insert_balanced(train, Provenance::Active);
  return agent;
}

// ---------------------------------------------------------------------------
// Task loop

namespace detail {

struct PoolIndex {
  std::unordered_map<SampleId, std::size_t> row_of;

  explicit PoolIndex(const EmbeddingSet& pool) {
    for (std::size_t i = 0; i < pool.size(); ++i) row_of.emplace(pool.id(i), i);
  }

  EmbeddingSet gather(const EmbeddingSet& pool, const std::vector<std::pair<SampleId, ClassId>>& items) const {
    std::vector<std::size_t> rows;
    std::vector<ClassId> labels;
    for (const auto& [id, c] : items) {
      rows.push_back(row_of.at(id));
      labels.push_back(c);
    }
    return pool.subset(rows).with_labels(std::move(labels));
  }
};

inline std::unordered_set<SampleId> labeled_ids(const TaskState& st) {
  std::unordered_set<SampleId> out;
  for (const auto& [id, c] : st.al_store) out.insert(id);
  for (const auto& [id, c] : st.pl_store) out.insert(id);
  return out;
}

inline std::vector<ScoreRecord> plain_records(const EmbeddingSet& set, const std::vector<double>& scores,
                                              std::size_t iteration) {
  std::vector<ScoreRecord> out(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    out[i].sample_id = set.id(i);
    out[i].numerator = scores[i];
    out[i].score = scores[i];
    out[i].iteration = iteration;
  }
  return out;
}

}  // namespace detail

/// Runs one task of the continual stream against `agent`, mutating it in
/// place, and reports what was learned. The pool must carry no labels; the
/// oracle is the only label source.
template <LabelOracle Oracle>
TaskOutcome run_task(AgentState& agent, const EmbeddingSet& pool, Oracle& oracle, const LoopConfig& cfg,
                     const LoopPolicy& policy = {}, std::size_t task_index = 1) {
  cfg.validate();
  if (agent.registry.old_classes().empty()) throw Error("run_task: agent has no old classes");
  if (pool.empty()) throw Error("run_task: empty pool");
  if (pool.has_labels()) throw Error("run_task: pool must be unlabeled");
  if (pool.dim() != agent.head.input_dim()) throw Error("run_task: pool dimension does not match the agent");
  if (agent.validation.empty()) throw Error("run_task: empty validation store");

  const std::string tag = "task-" + std::to_string(task_index);
  const std::uint64_t task_seed = derive_seed(cfg.seed, tag);
  const detail::PoolIndex index(pool);
  const std::vector<ClassId> old_ids = agent.old_classes();
  const std::set<ClassId> old_set(old_ids.begin(), old_ids.end());
  const bool reconstruction = policy.score == ScoreSource::Reconstruction;

  TaskOutcome outcome;
  TaskState& st = outcome.state;
  st.task_index = task_index;
  st.budget_total = task_budget(pool.size(), cfg.budget_fraction);
  const std::size_t iterations = policy.one_shot && !policy.pseudo_label ? 1 : cfg.max_iterations;

  auto trace = [&](const Threshold& t, std::size_t above, std::size_t queried, std::size_t novel, std::size_t pl,
                   std::string event) {
    IterationTrace r;
    r.task = task_index;
    r.iteration = st.iteration;
    r.threshold = t.value;
    r.above_threshold = above;
    r.queried = queried;
    r.queried_novel = novel;
    r.pseudo_labeled = pl;
    r.discovered.assign(st.discovered_classes.begin(), st.discovered_classes.end());
    r.budget_used = st.budget_used;
    r.budget_total = st.budget_total;
    r.event = std::move(event);
    outcome.trace.push_back(std::move(r));
  };

  auto count_above = [&](const std::vector<ScoreRecord>& recs, const Threshold& t) {
    std::size_t n = 0;
    for (const auto& r : recs)
      if (r.score > t.value && !st.is_labeled(r.sample_id)) ++n;
    return n;
  };

  std::size_t carry = 0;
  auto quota_for = [&](std::size_t i) {
    std::size_t q = policy.one_shot ? (i == 0 ? st.budget_total : 0) : allocate_quota(st.budget_total, iterations, i);
    q += carry;
    return std::min(q, st.budget_remaining());
  };

  auto ask_oracle = [&](const std::vector<SampleId>& ids) {
    std::size_t novel = 0;
    if (ids.empty()) return novel;
    const std::vector<ClassId> labels = oracle.label(std::span<const SampleId>(ids));
    if (labels.size() != ids.size()) throw Error("oracle returned the wrong number of labels");
    st.budget_used += ids.size();
    for (std::size_t k = 0; k < ids.size(); ++k) {
      st.al_store.emplace(ids[k], labels[k]);
      if (!old_set.contains(labels[k])) {
        st.discovered_classes.insert(labels[k]);
        ++novel;
      }
    }
    return novel;
  };

  auto run_query = [&](QueryRule rule, const std::vector<ScoreRecord>& recs, const Threshold& t, std::size_t quota,
                       std::size_t i) {
    const auto exclude = detail::labeled_ids(st);
    const std::uint64_t s = derive_seed(task_seed, "query-" + std::to_string(i));
    switch (rule) {
      case QueryRule::UniformAboveThreshold:
        return initial_query(recs, t, quota, s, exclude);
      case QueryRule::Ambiguous:
        return ambiguous_query(recs, t, quota, exclude, cfg.eps_amb);
      case QueryRule::Top:
        return top_query(recs, quota, exclude);
      case QueryRule::Random:
        return random_query(recs, quota, s, exclude);
    }
    return std::vector<SampleId>{};
  };

  // Labeled samples of novel classes, AL first then PL (in assignment order).
  auto novel_items = [&] {
    std::vector<std::pair<SampleId, ClassId>> items;
    for (const auto& [id, c] : st.al_store)
      if (!old_set.contains(c)) items.emplace_back(id, c);
    for (SampleId id : st.pl_order) {
      const ClassId c = st.pl_store.at(id);
      if (!old_set.contains(c)) items.emplace_back(id, c);
    }
    return items;
  };

  auto fit_novel_subspaces = [&](const std::vector<std::pair<SampleId, ClassId>>& items) {
    SubspaceRegistry::Map fresh;
    for (ClassId c : st.discovered_classes) {
      std::vector<std::pair<SampleId, ClassId>> mine;
      for (const auto& it : items)
        if (it.second == c) mine.push_back(it);
      if (mine.empty()) continue;
      fresh.emplace(c, fit_subspace(index.gather(pool, mine), c, cfg.variance_retained));
    }
    agent.registry.set_new(std::move(fresh));
  };

  // Short head over the discovered classes; re-initialized when the class
  // set changed, warm-started otherwise.
  auto train_short = [&](std::size_t i) {
    const std::vector<ClassId> classes(st.discovered_classes.begin(), st.discovered_classes.end());
    if (!st.short_head || st.short_head->class_ids != classes)
      st.short_head = init_short_head(classes, pool.dim(), derive_seed(task_seed, "short-init-" + std::to_string(i)));
    TrainConfig tc = cfg.short_train;
    tc.seed = derive_seed(task_seed, "short-train-" + std::to_string(i));
    st.short_head = train_head(std::move(*st.short_head), index.gather(pool, novel_items()), tc);
  };

  // Entropy baselines score with the long head expanded by the classes found
  // so far and retrained on everything labeled in this task.
  LongTermHead working = agent.head;
  auto retrain_working = [&](std::size_t i) {
    std::vector<ClassId> extra;
    for (ClassId c : st.discovered_classes)
      if (std::find(agent.head.class_ids.begin(), agent.head.class_ids.end(), c) == agent.head.class_ids.end())
        extra.push_back(c);
    std::vector<std::pair<SampleId, ClassId>> al(st.al_store.begin(), st.al_store.end());
    std::vector<std::pair<SampleId, ClassId>> pl;
    for (SampleId id : st.pl_order) pl.emplace_back(id, st.pl_store.at(id));
    LongTermHead h = expand_long_head(agent.head, extra, derive_seed(task_seed, "working-expand"));
    TrainConfig tc = cfg.long_train;
    tc.epochs = cfg.short_train.epochs;
    tc.seed = derive_seed(task_seed, "working-train-" + std::to_string(i));
    working = replay_update(std::move(h), agent.buffer, index.gather(pool, al), index.gather(pool, pl),
                            cfg.loss_weights, tc);
  };

  auto entropy_threshold = [&] {
    return compute_threshold(entropy_scores(working, agent.validation), cfg.k_std);
  };

  // (a) scores and threshold for the task
  Threshold threshold;
  std::vector<ScoreRecord> records;
  if (reconstruction) {
    st.frozen_numerators = old_class_numerators(agent.registry, pool);
    threshold = compute_threshold(old_class_numerators(agent.registry, agent.validation), cfg.k_std);
    records = detail::plain_records(pool, st.frozen_numerators, 0);
  } else {
    threshold = entropy_threshold();
    records = detail::plain_records(pool, entropy_scores(working, pool), 0);
  }

  // (b) iteration 0
  {
    const std::size_t quota = quota_for(0);
    const auto ids = run_query(policy.first_query, records, threshold, quota, 0);
    carry = quota - ids.size();
    const std::size_t novel = ask_oracle(ids);
    trace(threshold, count_above(records, threshold), ids.size(), novel, 0, "initial-query");
  }

  if (reconstruction) {
    if (st.discovered_classes.empty()) {
      outcome.trace.back().event = "no-novel-classes";
      outcome.labels_spent = st.budget_used;
      return outcome;
    }
    fit_novel_subspaces(novel_items());
    train_short(0);
  } else if (!st.al_store.empty()) {
    retrain_working(0);
  }

  // (c) iterations 1..I-1
  for (std::size_t i = 1;; ++i) {
    st.iteration = i;
    if (reconstruction) {
      records = score_iter(agent.registry, *st.short_head, pool, st.frozen_numerators, i, cfg.eps_den);
    } else {
      threshold = entropy_threshold();
      auto pred = predict_classes(working, pool);
      records = detail::plain_records(pool, entropy_scores(working, pool), i);
      for (std::size_t r = 0; r < records.size(); ++r) records[r].predicted_novel_class = pred[r];
    }

    const StopDecision stop = check_stop(records, threshold, st.budget_remaining(), i, iterations,
                                         detail::labeled_ids(st));
    if (stop.stop) {
      trace(threshold, count_above(records, threshold), 0, 0, 0, "stop:" + stop.reason);
      break;
    }
    if (!policy.pseudo_label && !stop.query_allowed) {
      trace(threshold, count_above(records, threshold), 0, 0, 0, "stop:budget-exhausted");
      break;
    }
    const std::size_t above = count_above(records, threshold);

    std::size_t pl_added = 0;
    if (policy.pseudo_label) {
      std::vector<std::pair<SampleId, ClassId>> picks;
      if (reconstruction) {
        picks = pseudo_label_select(records, threshold, cfg.alpha, detail::labeled_ids(st));
      } else {
        // Most confident = lowest entropy among samples below the threshold.
        std::vector<const ScoreRecord*> confident;
        const auto exclude = detail::labeled_ids(st);
        for (const auto& r : records)
          if (r.score <= threshold.value && !exclude.contains(r.sample_id)) confident.push_back(&r);
        std::sort(confident.begin(), confident.end(), [](const ScoreRecord* a, const ScoreRecord* b) {
          if (a->score != b->score) return a->score < b->score;
          return a->sample_id < b->sample_id;
        });
        const auto take =
            static_cast<std::size_t>(std::floor(cfg.alpha * static_cast<double>(confident.size()) + 1e-9));
        for (std::size_t k = 0; k < take; ++k)
          picks.emplace_back(confident[k]->sample_id, *confident[k]->predicted_novel_class);
      }
      for (const auto& [id, c] : picks) {
        st.pl_store.emplace(id, c);
        st.pl_order.push_back(id);
      }
      pl_added = picks.size();
    }

    const std::size_t quota = stop.query_allowed ? quota_for(i) : 0;
    const auto ids = run_query(policy.query, records, threshold, quota, i);
    carry = quota - ids.size();
    const std::size_t novel = ask_oracle(ids);

    if (reconstruction) {
      fit_novel_subspaces(novel_items());
      train_short(i);
    } else if (!st.al_store.empty() || !st.pl_store.empty()) {
      retrain_working(i);
    }
    trace(threshold, above, ids.size(), novel, pl_added, stop.query_allowed ? "iterate" : "pseudo-label-only");
  }

  // (d) consolidation
  outcome.labels_spent = st.budget_used;
  outcome.pseudo_labels = st.pl_store.size();
  outcome.discovered.assign(st.discovered_classes.begin(), st.discovered_classes.end());

  // Validation holdout from novelty predictions: PL first (most confident
  // first), then AL.
  std::unordered_set<SampleId> held_out;
  std::vector<std::pair<SampleId, ClassId>> val_items;
  for (ClassId c : st.discovered_classes) {
    std::vector<SampleId> candidates;
    for (SampleId id : st.pl_order)
      if (st.pl_store.at(id) == c) candidates.push_back(id);
    for (const auto& [id, lab] : st.al_store)
      if (lab == c) candidates.push_back(id);
    const std::size_t hold = detail::holdout_count(candidates.size(), cfg);
    for (std::size_t k = 0; k < hold; ++k) {
      held_out.insert(candidates[k]);
      val_items.emplace_back(candidates[k], c);
    }
  }

  std::vector<std::pair<SampleId, ClassId>> al_train;
  std::vector<std::pair<SampleId, ClassId>> pl_train;
  for (const auto& [id, c] : st.al_store)
    if (!held_out.contains(id)) al_train.emplace_back(id, c);
  for (SampleId id : st.pl_order)
    if (!held_out.contains(id)) pl_train.emplace_back(id, st.pl_store.at(id));

  // Final subspaces of the novel classes.
  SubspaceRegistry::Map final_subspaces;
  for (ClassId c : st.discovered_classes) {
    std::vector<std::pair<SampleId, ClassId>> mine;
    for (const auto& it : al_train)
      if (it.second == c) mine.push_back(it);
    for (const auto& it : pl_train)
      if (it.second == c) mine.push_back(it);
    if (mine.empty()) continue;
    final_subspaces.emplace(c, fit_subspace(index.gather(pool, mine), c, cfg.variance_retained));
  }
  std::vector<ClassId> promoted;
  for (const auto& [c, s] : final_subspaces) promoted.push_back(c);
  agent.registry.set_new(std::move(final_subspaces));

  const EmbeddingSet al_set = index.gather(pool, al_train);
  const EmbeddingSet pl_set = index.gather(pool, pl_train);
  if (!al_set.empty() || !pl_set.empty()) {
    LongTermHead expanded = expand_long_head(agent.head, promoted, derive_seed(task_seed, "long-expand"));
    TrainConfig tc = cfg.long_train;
    tc.seed = derive_seed(task_seed, "long-train");
    agent.head = replay_update(std::move(expanded), agent.buffer, al_set, pl_set, cfg.loss_weights, tc);
    agent.buffer.insert_balanced(al_set, Provenance::Active);
    agent.buffer.insert_balanced(pl_set, Provenance::Pseudo);
    outcome.model_updated = true;
  }
  if (!val_items.empty())
    agent.validation = EmbeddingSet::concat(agent.validation, index.gather(pool, val_items));
  agent.registry.promote_new();
  return outcome;
}

}  // namespace cual
