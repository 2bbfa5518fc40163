#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <unordered_map>

#include "cual/loop.hpp"
#include "oracles.hpp"

using namespace cual;

namespace {

std::vector<ScoreRecord> records_from(const std::vector<double>& scores, ClassId predicted = 1) {
  std::vector<ScoreRecord> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    ScoreRecord r;
    r.sample_id = 100 + i;
    r.score = scores[i];
    r.numerator = scores[i];
    r.predicted_novel_class = predicted;
    out.push_back(r);
  }
  return out;
}

struct MapOracle {
  std::unordered_map<SampleId, ClassId> truth;
  std::size_t calls = 0;
  std::vector<ClassId> label(std::span<const SampleId> ids) {
    std::vector<ClassId> out;
    for (SampleId id : ids) out.push_back(truth.at(id));
    calls += ids.size();
    return out;
  }
};
static_assert(LabelOracle<MapOracle>);

struct SmallWorld {
  EmbeddingSet pretrain;
  EmbeddingSet pool;
  MapOracle oracle;
};

// 4 latent classes in d=12: classes 0,1 pretrain; the pool mixes held-back
// samples of 0,1 with classes 2,3.
SmallWorld small_world(std::uint64_t seed) {
  const EmbeddingSet all = generate_synthetic({4, 12, 120, 8.0, seed, 3, 0.1});
  std::vector<std::size_t> pre, pool_rows;
  std::map<ClassId, std::size_t> seen;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const ClassId c = all.label(i);
    const std::size_t k = seen[c]++;
    if (c < 2) {
      (k < 80 ? pre : pool_rows).push_back(i);
    } else if (k < 40) {
      pool_rows.push_back(i);
    }
  }
  SmallWorld w;
  w.pretrain = all.subset(pre);
  const EmbeddingSet labeled_pool = all.subset(pool_rows);
  for (std::size_t i = 0; i < labeled_pool.size(); ++i) w.oracle.truth[labeled_pool.id(i)] = labeled_pool.label(i);
  w.pool = labeled_pool.without_labels();
  return w;
}

LoopConfig small_config() {
  LoopConfig cfg;
  cfg.budget_fraction = 0.05;
  cfg.seed = 3;
  return cfg;
}

PretrainConfig small_pretrain() { return {64, 500}; }

}  // namespace

TEST(Budget, CeilingWithFloorOfOne) {
  EXPECT_EQ(task_budget(504, 0.02), 11u);
  EXPECT_EQ(task_budget(100, 0.0125), 2u);
  EXPECT_EQ(task_budget(10, 0.001), 1u);
  EXPECT_EQ(task_budget(10, 0.0), 0u);
  EXPECT_EQ(task_budget(200, 0.05), 10u);
}

TEST(Budget, QuotasSumToBudgetWithRemainderFirst) {
  for (std::size_t b = 0; b < 40; ++b)
    for (std::size_t it = 1; it < 8; ++it) {
      std::size_t sum = 0;
      for (std::size_t i = 0; i < it; ++i) sum += allocate_quota(b, it, i);
      EXPECT_EQ(sum, b);
      EXPECT_GE(allocate_quota(b, it, 0), allocate_quota(b, it, it - 1));
    }
  EXPECT_EQ(allocate_quota(11, 5, 0), 3u);
  EXPECT_EQ(allocate_quota(11, 5, 4), 2u);
  EXPECT_THROW(allocate_quota(5, 5, 5), Error);
}

TEST(Selection, InitialQueryDrawsOnlyAboveThreshold) {
  const auto recs = records_from({0.1, 5.0, 0.2, 7.0, 9.0, 0.3, 6.0});
  const Threshold t{1.0, 2.0, 0.0, 0.0};
  const auto ids = initial_query(recs, t, 3, 42);
  EXPECT_EQ(ids.size(), 3u);
  EXPECT_TRUE(std::is_sorted(ids.begin(), ids.end()));
  for (SampleId id : ids) EXPECT_GT(recs[id - 100].score, 1.0);
  EXPECT_EQ(ids, initial_query(recs, t, 3, 42));
  EXPECT_EQ(initial_query(recs, t, 10, 1).size(), 4u);
  EXPECT_TRUE(initial_query(recs, Threshold{100.0, 0, 0, 0}, 3, 1).empty());
}

TEST(Selection, InitialQueryIsUniform) {
  const auto recs = records_from({5, 5, 5, 5});
  std::map<SampleId, int> hits;
  for (std::uint64_t s = 0; s < 4000; ++s)
    for (SampleId id : initial_query(recs, Threshold{1.0, 0, 0, 0}, 1, s)) ++hits[id];
  for (const auto& [id, h] : hits) EXPECT_NEAR(h, 1000, 120);
}

TEST(Selection, AmbiguousQueryPicksNearestThreshold) {
  const auto recs = records_from({0.0, 2.9, 3.2, 10.0, 3.0, 2.0});
  const Threshold t{3.0, 0, 0, 0};
  EXPECT_EQ(ambiguous_query(recs, t, 3, {}), (std::vector<SampleId>{104, 101, 102}));
  EXPECT_EQ(ambiguous_query(recs, t, 2, {104}), (std::vector<SampleId>{101, 102}));
}

TEST(Selection, AmbiguousQueryTiesGoToLowerId) {
  // both within sqrt(eps) of T: same clamped key
  const auto recs = records_from({3.0005, 2.9995, 3.0});
  EXPECT_EQ(ambiguous_query(recs, Threshold{3.0, 0, 0, 0}, 2, {}), (std::vector<SampleId>{100, 101}));
}

TEST(Selection, SelectionRulesMatchSortOracles) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> scores(1 + rng.below(60));
    for (auto& s : scores) s = std::round(rng.normal() * 8.0) / 4.0;  // ties on purpose
    const auto recs = records_from(scores);
    const Threshold t{rng.normal(), 0, 0, 0};
    const double alpha = 0.05 + 0.9 * rng.uniform();

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto by_key = idx;
    std::stable_sort(by_key.begin(), by_key.end(), [&](std::size_t a, std::size_t b) {
      return std::max(std::pow(scores[a] - t.value, 2), 1e-6) < std::max(std::pow(scores[b] - t.value, 2), 1e-6);
    });
    const std::size_t quota = rng.below(10);
    std::vector<SampleId> expect_amb;
    for (std::size_t k = 0; k < std::min(quota, by_key.size()); ++k) expect_amb.push_back(100 + by_key[k]);
    EXPECT_EQ(ambiguous_query(recs, t, quota, {}), expect_amb);

    std::vector<std::size_t> above;
    for (std::size_t i : idx)
      if (scores[i] > t.value) above.push_back(i);
    std::stable_sort(above.begin(), above.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const auto take = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(above.size()) + 1e-9));
    std::vector<std::pair<SampleId, ClassId>> expect_pl;
    for (std::size_t k = 0; k < take; ++k) expect_pl.emplace_back(100 + above[k], 1);
    EXPECT_EQ(pseudo_label_select(recs, t, alpha), expect_pl);
  }
}

TEST(Selection, PseudoLabelFloorRule) {
  const Threshold t{0.0, 0, 0, 0};
  EXPECT_EQ(pseudo_label_select(records_from({1, 2, 3, 4}), t, 0.2).size(), 0u);
  EXPECT_EQ(pseudo_label_select(records_from({1, 2, 3, 4, 5}), t, 0.2).size(), 1u);
  const auto ten = pseudo_label_select(records_from({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}), t, 0.2);
  ASSERT_EQ(ten.size(), 2u);
  EXPECT_EQ(ten[0].first, 109u);
  EXPECT_EQ(ten[1].first, 108u);
  EXPECT_THROW(pseudo_label_select(records_from({1}), t, 1.5), Error);
}

TEST(Selection, TopAndRandomQueries) {
  const auto recs = records_from({1, 9, 3, 9, 5});
  EXPECT_EQ(top_query(recs, 3, {}), (std::vector<SampleId>{101, 103, 104}));
  const auto r = random_query(recs, 2, 5, {101});
  EXPECT_EQ(r.size(), 2u);
  EXPECT_EQ(std::count(r.begin(), r.end(), 101u), 0);
}

TEST(Stop, Rules) {
  const auto recs = records_from({1, 5});
  const Threshold t{2.0, 0, 0, 0};
  EXPECT_TRUE(check_stop(recs, t, 3, 5, 5).stop);
  EXPECT_EQ(check_stop(recs, t, 3, 5, 5).reason, "iteration-cap");
  EXPECT_TRUE(check_stop(recs, t, 3, 1, 5, {101}).stop);
  const auto d = check_stop(recs, t, 0, 1, 5);
  EXPECT_FALSE(d.stop);
  EXPECT_FALSE(d.query_allowed);
  EXPECT_TRUE(check_stop(recs, t, 1, 1, 5).query_allowed);
}

TEST(Pretrain, HoldsOutValidationPerClass) {
  const SmallWorld w = small_world(1);
  LoopConfig cfg = small_config();
  const AgentState agent = pretrain_agent(w.pretrain, cfg, small_pretrain());
  EXPECT_EQ(agent.old_classes(), (std::vector<ClassId>{0, 1}));
  EXPECT_EQ(agent.validation.size(), 10u);  // max(ceil(0.001*80), 5) per class
  EXPECT_EQ(agent.buffer.size(), 150u);
  std::set<SampleId> val(agent.validation.ids().begin(), agent.validation.ids().end());
  for (const auto& e : agent.buffer.entries()) EXPECT_FALSE(val.contains(e.sample_id));
  EXPECT_EQ(agent.head.hidden_size(), 64u);
}

TEST(RunTask, DiscoversNovelClassesWithinBudget) {
  SmallWorld w = small_world(2);
  const LoopConfig cfg = small_config();
  AgentState agent = pretrain_agent(w.pretrain, cfg, small_pretrain());
  const TaskOutcome out = run_task(agent, w.pool, w.oracle, cfg);
  EXPECT_LE(w.oracle.calls, task_budget(w.pool.size(), cfg.budget_fraction));
  EXPECT_EQ(out.labels_spent, w.oracle.calls);
  EXPECT_EQ(out.discovered, (std::vector<ClassId>{2, 3}));
  EXPECT_EQ(agent.old_classes(), (std::vector<ClassId>{0, 1, 2, 3}));
  EXPECT_TRUE(agent.registry.new_classes().empty());
  EXPECT_EQ(agent.head.class_ids, (std::vector<ClassId>{0, 1, 2, 3}));
  EXPECT_TRUE(out.model_updated);
  std::size_t right = 0;
  for (const auto& [id, c] : out.state.pl_store) right += w.oracle.truth.at(id) == c;
  // one labeled sample per novel class early on; a few cross-class pseudo-labels are expected
  ASSERT_FALSE(out.state.pl_store.empty());
  EXPECT_GE(static_cast<double>(right), 0.9 * static_cast<double>(out.state.pl_store.size()));
  EXPECT_FALSE(out.trace.empty());
  EXPECT_EQ(out.trace.front().iteration, 0u);
}

TEST(RunTask, IsDeterministic) {
  SmallWorld a = small_world(4);
  SmallWorld b = small_world(4);
  const LoopConfig cfg = small_config();
  AgentState ga = pretrain_agent(a.pretrain, cfg, small_pretrain());
  AgentState gb = pretrain_agent(b.pretrain, cfg, small_pretrain());
  const auto oa = run_task(ga, a.pool, a.oracle, cfg);
  const auto ob = run_task(gb, b.pool, b.oracle, cfg);
  EXPECT_EQ(oa.state.al_store, ob.state.al_store);
  EXPECT_EQ(oa.state.pl_store, ob.state.pl_store);
  EXPECT_EQ(ga.head.output_weights, gb.head.output_weights);
}

TEST(RunTask, ZeroBudgetLeavesModelUntouched) {
  SmallWorld w = small_world(5);
  LoopConfig cfg = small_config();
  cfg.budget_fraction = 0.0;
  AgentState agent = pretrain_agent(w.pretrain, cfg, small_pretrain());
  const LongTermHead before = agent.head;
  const TaskOutcome out = run_task(agent, w.pool, w.oracle, cfg);
  EXPECT_EQ(w.oracle.calls, 0u);
  EXPECT_FALSE(out.model_updated);
  EXPECT_EQ(agent.head.output_weights, before.output_weights);
  EXPECT_EQ(out.trace.back().event, "no-novel-classes");
}

TEST(RunTask, BudgetNeverExceededUnderRandomSettings) {
  SmallWorld w = small_world(6);
  LoopConfig base = small_config();
  base.long_train.epochs = 2;
  const AgentState start = pretrain_agent(w.pretrain, base, small_pretrain());
  Rng rng(99);
  for (int trial = 0; trial < 8; ++trial) {
    LoopConfig cfg = base;
    cfg.budget_fraction = 0.01 + 0.1 * rng.uniform();
    cfg.max_iterations = 1 + rng.below(6);
    cfg.alpha = 0.05 + 0.9 * rng.uniform();
    cfg.seed = trial;
    LoopPolicy policy;
    policy.query = static_cast<QueryRule>(rng.below(4));
    policy.pseudo_label = rng.below(2) == 1;
    policy.one_shot = rng.below(3) == 0;
    AgentState agent = start;
    w.oracle.calls = 0;
    (void)run_task(agent, w.pool, w.oracle, cfg, policy);
    EXPECT_LE(w.oracle.calls, task_budget(w.pool.size(), cfg.budget_fraction)) << "trial " << trial;
  }
}

TEST(RunTask, RejectsLabeledPool) {
  SmallWorld w = small_world(7);
  const LoopConfig cfg = small_config();
  AgentState agent = pretrain_agent(w.pretrain, cfg, small_pretrain());
  EXPECT_THROW(run_task(agent, w.pretrain, w.oracle, cfg), Error);
}
