#include <gtest/gtest.h>

#include "cual/replay.hpp"
#include "oracles.hpp"

using namespace cual;

namespace {

std::vector<ReplayEntry> batch(std::map<ClassId, std::size_t> counts, SampleId& next_id) {
  std::vector<ReplayEntry> out;
  for (const auto& [c, k] : counts)
    for (std::size_t i = 0; i < k; ++i) out.push_back({next_id++, {static_cast<float>(c)}, c, Provenance::Active});
  return out;
}

}  // namespace

TEST(Replay, NoEvictionBelowCapacity) {
  ReplayBuffer buf(10);
  SampleId id = 0;
  const auto r = buf.insert_balanced(batch({{0, 3}, {1, 4}}, id));
  EXPECT_FALSE(r.eviction_triggered);
  EXPECT_EQ(buf.size(), 7u);
  EXPECT_EQ(r.inserted, 7u);
}

TEST(Replay, EvictsFromLargestClassesOldestFirst) {
  ReplayBuffer buf(6);
  SampleId id = 0;
  buf.insert_balanced(batch({{0, 5}}, id));  // ids 0..4
  const auto r = buf.insert_balanced(batch({{1, 2}}, id));  // ids 5, 6
  EXPECT_TRUE(r.eviction_triggered);
  EXPECT_EQ(r.evicted, 1u);
  EXPECT_EQ(buf.class_counts(), (std::map<ClassId, std::size_t>{{0, 4}, {1, 2}}));
  EXPECT_EQ(buf.entries().front().sample_id, 1u);
}

TEST(Replay, MatchesWaterFillOracle) {
  Rng rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t cap = 1 + rng.below(40);
    ReplayBuffer buf(cap);
    std::map<ClassId, std::size_t> expected;
    SampleId id = 0;
    for (int step = 0; step < 6; ++step) {
      std::map<ClassId, std::size_t> add;
      for (int c = 0; c < 5; ++c)
        if (rng.below(2) == 1) add[c] = rng.below(12);
      for (const auto& [c, k] : add) expected[c] += k;
      buf.insert_balanced(batch(add, id));
      std::erase_if(expected, [](const auto& kv) { return kv.second == 0; });
      expected = oracle::water_fill(expected, cap);
      std::erase_if(expected, [](const auto& kv) { return kv.second == 0; });
      ASSERT_EQ(buf.class_counts(), expected) << "trial " << trial << " step " << step;
      ASSERT_LE(buf.size(), cap);
    }
  }
}

TEST(Replay, KeepsNewestWithinClass) {
  ReplayBuffer buf(3);
  SampleId id = 0;
  buf.insert_balanced(batch({{2, 5}}, id));
  std::vector<SampleId> kept;
  for (const auto& e : buf.entries()) kept.push_back(e.sample_id);
  EXPECT_EQ(kept, (std::vector<SampleId>{2, 3, 4}));
}

TEST(Replay, SetViewCarriesLabelsAndIds) {
  ReplayBuffer buf(10);
  FeatureMatrix f(3, 2);
  f << 1, 2, 3, 4, 5, 6;
  const EmbeddingSet s(f, std::vector<ClassId>{1, 0, 1}, std::vector<SampleId>{10, 11, 12});
  buf.insert_balanced(s, Provenance::Pseudo);
  const EmbeddingSet v = buf.as_set(2);
  EXPECT_EQ(v.labels(), (std::vector<ClassId>{0, 1, 1}));
  EXPECT_EQ(v.ids(), (std::vector<SampleId>{11, 10, 12}));
  EXPECT_EQ(v.features()(0, 1), 4.0f);
  EXPECT_THROW(ReplayBuffer(0), Error);
}

TEST(Replay, ComposedLossArithmetic) {
  EXPECT_DOUBLE_EQ(compose_replay_loss(1.0, 2.0, 3.0, LossWeights{}), 0.25 + 0.5 + 1.5);
  EXPECT_THROW((LossWeights{0, 0, 0}.validate()), Error);
  EXPECT_THROW((LossWeights{-1, 1, 1}.validate()), Error);
}

TEST(Replay, UpdateObjectiveIsWeightedSumOfSetMeans) {
  // The per-sample weights replay_update trains with reproduce
  // beta*mean(AL) + gamma*mean(PL) + theta*mean(B), up to the total weight.
  Rng rng(9);
  const LongTermHead head = init_long_head({0, 1, 2}, 4, 8, 1, 0.5);
  auto make = [&](std::size_t n, SampleId first) {
    std::vector<ClassId> labels(n);
    std::vector<SampleId> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<ClassId>(rng.below(3));
      ids[i] = first + i;
    }
    return EmbeddingSet(oracle::random_matrix(rng, static_cast<Eigen::Index>(n), 4).cast<float>(), labels, ids);
  };
  const EmbeddingSet al = make(3, 0), pl = make(7, 100), b = make(11, 200);
  const LossWeights w;
  auto mean_loss = [&](const EmbeddingSet& s) {
    return dataset_loss(head, s, std::vector<double>(s.size(), 1.0));
  };
  const double composed = compose_replay_loss(mean_loss(al), mean_loss(pl), mean_loss(b), w);

  EmbeddingSet all = EmbeddingSet::concat(EmbeddingSet::concat(al, pl), b);
  std::vector<double> weights;
  weights.insert(weights.end(), 3, w.beta / 3);
  weights.insert(weights.end(), 7, w.gamma / 7);
  weights.insert(weights.end(), 11, w.theta / 11);
  EXPECT_NEAR(dataset_loss(head, all, weights), composed, 1e-12);
}

TEST(Replay, UpdateTrainsOnBufferAlone) {
  Rng rng(10);
  ReplayBuffer buf(50);
  std::vector<ClassId> labels;
  Eigen::MatrixXd x = oracle::random_matrix(rng, 20, 3, 0.3);
  for (int i = 0; i < 20; ++i) {
    labels.push_back(i % 2);
    x(i, 0) += i % 2 == 0 ? 3.0 : -3.0;
  }
  buf.insert_balanced(oracle::to_set(x, labels), Provenance::Active);
  const LongTermHead head = init_long_head({0, 1}, 3, 16, 2);
  const EmbeddingSet none = EmbeddingSet::empty(3, true);
  const LongTermHead after = replay_update(head, buf, none, none, LossWeights{}, TrainConfig::long_term());
  const EmbeddingSet data = buf.as_set(3);
  const std::vector<double> ones(data.size(), 1.0);
  EXPECT_LT(dataset_loss(after, data, ones), dataset_loss(head, data, ones));
  const ReplayBuffer empty_buf(5);
  EXPECT_THROW(replay_update(head, empty_buf, none, none, LossWeights{}, TrainConfig{}), Error);
}
