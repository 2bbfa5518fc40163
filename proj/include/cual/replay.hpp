#pragma once

// Class-balanced experience replay.

#include <deque>
#include <map>
#include <vector>

#include "cual/embedding_store.hpp"
#include "cual/heads.hpp"

namespace cual {

enum class Provenance : std::uint8_t { Active, Pseudo };

struct ReplayEntry {
  SampleId sample_id = 0;
  std::vector<float> embedding;
  ClassId label = 0;
  Provenance provenance = Provenance::Active;
};

struct InsertReport {
  std::size_t inserted = 0;
  std::size_t evicted = 0;
  bool eviction_triggered = false;
  // Classes that lost some of the samples offered in this insert.
  std::vector<ClassId> truncated_classes;
};

/// Fixed-capacity store of (embedding, label) pairs. When an insert would
/// overflow, entries are evicted one at a time from the currently largest
/// classes (round-robin across ties, ascending class id), oldest first,
/// until everything fits. Classes smaller than the resulting level are never
/// touched, so the classes that did lose entries end within one of each
/// other and of the largest class.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw Error("replay buffer capacity must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }

  std::map<ClassId, std::size_t> class_counts() const {
    std::map<ClassId, std::size_t> out;
    for (const auto& [c, q] : by_class_)
      if (!q.empty()) out.emplace(c, q.size());
    return out;
  }

  /// Entries grouped by ascending class id, oldest first within a class.
  std::vector<ReplayEntry> entries() const {
    std::vector<ReplayEntry> out;
    out.reserve(size_);
    for (const auto& [c, q] : by_class_) out.insert(out.end(), q.begin(), q.end());
    return out;
  }

  InsertReport insert_balanced(std::vector<ReplayEntry> incoming) {
    InsertReport report;
    std::map<ClassId, std::size_t> offered;
    for (const auto& e : incoming) ++offered[e.label];

    std::map<ClassId, std::size_t> target;
    for (const auto& [c, q] : by_class_) target[c] = q.size();
    for (const auto& [c, k] : offered) target[c] += k;
    std::size_t total = size_ + incoming.size();

    while (total > capacity_) {
      report.eviction_triggered = true;
      std::size_t level = 0;
      for (const auto& [c, k] : target) level = std::max(level, k);
      for (auto& [c, k] : target) {
        if (total <= capacity_) break;
        if (k == level) {
          --k;
          --total;
        }
      }
    }

    for (auto& e : incoming) by_class_[e.label].push_back(std::move(e));
    size_ = 0;
    for (auto& [c, q] : by_class_) {
      const std::size_t keep = target[c];
      const std::size_t before = q.size();
      const std::size_t previously_stored = before - offered[c];
      while (q.size() > keep) q.pop_front();
      const std::size_t dropped = before - keep;
      report.evicted += dropped;
      if (dropped > previously_stored) report.truncated_classes.push_back(c);
      size_ += q.size();
    }
    report.inserted = incoming.size();
    return report;
  }

  InsertReport insert_balanced(const EmbeddingSet& samples, Provenance provenance) {
    std::vector<ReplayEntry> batch;
    batch.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto row = samples.features().row(static_cast<Eigen::Index>(i));
      batch.push_back({samples.id(i), std::vector<float>(row.data(), row.data() + row.size()),
                       samples.label(i), provenance});
    }
    return insert_balanced(std::move(batch));
  }

  /// Buffer contents as a labeled set (same order as entries()).
  EmbeddingSet as_set(std::size_t dim) const {
    const auto all = entries();
    FeatureMatrix f(static_cast<Eigen::Index>(all.size()), static_cast<Eigen::Index>(dim));
    std::vector<ClassId> labels;
    std::vector<SampleId> ids;
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (all[i].embedding.size() != dim) throw Error("replay buffer: entry dimension mismatch");
      for (std::size_t j = 0; j < dim; ++j)
        f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = all[i].embedding[j];
      labels.push_back(all[i].label);
      ids.push_back(all[i].sample_id);
    }
    return EmbeddingSet(std::move(f), std::move(labels), std::move(ids));
  }

 private:
  std::size_t capacity_;
  std::size_t size_ = 0;
  std::map<ClassId, std::deque<ReplayEntry>> by_class_;
};

struct LossWeights {
  double beta = 0.25;   // actively labeled
  double gamma = 0.25;  // pseudo-labeled
  double theta = 0.5;   // replay buffer

  void validate() const {
    if (!(beta >= 0.0 && gamma >= 0.0 && theta >= 0.0)) throw Error("loss weights must be non-negative");
    if (!(beta + gamma + theta > 0.0)) throw Error("loss weights must not all be zero");
  }
};

/// beta * L_AL + gamma * L_PL + theta * L_buffer. Pass 0 for a component
/// whose sample set is empty.
inline double compose_replay_loss(double loss_al, double loss_pl, double loss_buffer, const LossWeights& w) {
  return w.beta * loss_al + w.gamma * loss_pl + w.theta * loss_buffer;
}

/// Trains the long-term head on AL, PL and buffer samples at once. Sample
/// weights are beta/|AL|, gamma/|PL| and theta/|B|, so the full-data
/// objective is the weighted sum of per-set mean losses (normalized by the
/// weights of the non-empty sets).
inline LongTermHead replay_update(LongTermHead head, const ReplayBuffer& buffer, const EmbeddingSet& new_al,
                                  const EmbeddingSet& new_pl, const LossWeights& w, const TrainConfig& cfg) {
  w.validate();
  const std::size_t d = head.input_dim();
  const EmbeddingSet replay = buffer.as_set(d);
  if (new_al.empty() && new_pl.empty() && replay.empty()) throw Error("replay_update: all sample sets are empty");

  EmbeddingSet all = EmbeddingSet::empty(d, true);
  std::vector<double> weights;
  auto append = [&](const EmbeddingSet& part, double set_weight) {
    if (part.empty()) return;
    if (part.dim() != d) throw Error("replay_update: dimension mismatch");
    const double per = set_weight / static_cast<double>(part.size());
    if (!(per > 0.0)) return;  // zero-weight set does not take part
    all = EmbeddingSet::concat(all, part);
    weights.insert(weights.end(), part.size(), per);
  };
  append(new_al, w.beta);
  append(new_pl, w.gamma);
  append(replay, w.theta);
  if (all.empty()) return head;
  return train_head(std::move(head), all, weights, cfg);
}

}  // namespace cual
