#pragma once

// Uncertainty scores, threshold calibration and query weights.
//
//   S0(u) = min_j FRE_j(u)                  over frozen old classes
//   Si(u) = S0(u) / max(FRE_m(u), eps_den)  m = short head's predicted class

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "cual/heads.hpp"
#include "cual/parallel.hpp"
#include "cual/subspace.hpp"

namespace cual {

inline constexpr double kDefaultEpsDen = 1e-8;
inline constexpr double kDefaultEpsAmb = 1e-6;

struct ScoreRecord {
  SampleId sample_id = 0;
  double numerator = 0.0;
  std::optional<double> denominator;
  double score = 0.0;
  std::optional<ClassId> predicted_novel_class;
  std::size_t iteration = 0;
};

struct Threshold {
  double value = 0.0;
  double k_std = 0.0;
  double source_mean = 0.0;
  double source_std = 0.0;
};

/// Minimum FRE over old-class subspaces. Ties resolve to the lowest class id
/// (the map iterates in ascending order and only strict improvements replace
/// the running minimum).
inline double old_class_numerator(const SubspaceRegistry& registry, const Eigen::Ref<const Eigen::VectorXd>& u) {
  if (registry.old_classes().empty()) throw Error("scoring: no old classes registered");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [id, s] : registry.old_classes()) {
    const double f = fre(s, u);
    if (f < best) best = f;
  }
  return best;
}

inline double ratio_score(double numerator, double denominator, double eps_den = kDefaultEpsDen) {
  return numerator / std::max(denominator, eps_den);
}

inline std::vector<double> old_class_numerators(const SubspaceRegistry& registry, const EmbeddingSet& set) {
  if (registry.old_classes().empty()) throw Error("scoring: no old classes registered");
  std::vector<double> out(set.size());
  parallel_for(set.size(), [&](std::size_t i) { out[i] = old_class_numerator(registry, set.row(i)); });
  return out;
}

inline std::vector<ScoreRecord> score_initial(const SubspaceRegistry& registry, const EmbeddingSet& set) {
  const auto nums = old_class_numerators(registry, set);
  std::vector<ScoreRecord> out(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    out[i].sample_id = set.id(i);
    out[i].numerator = nums[i];
    out[i].score = nums[i];
  }
  return out;
}

/// Iteration-i scores with precomputed (frozen) numerators.
inline std::vector<ScoreRecord> score_iter(const SubspaceRegistry& registry, const ShortTermHead& head,
                                           const EmbeddingSet& set, std::span<const double> numerators,
                                           std::size_t iteration, double eps_den = kDefaultEpsDen) {
  if (iteration == 0) throw Error("score_iter: iteration must be > 0");
  if (registry.new_classes().empty()) throw Error("score_iter: no novel classes registered");
  if (numerators.size() != set.size()) throw Error("score_iter: numerator count mismatch");
  std::vector<ScoreRecord> out(set.size());
  if (set.empty()) return out;

  const auto predicted = predict_classes(head, set);
  for (ClassId c : predicted)
    if (!registry.new_classes().contains(c))
      throw Error("score_iter: head predicts class " + std::to_string(c) +
                  " that has no novel subspace (head/registry out of sync)");

  parallel_for(set.size(), [&](std::size_t i) {
    const ClassId m = predicted[i];
    const double den = fre(registry.new_classes().at(m), set.row(i));
    ScoreRecord& r = out[i];
    r.sample_id = set.id(i);
    r.numerator = numerators[i];
    r.denominator = den;
    r.score = ratio_score(numerators[i], den, eps_den);
    r.predicted_novel_class = m;
    r.iteration = iteration;
  });
  return out;
}

inline std::vector<ScoreRecord> score_iter(const SubspaceRegistry& registry, const ShortTermHead& head,
                                           const EmbeddingSet& set, std::size_t iteration,
                                           double eps_den = kDefaultEpsDen) {
  const auto nums = old_class_numerators(registry, set);
  return score_iter(registry, head, set, nums, iteration, eps_den);
}

/// mean + k_std * population std (Welford accumulation).
inline Threshold compute_threshold(std::span<const double> scores, double k_std) {
  if (scores.empty()) throw Error("compute_threshold: empty validation scores");
  if (!(k_std >= 0.0)) throw Error("compute_threshold: k_std must be >= 0");
  double mean = 0.0;
  double m2 = 0.0;
  std::size_t n = 0;
  for (double x : scores) {
    ++n;
    const double delta = x - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (x - mean);
  }
  Threshold t;
  t.k_std = k_std;
  t.source_mean = mean;
  t.source_std = std::sqrt(m2 / static_cast<double>(n));
  t.value = mean + k_std * t.source_std;
  return t;
}

/// Clamped squared distance to the threshold; the ordering key behind
/// ambiguity (smaller key = more ambiguous).
inline double ambiguity_key(double score, const Threshold& threshold, double eps_amb = kDefaultEpsAmb) {
  const double diff = score - threshold.value;
  return std::max(diff * diff, eps_amb);
}

/// 1 / max((score - T)^2, eps_amb).
inline double ambiguity(double score, const Threshold& threshold, double eps_amb = kDefaultEpsAmb) {
  return 1.0 / ambiguity_key(score, threshold, eps_amb);
}

namespace detail {

inline void check_simplex(std::span<const double> p) {
  if (p.empty()) throw Error("not a probability vector: empty");
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw Error("not a probability vector: negative or NaN entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw Error("not a probability vector: sums to " + std::to_string(sum));
}

}  // namespace detail

/// Shannon entropy in nats, 0 ln 0 = 0.
inline double entropy_score(std::span<const double> p) {
  detail::check_simplex(p);
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return std::max(h, 0.0);
}

/// top1 - top2.
inline double margin_score(std::span<const double> p) {
  if (p.size() < 2) throw Error("margin_score: need at least 2 classes");
  detail::check_simplex(p);
  double a = -1.0;
  double b = -1.0;
  for (double v : p) {
    if (v > a) {
      b = a;
      a = v;
    } else if (v > b) {
      b = v;
    }
  }
  return a - b;
}

/// Entropy of a head's softmax output for every row.
template <ClassifierHead Head>
std::vector<double> entropy_scores(const Head& head, const EmbeddingSet& set) {
  std::vector<double> out(set.size());
  if (set.empty()) return out;
  const Eigen::MatrixXd p = predict_proba(head, set.features_double());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double h = 0.0;
    for (Eigen::Index k = 0; k < p.cols(); ++k)
      if (p(i, k) > 0.0) h -= p(i, k) * std::log(p(i, k));
    out[static_cast<std::size_t>(i)] = std::max(h, 0.0);
  }
  return out;
}

}  // namespace cual
