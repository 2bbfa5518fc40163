#pragma once

// Per-class PCA subspaces and feature reconstruction error (FRE).

#include <Eigen/Dense>

#include <map>
#include <vector>

#include "cual/embedding_store.hpp"
#include "cual/parallel.hpp"

namespace cual {

inline constexpr double kDefaultVarianceRetained = 0.995;
// Below this many fit samples the subspace is forced to rank 0.
inline constexpr std::size_t kMinSamplesForComponents = 3;

/// Mean plus orthonormal principal directions (rows of `components`).
struct ClassSubspace {
  ClassId class_id = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // q x d
  double variance_retained = kDefaultVarianceRetained;
  std::vector<double> explained;  // per-component fraction of total variance
  std::size_t n_fit = 0;

  std::size_t rank() const { return static_cast<std::size_t>(components.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

/// Fits a mean-centered PCA through the thin SVD of the centered data. Keeps
/// the leading components whose cumulative explained variance first reaches
/// `variance_retained`. Each component is sign-fixed so its first nonzero
/// coordinate is positive.
inline ClassSubspace fit_subspace(const Eigen::MatrixXd& features, ClassId class_id,
                                  double variance_retained = kDefaultVarianceRetained) {
  if (features.rows() == 0) throw Error("fit_subspace: no samples for class " + std::to_string(class_id));
  if (!(variance_retained > 0.0 && variance_retained <= 1.0))
    throw Error("fit_subspace: variance_retained must be in (0, 1]");

  ClassSubspace s;
  s.class_id = class_id;
  s.variance_retained = variance_retained;
  s.n_fit = static_cast<std::size_t>(features.rows());
  s.mean = features.colwise().mean().transpose();
  const auto d = features.cols();
  s.components.resize(0, d);

  if (s.n_fit < kMinSamplesForComponents) return s;

  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd sv = svd.singularValues();
  const Eigen::VectorXd ev = sv.array().square();
  const double total = ev.sum();
  if (!(total > 0.0)) return s;

  const std::size_t max_q = std::min<std::size_t>(s.n_fit - 1, static_cast<std::size_t>(d));
  std::size_t q = 0;
  double cumulative = 0.0;
  while (q < max_q && q < static_cast<std::size_t>(ev.size())) {
    cumulative += ev(static_cast<Eigen::Index>(q));
    ++q;
    if (cumulative / total >= variance_retained - 1e-12) break;
  }

  s.components = svd.matrixV().leftCols(static_cast<Eigen::Index>(q)).transpose();
  for (Eigen::Index r = 0; r < s.components.rows(); ++r) {
    for (Eigen::Index c = 0; c < d; ++c) {
      const double v = s.components(r, c);
      if (std::abs(v) > 1e-12) {
        if (v < 0.0) s.components.row(r) *= -1.0;
        break;
      }
    }
    s.explained.push_back(ev(r) / total);
  }
  return s;
}

inline ClassSubspace fit_subspace(const EmbeddingSet& set, ClassId class_id,
                                  double variance_retained = kDefaultVarianceRetained) {
  return fit_subspace(set.features_double(), class_id, variance_retained);
}

/// ||(u - mean) - P^T P (u - mean)||_2 with P = components.
inline double fre(const ClassSubspace& s, const Eigen::Ref<const Eigen::VectorXd>& u) {
  if (u.size() != s.mean.size())
    throw Error("fre: dimension mismatch (" + std::to_string(u.size()) + " vs " +
                std::to_string(s.mean.size()) + ")");
  const Eigen::VectorXd centered = u - s.mean;
  if (s.components.rows() == 0) return centered.norm();
  const Eigen::VectorXd coords = s.components * centered;
  return (centered - s.components.transpose() * coords).norm();
}

inline std::vector<double> fre_batch(const ClassSubspace& s, const EmbeddingSet& set) {
  if (set.dim() != s.dim()) throw Error("fre_batch: dimension mismatch");
  std::vector<double> out(set.size());
  parallel_for(set.size(), [&](std::size_t i) { out[i] = fre(s, set.row(i)); });
  return out;
}

/// Frozen old-class subspaces plus the evolving novel-class subspaces of the
/// current task. Key sets stay disjoint.
class SubspaceRegistry {
 public:
  using Map = std::map<ClassId, ClassSubspace>;

  const Map& old_classes() const { return old_; }
  const Map& new_classes() const { return new_; }
  std::size_t generation() const { return generation_; }

  void add_old(ClassSubspace s) {
    if (new_.contains(s.class_id)) throw Error("registry: class already registered as novel");
    if (!old_.emplace(s.class_id, s).second)
      throw Error("registry: old class " + std::to_string(s.class_id) + " already present");
  }

  /// Replaces the whole novel-class map and bumps the generation.
  void set_new(Map fresh) {
    for (const auto& [id, s] : fresh) {
      if (old_.contains(id)) throw Error("registry: class " + std::to_string(id) + " is already old");
      if (s.class_id != id) throw Error("registry: key/class_id mismatch");
    }
    new_ = std::move(fresh);
    ++generation_;
  }

  /// Moves every novel-class subspace into the frozen old map.
  void promote_new() {
    for (auto& [id, s] : new_) old_.emplace(id, std::move(s));
    new_.clear();
    generation_ = 0;
  }

 private:
  Map old_;
  Map new_;
  std::size_t generation_ = 0;
};

}  // namespace cual
