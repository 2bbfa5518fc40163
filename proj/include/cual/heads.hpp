#pragma once

// Classification heads trained on frozen embeddings.
//
// ShortTermHead: linear softmax over the novel classes of the current task.
// LongTermHead: one hidden ReLU layer, softmax over every learned class.
// Both train with Adam on a per-sample weighted cross-entropy.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <numeric>
#include <span>
#include <unordered_map>
#include <vector>

#include "cual/embedding_store.hpp"
#include "cual/rng.hpp"

namespace cual {

inline constexpr double kInitScale = 0.01;
inline constexpr std::size_t kDefaultHiddenSize = 4096;

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static TrainConfig short_term() { return {}; }
  static TrainConfig long_term() {
    TrainConfig c;
    c.epochs = 20;
    c.batch_size = 50;
    return c;
  }
};

struct ShortTermHead {
  Eigen::MatrixXd weights;  // K x d
  Eigen::VectorXd bias;     // K
  std::vector<ClassId> class_ids;

  std::size_t input_dim() const { return static_cast<std::size_t>(weights.cols()); }
  std::size_t num_classes() const { return class_ids.size(); }

  Eigen::MatrixXd logits(const Eigen::MatrixXd& x) const {
    return (x * weights.transpose()).rowwise() + bias.transpose();
  }

  auto blocks() {
    return std::array{Eigen::Map<Eigen::VectorXd>(weights.data(), weights.size()),
                      Eigen::Map<Eigen::VectorXd>(bias.data(), bias.size())};
  }
};

struct LongTermHead {
  Eigen::MatrixXd hidden_weights;  // H x d
  Eigen::VectorXd hidden_bias;     // H
  Eigen::MatrixXd output_weights;  // K x H
  Eigen::VectorXd output_bias;     // K
  std::vector<ClassId> class_ids;

  std::size_t input_dim() const { return static_cast<std::size_t>(hidden_weights.cols()); }
  std::size_t hidden_size() const { return static_cast<std::size_t>(hidden_weights.rows()); }
  std::size_t num_classes() const { return class_ids.size(); }

  Eigen::MatrixXd logits(const Eigen::MatrixXd& x) const {
    const Eigen::MatrixXd h = ((x * hidden_weights.transpose()).rowwise() + hidden_bias.transpose()).cwiseMax(0.0);
    return (h * output_weights.transpose()).rowwise() + output_bias.transpose();
  }

  auto blocks() {
    return std::array{Eigen::Map<Eigen::VectorXd>(hidden_weights.data(), hidden_weights.size()),
                      Eigen::Map<Eigen::VectorXd>(hidden_bias.data(), hidden_bias.size()),
                      Eigen::Map<Eigen::VectorXd>(output_weights.data(), output_weights.size()),
                      Eigen::Map<Eigen::VectorXd>(output_bias.data(), output_bias.size())};
  }
};

template <class H>
concept ClassifierHead = requires(H h, const H ch, const Eigen::MatrixXd& x) {
  { ch.logits(x) } -> std::convertible_to<Eigen::MatrixXd>;
  { ch.input_dim() } -> std::convertible_to<std::size_t>;
  { ch.class_ids } -> std::convertible_to<std::vector<ClassId>>;
  h.blocks();
};

// ---------------------------------------------------------------------------
// Construction

namespace detail {

inline void check_unique(const std::vector<ClassId>& ids) {
  std::vector<ClassId> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw Error("head: duplicate class id");
}

inline Eigen::MatrixXd gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * rng.normal();
  return m;
}

}  // namespace detail

inline ShortTermHead init_short_head(std::vector<ClassId> class_ids, std::size_t dim, std::uint64_t seed,
                                     double scale = kInitScale) {
  if (class_ids.empty()) throw Error("init_short_head: empty class list");
  detail::check_unique(class_ids);
  Rng rng(derive_seed(seed, "short-head-init"));
  ShortTermHead h;
  const auto k = static_cast<Eigen::Index>(class_ids.size());
  h.weights = detail::gaussian_matrix(rng, k, static_cast<Eigen::Index>(dim), scale);
  h.bias = Eigen::VectorXd::Zero(k);
  h.class_ids = std::move(class_ids);
  return h;
}

inline LongTermHead init_long_head(std::vector<ClassId> class_ids, std::size_t dim,
                                   std::size_t hidden = kDefaultHiddenSize, std::uint64_t seed = 0,
                                   double scale = kInitScale) {
  detail::check_unique(class_ids);
  Rng rng(derive_seed(seed, "long-head-init"));
  LongTermHead h;
  const auto hs = static_cast<Eigen::Index>(hidden);
  const auto k = static_cast<Eigen::Index>(class_ids.size());
  h.hidden_weights = detail::gaussian_matrix(rng, hs, static_cast<Eigen::Index>(dim), scale);
  h.hidden_bias = Eigen::VectorXd::Zero(hs);
  h.output_weights = detail::gaussian_matrix(rng, k, hs, scale);
  h.output_bias = Eigen::VectorXd::Zero(k);
  h.class_ids = std::move(class_ids);
  return h;
}

/// Appends one freshly initialized output row per new class. Everything that
/// already existed is copied bit-for-bit.
inline LongTermHead expand_long_head(const LongTermHead& head, const std::vector<ClassId>& new_class_ids,
                                     std::uint64_t seed = 0, double scale = kInitScale) {
  for (ClassId c : new_class_ids)
    if (std::find(head.class_ids.begin(), head.class_ids.end(), c) != head.class_ids.end())
      throw Error("expand_long_head: class " + std::to_string(c) + " already present");
  detail::check_unique(new_class_ids);
  if (new_class_ids.empty()) return head;

  Rng rng(derive_seed(seed, "long-head-expand"));
  LongTermHead out = head;
  const auto k_old = head.output_weights.rows();
  const auto k_new = static_cast<Eigen::Index>(new_class_ids.size());
  const auto hs = head.output_weights.cols();
  out.output_weights.conservativeResize(k_old + k_new, hs);
  out.output_weights.bottomRows(k_new) = detail::gaussian_matrix(rng, k_new, hs, scale);
  out.output_bias.conservativeResize(k_old + k_new);
  out.output_bias.tail(k_new).setZero();
  out.class_ids.insert(out.class_ids.end(), new_class_ids.begin(), new_class_ids.end());
  return out;
}

// ---------------------------------------------------------------------------
// Prediction

/// Row-wise softmax with max-logit subtraction.
inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

struct Prediction {
  ClassId class_id = 0;
  std::size_t index = 0;
  Eigen::VectorXd probabilities;
};

namespace detail {

inline std::size_t argmax_first(const Eigen::Ref<const Eigen::VectorXd>& v) {
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(i);
  return best;
}

}  // namespace detail

template <ClassifierHead Head>
Eigen::MatrixXd predict_proba(const Head& head, const Eigen::MatrixXd& x) {
  if (static_cast<std::size_t>(x.cols()) != head.input_dim()) throw Error("predict: dimension mismatch");
  return softmax_rows(head.logits(x));
}

template <ClassifierHead Head>
Prediction predict(const Head& head, const Eigen::Ref<const Eigen::VectorXd>& u) {
  if (static_cast<std::size_t>(u.size()) != head.input_dim()) throw Error("predict: dimension mismatch");
  const Eigen::MatrixXd p = predict_proba(head, Eigen::MatrixXd(u.transpose()));
  Prediction out;
  out.probabilities = p.row(0).transpose();
  out.index = detail::argmax_first(out.probabilities);
  out.class_id = head.class_ids[out.index];
  return out;
}

/// Argmax class per row; ties go to the lowest output index.
template <ClassifierHead Head>
std::vector<ClassId> predict_classes(const Head& head, const EmbeddingSet& set) {
  std::vector<ClassId> out(set.size());
  if (set.empty()) return out;
  const Eigen::MatrixXd logits = head.logits(set.features_double());
  for (Eigen::Index i = 0; i < logits.rows(); ++i)
    out[static_cast<std::size_t>(i)] = head.class_ids[detail::argmax_first(logits.row(i).transpose())];
  return out;
}

// ---------------------------------------------------------------------------
// Loss and gradients

/// Output index of every label; throws on a label the head does not know.
template <ClassifierHead Head>
std::vector<std::size_t> target_indices(const Head& head, std::span<const ClassId> labels) {
  std::unordered_map<ClassId, std::size_t> index;
  for (std::size_t k = 0; k < head.class_ids.size(); ++k) index.emplace(head.class_ids[k], k);
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (ClassId l : labels) {
    auto it = index.find(l);
    if (it == index.end()) throw Error("train_head: unknown label " + std::to_string(l));
    out.push_back(it->second);
  }
  return out;
}

namespace detail {

// Per-row cross-entropy and dL/dlogits = w_i * (softmax - onehot).
inline double weighted_ce(const Eigen::MatrixXd& logits, std::span<const std::size_t> targets,
                          std::span<const double> weights, Eigen::MatrixXd* dlogits) {
  const Eigen::VectorXd maxes = logits.rowwise().maxCoeff();
  Eigen::MatrixXd shifted = logits.colwise() - maxes;
  Eigen::MatrixXd e = shifted.array().exp();
  const Eigen::VectorXd sums = e.rowwise().sum();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const auto t = static_cast<Eigen::Index>(targets[static_cast<std::size_t>(i)]);
    loss += weights[static_cast<std::size_t>(i)] * (std::log(sums(i)) - shifted(i, t));
  }
  if (dlogits != nullptr) {
    *dlogits = e.array().colwise() / sums.array();
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      (*dlogits)(i, static_cast<Eigen::Index>(targets[static_cast<std::size_t>(i)])) -= 1.0;
      dlogits->row(i) *= weights[static_cast<std::size_t>(i)];
    }
  }
  return loss;
}

}  // namespace detail

/// Sum over rows of w_i * CE_i. When `grad` is non-null it receives the
/// gradient with respect to every parameter (same shapes as the head).
inline double weighted_cross_entropy(const ShortTermHead& head, const Eigen::MatrixXd& x,
                                     std::span<const std::size_t> targets, std::span<const double> weights,
                                     ShortTermHead* grad = nullptr) {
  const Eigen::MatrixXd logits = head.logits(x);
  if (grad == nullptr) return detail::weighted_ce(logits, targets, weights, nullptr);
  Eigen::MatrixXd dlogits;
  const double loss = detail::weighted_ce(logits, targets, weights, &dlogits);
  grad->weights = dlogits.transpose() * x;
  grad->bias = dlogits.colwise().sum().transpose();
  grad->class_ids = head.class_ids;
  return loss;
}

inline double weighted_cross_entropy(const LongTermHead& head, const Eigen::MatrixXd& x,
                                     std::span<const std::size_t> targets, std::span<const double> weights,
                                     LongTermHead* grad = nullptr) {
  const Eigen::MatrixXd pre = (x * head.hidden_weights.transpose()).rowwise() + head.hidden_bias.transpose();
  const Eigen::MatrixXd hidden = pre.cwiseMax(0.0);
  const Eigen::MatrixXd logits = (hidden * head.output_weights.transpose()).rowwise() + head.output_bias.transpose();
  if (grad == nullptr) return detail::weighted_ce(logits, targets, weights, nullptr);
  Eigen::MatrixXd dlogits;
  const double loss = detail::weighted_ce(logits, targets, weights, &dlogits);
  grad->output_weights = dlogits.transpose() * hidden;
  grad->output_bias = dlogits.colwise().sum().transpose();
  const Eigen::MatrixXd dhidden =
      ((dlogits * head.output_weights).array() * (pre.array() > 0.0).cast<double>()).matrix();
  grad->hidden_weights = dhidden.transpose() * x;
  grad->hidden_bias = dhidden.colwise().sum().transpose();
  grad->class_ids = head.class_ids;
  return loss;
}

/// Weighted loss over a labeled set, normalized by the total weight.
template <ClassifierHead Head>
double dataset_loss(const Head& head, const EmbeddingSet& samples, std::span<const double> weights) {
  if (samples.empty()) return 0.0;
  const auto targets = target_indices(head, samples.labels());
  double total = 0.0;
  for (double w : weights) total += w;
  return weighted_cross_entropy(head, samples.features_double(), targets, weights) / total;
}

// ---------------------------------------------------------------------------
// Training

/// Mini-batch Adam on the weighted cross-entropy
///   L = sum_i w_i CE_i / sum_i w_i.
/// Each mini-batch B contributes (n / |B|) * sum_{i in B} w_i CE_i / W, an
/// unbiased estimate of L. Shuffle order comes from cfg.seed; the last
/// partial batch is kept.
template <ClassifierHead Head>
Head train_head(Head head, const EmbeddingSet& samples, std::span<const double> sample_weights,
                const TrainConfig& cfg) {
  if (!(cfg.learning_rate > 0.0)) throw Error("train_head: learning_rate must be > 0");
  if (cfg.epochs == 0) return head;
  if (samples.empty()) throw Error("train_head: empty sample set with epochs > 0");
  if (!samples.has_labels()) throw Error("train_head: samples must be labeled");
  if (sample_weights.size() != samples.size()) throw Error("train_head: sample_weights length mismatch");
  if (samples.dim() != head.input_dim()) throw Error("train_head: dimension mismatch");
  if (cfg.batch_size == 0) throw Error("train_head: batch_size must be > 0");
  double total_weight = 0.0;
  for (double w : sample_weights) {
    if (!(w > 0.0)) throw Error("train_head: sample weights must be positive");
    total_weight += w;
  }

  const auto targets = target_indices(head, samples.labels());
  const Eigen::MatrixXd x = samples.features_double();
  const std::size_t n = samples.size();

  Head grad = head;
  Head m = head;
  Head v = head;
  for (auto& b : m.blocks()) b.setZero();
  for (auto& b : v.blocks()) b.setZero();

  Rng rng(derive_seed(cfg.seed, "train-shuffle"));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> batch_targets;
  std::vector<double> batch_weights;
  double b1_pow = 1.0;
  double b2_pow = 1.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const std::size_t bs = stop - start;
      Eigen::MatrixXd xb(static_cast<Eigen::Index>(bs), x.cols());
      batch_targets.resize(bs);
      batch_weights.resize(bs);
      const double scale = static_cast<double>(n) / (static_cast<double>(bs) * total_weight);
      for (std::size_t j = 0; j < bs; ++j) {
        const std::size_t r = order[start + j];
        xb.row(static_cast<Eigen::Index>(j)) = x.row(static_cast<Eigen::Index>(r));
        batch_targets[j] = targets[r];
        batch_weights[j] = sample_weights[r] * scale;
      }
      weighted_cross_entropy(head, xb, batch_targets, batch_weights, &grad);

      b1_pow *= cfg.beta1;
      b2_pow *= cfg.beta2;
      auto pb = head.blocks();
      auto gb = grad.blocks();
      auto mb = m.blocks();
      auto vb = v.blocks();
      for (std::size_t k = 0; k < pb.size(); ++k) {
        mb[k] = cfg.beta1 * mb[k] + (1.0 - cfg.beta1) * gb[k];
        vb[k] = cfg.beta2 * vb[k] + (1.0 - cfg.beta2) * gb[k].cwiseAbs2();
        pb[k].array() -= cfg.learning_rate * (mb[k].array() / (1.0 - b1_pow)) /
                         ((vb[k].array() / (1.0 - b2_pow)).sqrt() + cfg.epsilon);
      }
    }
  }
  return head;
}

template <ClassifierHead Head>
Head train_head(Head head, const EmbeddingSet& samples, const TrainConfig& cfg) {
  const std::vector<double> ones(samples.size(), 1.0);
  return train_head(std::move(head), samples, ones, cfg);
}

}  // namespace cual
