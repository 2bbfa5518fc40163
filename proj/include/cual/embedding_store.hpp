#pragma once

// Embedding datasets: the in-memory sample container, the CEMB binary file
// format, and a seeded synthetic generator.
//
// CEMB layout (little-endian, no padding):
//   "CEMB" | version u32 = 1 | n u64 | d u32 | has_labels u8
//   | features n*d f32 row-major | labels n i32 (only if has_labels)

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "cual/rng.hpp"

namespace cual {

using ClassId = std::int32_t;
using SampleId = std::uint64_t;
using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// n x d float features with optional labels and unique sample ids.
/// Immutable after construction.
class EmbeddingSet {
 public:
  EmbeddingSet() : features_(0, 1) {}

  EmbeddingSet(FeatureMatrix features, std::optional<std::vector<ClassId>> labels,
               std::vector<SampleId> ids)
      : features_(std::move(features)), labels_(std::move(labels)), ids_(std::move(ids)) {
    validate();
  }

  /// Ids assigned sequentially from 0.
  EmbeddingSet(FeatureMatrix features, std::optional<std::vector<ClassId>> labels)
      : features_(std::move(features)), labels_(std::move(labels)) {
    ids_.resize(static_cast<std::size_t>(features_.rows()));
    for (std::size_t i = 0; i < ids_.size(); ++i) ids_[i] = i;
    validate();
  }

  static EmbeddingSet empty(std::size_t dim, bool labeled = false) {
    return EmbeddingSet(FeatureMatrix(0, static_cast<Eigen::Index>(dim)),
                        labeled ? std::optional<std::vector<ClassId>>(std::vector<ClassId>{})
                                : std::nullopt,
                        {});
  }

  std::size_t size() const { return static_cast<std::size_t>(features_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(features_.cols()); }
  bool empty() const { return size() == 0; }
  bool has_labels() const { return labels_.has_value(); }

  const FeatureMatrix& features() const { return features_; }
  const std::vector<SampleId>& ids() const { return ids_; }
  const std::vector<ClassId>& labels() const {
    if (!labels_) throw Error("embedding set has no labels");
    return *labels_;
  }
  const std::optional<std::vector<ClassId>>& maybe_labels() const { return labels_; }

  SampleId id(std::size_t row) const { return ids_[row]; }
  ClassId label(std::size_t row) const { return labels()[row]; }

  /// Row as a double vector (all downstream math runs in double).
  Eigen::VectorXd row(std::size_t r) const {
    return features_.row(static_cast<Eigen::Index>(r)).transpose().cast<double>();
  }

  Eigen::MatrixXd features_double() const { return features_.cast<double>(); }

  EmbeddingSet subset(std::span<const std::size_t> rows) const {
    FeatureMatrix f(static_cast<Eigen::Index>(rows.size()), features_.cols());
    std::vector<SampleId> ids;
    ids.reserve(rows.size());
    std::optional<std::vector<ClassId>> labels;
    if (labels_) labels.emplace().reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      f.row(static_cast<Eigen::Index>(i)) = features_.row(static_cast<Eigen::Index>(rows[i]));
      ids.push_back(ids_[rows[i]]);
      if (labels_) labels->push_back((*labels_)[rows[i]]);
    }
    return EmbeddingSet(std::move(f), std::move(labels), std::move(ids));
  }

  /// Same rows with the given labels attached (replacing any existing ones).
  EmbeddingSet with_labels(std::vector<ClassId> labels) const {
    return EmbeddingSet(features_, std::move(labels), ids_);
  }

  EmbeddingSet without_labels() const { return EmbeddingSet(features_, std::nullopt, ids_); }

  /// Row-wise concatenation. Both sets must agree on dimension and labeling.
  static EmbeddingSet concat(const EmbeddingSet& a, const EmbeddingSet& b) {
    if (a.dim() != b.dim()) throw Error("concat: dimension mismatch");
    if (a.has_labels() != b.has_labels()) throw Error("concat: labeled/unlabeled mismatch");
    FeatureMatrix f(a.features_.rows() + b.features_.rows(), a.features_.cols());
    f << a.features_, b.features_;
    std::vector<SampleId> ids = a.ids_;
    ids.insert(ids.end(), b.ids_.begin(), b.ids_.end());
    std::optional<std::vector<ClassId>> labels;
    if (a.has_labels()) {
      labels = *a.labels_;
      labels->insert(labels->end(), b.labels_->begin(), b.labels_->end());
    }
    return EmbeddingSet(std::move(f), std::move(labels), std::move(ids));
  }

  friend bool operator==(const EmbeddingSet& a, const EmbeddingSet& b) {
    if (a.features_.rows() != b.features_.rows() || a.features_.cols() != b.features_.cols())
      return false;
    // Bitwise comparison so that NaN payloads and signed zeros count.
    if (std::memcmp(a.features_.data(), b.features_.data(),
                    sizeof(float) * static_cast<std::size_t>(a.features_.size())) != 0)
      return false;
    return a.labels_ == b.labels_ && a.ids_ == b.ids_;
  }

 private:
  void validate() const {
    if (features_.cols() < 1) throw Error("embedding dimension must be >= 1");
    if (labels_) {
      if (labels_->size() != size()) throw Error("label count does not match row count");
      for (ClassId l : *labels_)
        if (l < 0) throw Error("labels must be non-negative");
    }
    if (ids_.size() != size()) throw Error("id count does not match row count");
    std::unordered_set<SampleId> seen(ids_.begin(), ids_.end());
    if (seen.size() != ids_.size()) throw Error("sample ids must be unique");
  }

  FeatureMatrix features_;
  std::optional<std::vector<ClassId>> labels_;
  std::vector<SampleId> ids_;
};

// ---------------------------------------------------------------------------
// CEMB I/O

class CembError : public Error {
 public:
  enum class Kind { Io, MalformedHeader, TruncatedPayload, DimensionMismatch, InvalidPayload };

  CembError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::size_t kCembHeaderSize = 4 + 4 + 8 + 4 + 1;
inline constexpr std::uint32_t kCembVersion = 1;

namespace detail {

template <class T>
void put_le(std::vector<unsigned char>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xffu));
}

template <class T>
T get_le(const unsigned char* p) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return std::bit_cast<T>(bits);
}

}  // namespace detail

/// Serialized CEMB bytes for a set.
inline std::vector<unsigned char> encode_cemb(const EmbeddingSet& set) {
  std::vector<unsigned char> out;
  const std::size_t n = set.size();
  const std::size_t d = set.dim();
  out.reserve(kCembHeaderSize + n * d * 4 + (set.has_labels() ? n * 4 : 0));
  out.insert(out.end(), {'C', 'E', 'M', 'B'});
  detail::put_le<std::uint32_t>(out, kCembVersion);
  detail::put_le<std::uint64_t>(out, n);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  out.push_back(set.has_labels() ? 1 : 0);
  const float* data = set.features().data();  // row-major
  for (std::size_t i = 0; i < n * d; ++i) detail::put_le<float>(out, data[i]);
  if (set.has_labels())
    for (ClassId l : set.labels()) detail::put_le<std::int32_t>(out, l);
  return out;
}

struct CembHeader {
  std::uint32_t version = 0;
  std::uint64_t rows = 0;
  std::uint32_t dim = 0;
  bool has_labels = false;
};

inline CembHeader decode_cemb_header(std::span<const unsigned char> bytes) {
  using K = CembError::Kind;
  if (bytes.size() < kCembHeaderSize) throw CembError(K::MalformedHeader, "CEMB: header shorter than 21 bytes");
  if (std::memcmp(bytes.data(), "CEMB", 4) != 0) throw CembError(K::MalformedHeader, "CEMB: bad magic");
  CembHeader h;
  h.version = detail::get_le<std::uint32_t>(bytes.data() + 4);
  h.rows = detail::get_le<std::uint64_t>(bytes.data() + 8);
  h.dim = detail::get_le<std::uint32_t>(bytes.data() + 16);
  const unsigned char flag = bytes[20];
  if (h.version != kCembVersion)
    throw CembError(K::MalformedHeader, "CEMB: unsupported version " + std::to_string(h.version));
  if (flag > 1) throw CembError(K::MalformedHeader, "CEMB: has_labels flag must be 0 or 1");
  if (h.dim == 0) throw CembError(K::MalformedHeader, "CEMB: dimension must be >= 1");
  h.has_labels = flag == 1;
  return h;
}

inline EmbeddingSet decode_cemb(std::span<const unsigned char> bytes) {
  using K = CembError::Kind;
  const CembHeader h = decode_cemb_header(bytes);
  const std::size_t payload = bytes.size() - kCembHeaderSize;
  const std::size_t per_row = std::size_t{h.dim} * 4 + (h.has_labels ? 4 : 0);
  if (h.rows > payload / per_row)
    throw CembError(K::TruncatedPayload, "CEMB: header declares " + std::to_string(h.rows) +
                                             " rows but payload holds " +
                                             std::to_string(payload / per_row));
  const std::size_t need = static_cast<std::size_t>(h.rows) * per_row;
  if (payload != need)
    throw CembError(K::DimensionMismatch,
                    "CEMB: payload of " + std::to_string(payload) + " bytes is inconsistent with n=" +
                        std::to_string(h.rows) + ", d=" + std::to_string(h.dim));

  FeatureMatrix f(static_cast<Eigen::Index>(h.rows), static_cast<Eigen::Index>(h.dim));
  const unsigned char* p = bytes.data() + kCembHeaderSize;
  float* data = f.data();
  for (std::size_t i = 0; i < h.rows * h.dim; ++i, p += 4) data[i] = detail::get_le<float>(p);
  std::optional<std::vector<ClassId>> labels;
  if (h.has_labels) {
    labels.emplace(h.rows);
    for (std::size_t i = 0; i < h.rows; ++i, p += 4) {
      (*labels)[i] = detail::get_le<std::int32_t>(p);
      if ((*labels)[i] < 0) throw CembError(K::InvalidPayload, "CEMB: negative label at row " + std::to_string(i));
    }
  }
  return EmbeddingSet(std::move(f), std::move(labels));
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CembError(CembError::Kind::Io, "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline EmbeddingSet read_embeddings(const std::filesystem::path& path) {
  return decode_cemb(read_file_bytes(path));
}

inline void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& path) {
  const auto bytes = encode_cemb(set);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CembError(CembError::Kind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CembError(CembError::Kind::Io, "write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Gaussian class clusters. Within-class standard deviation is 1; class means
/// sit on scaled orthonormal directions so every pair is exactly
/// `separation` apart.
///
/// latent_dim == 0 gives isotropic classes. latent_dim > 0 gives each class
/// its own random latent_dim-dimensional subspace with unit variance inside
/// it, plus isotropic noise of std noise_ratio; this mimics the low-rank
/// per-class structure of deep embeddings that reconstruction scoring
/// relies on.
struct SyntheticSpec {
  std::size_t num_classes = 2;
  std::size_t dim = 8;
  std::size_t samples_per_class = 100;
  double separation = 8.0;
  std::uint64_t seed = 0;
  std::size_t latent_dim = 0;
  double noise_ratio = 0.1;
};

inline EmbeddingSet generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 1 || spec.dim < 1 || spec.samples_per_class < 1)
    throw Error("synthetic: num_classes, dim and samples_per_class must be >= 1");
  if (!(spec.separation > 0.0)) throw Error("synthetic: separation must be > 0");
  if (spec.latent_dim > spec.dim) throw Error("synthetic: latent_dim must be <= dim");
  if (spec.latent_dim > 0 && !(spec.noise_ratio >= 0.0)) throw Error("synthetic: noise_ratio must be >= 0");
  if (spec.num_classes > spec.dim)
    throw Error("synthetic: dim " + std::to_string(spec.dim) + " can place at most " +
                std::to_string(spec.dim) + " classes at separation " + std::to_string(spec.separation) +
                " (requested " + std::to_string(spec.num_classes) + ")");

  const auto d = static_cast<Eigen::Index>(spec.dim);
  const auto k = static_cast<Eigen::Index>(spec.num_classes);
  Rng rng(derive_seed(spec.seed, "synthetic"));
  auto gaussian = [&rng](Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
    return m;
  };

  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian(d, d)).householderQ();
  const Eigen::MatrixXd means = q.leftCols(k).transpose() * (spec.separation / std::sqrt(2.0));
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = a + 1; b < k; ++b)
      if ((means.row(a) - means.row(b)).norm() < spec.separation * (1.0 - 1e-9))
        throw Error("synthetic: failed to place class means at the requested separation");

  std::vector<Eigen::MatrixXd> bases;
  if (spec.latent_dim > 0) {
    const auto r = static_cast<Eigen::Index>(spec.latent_dim);
    for (Eigen::Index c = 0; c < k; ++c) {
      const Eigen::MatrixXd full = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian(d, r)).householderQ();
      bases.push_back(full.leftCols(r));
    }
  }

  const std::size_t n = spec.num_classes * spec.samples_per_class;
  FeatureMatrix f(static_cast<Eigen::Index>(n), d);
  std::vector<ClassId> labels(n);
  std::size_t row = 0;
  for (Eigen::Index c = 0; c < k; ++c) {
    for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++row) {
      Eigen::VectorXd x = means.row(c).transpose();
      if (spec.latent_dim == 0) {
        for (Eigen::Index j = 0; j < d; ++j) x(j) += rng.normal();
      } else {
        Eigen::VectorXd z(static_cast<Eigen::Index>(spec.latent_dim));
        for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = rng.normal();
        x += bases[static_cast<std::size_t>(c)] * z;
        for (Eigen::Index j = 0; j < d; ++j) x(j) += spec.noise_ratio * rng.normal();
      }
      f.row(static_cast<Eigen::Index>(row)) = x.transpose().cast<float>();
      labels[row] = static_cast<ClassId>(c);
    }
  }
  return EmbeddingSet(std::move(f), std::move(labels));
}

}  // namespace cual
