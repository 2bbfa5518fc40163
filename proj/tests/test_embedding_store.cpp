#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <limits>
#include <set>

#include "cual/embedding_store.hpp"
#include "oracles.hpp"

using namespace cual;

namespace {

std::vector<unsigned char> le32(std::uint32_t v) {
  return {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v >> 16),
          static_cast<unsigned char>(v >> 24)};
}

std::vector<unsigned char> le64(std::uint64_t v) {
  std::vector<unsigned char> out;
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  return out;
}

std::vector<unsigned char> header(std::uint32_t version, std::uint64_t n, std::uint32_t d, unsigned char flag) {
  std::vector<unsigned char> b{'C', 'E', 'M', 'B'};
  for (auto x : le32(version)) b.push_back(x);
  for (auto x : le64(n)) b.push_back(x);
  for (auto x : le32(d)) b.push_back(x);
  b.push_back(flag);
  return b;
}

void append_float(std::vector<unsigned char>& b, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  for (auto x : le32(u)) b.push_back(x);
}

CembError::Kind decode_kind(const std::vector<unsigned char>& bytes) {
  try {
    (void)decode_cemb(bytes);
  } catch (const CembError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "decode did not throw";
  return CembError::Kind::Io;
}

EmbeddingSet small_set() {
  FeatureMatrix f(2, 3);
  f << 1.5f, -2.0f, 0.0f, 3.25f, 1e-3f, -0.0f;
  return EmbeddingSet(f, std::vector<ClassId>{7, 0});
}

}  // namespace

TEST(Cemb, HeaderIs21Bytes) {
  EXPECT_EQ(kCembHeaderSize, 21u);
  EXPECT_EQ(encode_cemb(EmbeddingSet::empty(4)).size(), 21u);
}

TEST(Cemb, EncodingMatchesHandBuiltBytes) {
  auto expected = header(1, 2, 3, 1);
  for (float f : {1.5f, -2.0f, 0.0f, 3.25f, 1e-3f, -0.0f}) append_float(expected, f);
  for (auto x : le32(7)) expected.push_back(x);
  for (auto x : le32(0)) expected.push_back(x);
  EXPECT_EQ(encode_cemb(small_set()), expected);
}

TEST(Cemb, RoundTripIsBitExact) {
  Rng rng(11);
  FeatureMatrix f = oracle::random_matrix(rng, 37, 13, 100.0).cast<float>();
  f(0, 0) = std::numeric_limits<float>::denorm_min();
  f(1, 1) = -0.0f;
  f(2, 2) = std::numeric_limits<float>::max();
  std::vector<ClassId> labels(37);
  for (auto& l : labels) l = static_cast<ClassId>(rng.below(5));
  const EmbeddingSet a(f, labels);
  const EmbeddingSet b = decode_cemb(encode_cemb(a));
  EXPECT_EQ(b.size(), 37u);
  EXPECT_EQ(b.dim(), 13u);
  EXPECT_EQ(std::memcmp(a.features().data(), b.features().data(), 37 * 13 * sizeof(float)), 0);
  EXPECT_EQ(b.labels(), labels);
}

TEST(Cemb, UnlabeledRoundTrip) {
  const EmbeddingSet a = small_set().without_labels();
  const auto bytes = encode_cemb(a);
  EXPECT_EQ(bytes.size(), 21u + 2 * 3 * 4);
  const EmbeddingSet b = decode_cemb(bytes);
  EXPECT_FALSE(b.has_labels());
  EXPECT_TRUE(a == b);
}

TEST(Cemb, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "cual_roundtrip.cemb";
  write_embeddings(small_set(), path);
  EXPECT_TRUE(read_embeddings(path) == small_set());
  std::filesystem::remove(path);
}

TEST(Cemb, MalformedHeaders) {
  using K = CembError::Kind;
  auto bad_magic = header(1, 0, 2, 0);
  bad_magic[0] = 'X';
  EXPECT_EQ(decode_kind(bad_magic), K::MalformedHeader);
  EXPECT_EQ(decode_kind({'C', 'E', 'M'}), K::MalformedHeader);
  EXPECT_EQ(decode_kind(header(2, 0, 2, 0)), K::MalformedHeader);
  EXPECT_EQ(decode_kind(header(1, 0, 2, 2)), K::MalformedHeader);
  EXPECT_EQ(decode_kind(header(1, 0, 0, 0)), K::MalformedHeader);
}

TEST(Cemb, TruncatedPayload) {
  auto b = header(1, 10, 2, 0);
  for (int i = 0; i < 4; ++i) append_float(b, 1.0f);
  EXPECT_EQ(decode_kind(b), CembError::Kind::TruncatedPayload);
}

TEST(Cemb, PayloadSizeInconsistentWithDimension) {
  auto b = header(1, 2, 3, 0);
  for (int i = 0; i < 7; ++i) append_float(b, 1.0f);
  EXPECT_EQ(decode_kind(b), CembError::Kind::DimensionMismatch);
}

TEST(Cemb, NegativeLabelRejected) {
  auto b = header(1, 1, 1, 1);
  append_float(b, 0.5f);
  for (auto x : le32(static_cast<std::uint32_t>(-3))) b.push_back(x);
  EXPECT_EQ(decode_kind(b), CembError::Kind::InvalidPayload);
}

TEST(Cemb, MissingFileNamesPath) {
  try {
    (void)read_embeddings("/nonexistent/dir/data.cemb");
    FAIL();
  } catch (const CembError& e) {
    EXPECT_EQ(e.kind(), CembError::Kind::Io);
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/data.cemb"), std::string::npos);
  }
}

TEST(EmbeddingSet, RejectsInconsistentInputs) {
  FeatureMatrix f(2, 2);
  f.setZero();
  EXPECT_THROW(EmbeddingSet(f, std::vector<ClassId>{1}), Error);
  EXPECT_THROW(EmbeddingSet(f, std::vector<ClassId>{1, -1}), Error);
  EXPECT_THROW(EmbeddingSet(f, std::nullopt, std::vector<SampleId>{4, 4}), Error);
}

TEST(EmbeddingSet, SubsetAndConcatKeepIdsAndLabels) {
  const EmbeddingSet s = small_set();
  const EmbeddingSet sub = s.subset(std::vector<std::size_t>{1});
  EXPECT_EQ(sub.size(), 1u);
  EXPECT_EQ(sub.id(0), 1u);
  EXPECT_EQ(sub.label(0), 0);
  EXPECT_FLOAT_EQ(sub.features()(0, 0), 3.25f);

  FeatureMatrix g(1, 3);
  g << 9.0f, 9.0f, 9.0f;
  const EmbeddingSet other(g, std::vector<ClassId>{3}, std::vector<SampleId>{50});
  const EmbeddingSet all = EmbeddingSet::concat(s, other);
  EXPECT_EQ(all.size(), 3u);
  EXPECT_EQ(all.id(2), 50u);
  EXPECT_EQ(all.label(2), 3);
  EXPECT_THROW((void)EmbeddingSet::concat(s, s), Error);
}

TEST(Synthetic, DeterministicForSeed) {
  SyntheticSpec spec;
  spec.seed = 5;
  EXPECT_TRUE(generate_synthetic(spec) == generate_synthetic(spec));
  SyntheticSpec other = spec;
  other.seed = 6;
  EXPECT_FALSE(generate_synthetic(spec) == generate_synthetic(other));
}

TEST(Synthetic, ClassMeansSitAtRequestedSeparation) {
  SyntheticSpec spec{4, 16, 4000, 8.0, 3, 0, 0.1};
  const EmbeddingSet s = generate_synthetic(spec);
  std::vector<Eigen::VectorXd> means(4, Eigen::VectorXd::Zero(16));
  for (std::size_t i = 0; i < s.size(); ++i) means[static_cast<std::size_t>(s.label(i))] += s.row(i);
  for (auto& m : means) m /= 4000.0;
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b) EXPECT_NEAR((means[a] - means[b]).norm(), 8.0, 0.2);
}

TEST(Synthetic, LatentClassesAreLowRank) {
  SyntheticSpec spec{2, 20, 3000, 8.0, 1, 3, 0.1};
  const EmbeddingSet s = generate_synthetic(spec);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.label(i) == 0) rows.push_back(i);
  const Eigen::MatrixXd x = s.subset(rows).features_double();
  const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c.transpose() * c / static_cast<double>(x.rows()));
  const Eigen::VectorXd ev = es.eigenvalues().reverse();
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(ev(k), 1.0, 0.15);
  for (int k = 3; k < 20; ++k) EXPECT_LT(ev(k), 0.02);
}

TEST(Synthetic, TooManyClassesReportsLimit) {
  SyntheticSpec spec{9, 8, 10, 8.0, 0, 0, 0.1};
  try {
    (void)generate_synthetic(spec);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("at most 8"), std::string::npos);
  }
}

TEST(Rng, DerivedSeedsDifferByTag) {
  EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
  EXPECT_NE(derive_seed(1, "a"), derive_seed(2, "a"));
  EXPECT_EQ(derive_seed(1, "a"), derive_seed(1, "a"));
}

TEST(Rng, BelowAndSampleIndicesStayInRange) {
  Rng rng(3);
  std::vector<int> hist(7, 0);
  for (int i = 0; i < 7000; ++i) ++hist[rng.below(7)];
  for (int h : hist) EXPECT_NEAR(h, 1000, 150);
  for (int t = 0; t < 50; ++t) {
    const auto idx = rng.sample_indices(20, 8);
    EXPECT_EQ(idx.size(), 8u);
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 8u);
    for (auto i : idx) EXPECT_LT(i, 20u);
  }
  EXPECT_EQ(rng.sample_indices(3, 10).size(), 3u);
}

TEST(Rng, NormalMoments) {
  Rng rng(9);
  double s = 0.0;
  double s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}
