#include <gtest/gtest.h>

#include <set>

#include "helpers.hpp"
#include "oracle.hpp"
#include "tamp/selection.hpp"

using namespace tamp;

namespace {

Matrix two_clusters() {
  return Matrix::from_rows({{1.0f, 0.05f, 0.01f},
                            {1.0f, -0.03f, 0.02f},
                            {1.0f, 0.01f, -0.04f},
                            {0.02f, 1.0f, 0.03f},
                            {-0.01f, 1.0f, 0.05f},
                            {0.04f, 1.0f, -0.02f}});
}

Matrix last_row_attention(const std::vector<double>& a) {
  const std::size_t n = a.size();
  Matrix A(n, n);
  for (std::size_t i = 0; i + 1 < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) A(i, j) = 1.0f / static_cast<float>(i + 1);
  for (std::size_t j = 0; j < n; ++j) A(n - 1, j) = static_cast<float>(a[j]);
  return A;
}

SelectionResult run_amia(const Matrix& z, const std::vector<double>& a, double threshold,
                         SelectionLimits limits = {}) {
  const auto dist = cosine_distance_matrix(z);
  const auto g = build_knn(dist, z.rows(), 3, 1.0, 0.2);
  return reverse_select(forward_update(a, g), g, dist, threshold, limits);
}

}  // namespace

TEST(TokenContributions, Examples) {
  Matrix id = Matrix::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  EXPECT_EQ(token_contributions(id).a, (std::vector<double>{0, 0, 1}));
  Matrix uni(4, 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j <= i; ++j) uni(i, j) = 1.0f / static_cast<float>(i + 1);
  for (double v : token_contributions(uni).a) EXPECT_NEAR(v, 0.25, 1e-7);
  EXPECT_THROW(token_contributions(Matrix(2, 3)), ShapeError);
}

TEST(TokenContributions, HandBuiltSoftmax) {
  // Last-row logits [0.3, 1.1]; softmax by hand.
  const double e0 = std::exp(0.3), e1 = std::exp(1.1);
  Matrix A = Matrix::from_rows({{1, 0}, {static_cast<float>(e0 / (e0 + e1)), static_cast<float>(e1 / (e0 + e1))}});
  auto a = token_contributions(A).a;
  EXPECT_NEAR(a[0], 0.31002552, 1e-6);
  EXPECT_NEAR(a[1], 0.68997448, 1e-6);
}

TEST(BuildKnn, Examples) {
  Matrix same = Matrix::from_rows({{1, 1}, {1, 1}, {1, 1}, {1, 1}});
  auto g = build_knn(same, 3, 1.0);
  for (const auto& row : g.weights_forward)
    for (double e : row) EXPECT_DOUBLE_EQ(e, 1.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (auto j : g.neighbors[i]) EXPECT_NE(i, j);

  Matrix orth = Matrix::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  auto o = build_knn(orth, 3, 1.0);
  for (const auto& row : o.weights_forward)
    for (double e : row) EXPECT_NEAR(e, std::exp(-1.0), 1e-12);
  EXPECT_NEAR(o.weights_forward[0][0], 0.3679, 1e-4);
  EXPECT_EQ(o.neighbors[0], (std::vector<std::size_t>{1, 2, 3}));

  EXPECT_THROW(build_knn(Matrix(3, 2, 1.0f), 3, 1.0), InsufficientTokensError);
}

TEST(BuildKnn, MatchesExhaustiveSortOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto z = testutil::random_matrix(10, 4, 500 + seed);
    auto g = build_knn(z, 3, 1.0);
    auto ref = oracle::knn(oracle::to_mat(z), 3);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(g.neighbors[i], ref.nb[i]) << "seed " << seed;
  }
}

TEST(ForwardUpdate, Examples) {
  NeighborGraph g;
  g.k = 1;
  g.neighbors = {{1}, {0}};
  g.distances = {{0.0}, {0.0}};
  g.weights_forward = {{1.0}, {1.0}};
  g.weights_reverse = {{1.0}, {1.0}};
  std::vector<double> a = {0.6, 0.4};
  auto out = forward_update(a, g);
  EXPECT_NEAR(out[0], 1.0, 1e-12);
  EXPECT_NEAR(out[1], 1.0, 1e-12);

  g.weights_forward = {{1e-300}, {1e-300}};
  auto same = forward_update(a, g);
  EXPECT_NEAR(same[0], 0.6, 1e-9);
  EXPECT_NEAR(same[1], 0.4, 1e-9);
  std::vector<double> wrong = {1, 2, 3};
  EXPECT_THROW(forward_update(wrong, g), ShapeError);
}

TEST(ForwardUpdate, MatchesOriginalValueLoopOracle) {
  auto z = testutil::random_matrix(5, 3, 61);
  std::vector<double> a = {0.1, 0.3, 0.05, 0.25, 0.3};
  auto g = build_knn(z, 3, 1.0);
  auto out = forward_update(a, g);
  auto ref = oracle::knn(oracle::to_mat(z), 3);
  for (std::size_t i = 0; i < 5; ++i) {
    double v = a[i];
    for (auto j : ref.nb[i]) v += std::exp(-ref.d[i][j]) * a[j];
    EXPECT_NEAR(out[i], v, 1e-6 * v);
    EXPECT_GE(out[i], a[i]);
  }
}

TEST(Mmd, Examples) {
  Matrix z = Matrix::from_rows({{1, 0}, {0, 1}});
  auto d = cosine_distance_matrix(z);
  std::vector<std::size_t> c = {0}, s = {1}, both = {0, 1};
  EXPECT_NEAR(mmd(c, s, d, 2, 0.2), 2.0 - 2.0 * std::exp(-0.2), 1e-12);
  EXPECT_NEAR(mmd(c, s, d, 2, 0.2), 0.36254, 1e-5);
  EXPECT_DOUBLE_EQ(mmd(both, both, d, 2, 0.2), 0.0);
  EXPECT_DOUBLE_EQ(mmd(c, s, d, 2, 0.2), mmd(s, c, d, 2, 0.2));
  std::vector<std::size_t> none;
  EXPECT_THROW(mmd(none, c, d, 2, 0.2), InsufficientTokensError);
}

TEST(ReverseSelect, GrowingToFullSetGivesZeroMmd) {
  auto z = testutil::random_matrix(9, 4, 70);
  std::vector<double> a(9, 1.0 / 9);
  auto r = run_amia(z, a, 0.0);
  EXPECT_EQ(r.selected.size(), 9u);
  EXPECT_EQ(r.stopped_by, StopReason::exhausted);
  EXPECT_NEAR(r.mmd_trace.back(), 0.0, 1e-9);
}

TEST(ReverseSelect, TwoClustersAlternate) {
  auto z = two_clusters();
  std::vector<double> a(6, 1.0 / 6);
  auto r = run_amia(z, a, 0.0);
  ASSERT_GE(r.selected.size(), 2u);
  EXPECT_NE(r.selected[0] < 3, r.selected[1] < 3);

  auto ref = oracle::amia(a, oracle::to_mat(z), 3, 1.0, 0.2, 0.0, 4);
  EXPECT_EQ(r.selected, ref.picks);
  for (std::size_t i = 0; i < ref.trace.size(); ++i) EXPECT_NEAR(r.mmd_trace[i], ref.trace[i], 1e-9);
}

TEST(ReverseSelect, MatchesRecomputingOracleOnRandomInstances) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto z = testutil::random_matrix(12, 5, 900 + seed);
    Rng rng(seed);
    std::vector<double> a(12);
    double s = 0;
    for (auto& v : a) s += (v = rng.uniform());
    for (auto& v : a) v /= s;
    const double thr = 0.05;
    auto r = run_amia(z, a, thr);
    auto ref = oracle::amia(a, oracle::to_mat(z), 3, 1.0, 0.2, thr, 4);
    EXPECT_EQ(r.selected, ref.picks) << "seed " << seed;
    if (r.stopped_by == StopReason::threshold) EXPECT_LT(r.mmd_trace.back(), thr);
  }
}

TEST(ReverseSelect, DominantTokenPickedFirst) {
  Matrix z = Matrix::from_rows({{1, 0.01f}, {1, 0.02f}, {1, 0.03f}, {1, 0.04f}, {1, 0.05f}});
  std::vector<double> a = {0.05, 0.05, 0.8, 0.05, 0.05};
  EXPECT_EQ(run_amia(z, a, 0.0).selected.front(), 2u);
}

TEST(ReverseSelect, ThresholdLimitsAndInvalidThreshold) {
  auto z = testutil::random_matrix(15, 4, 3);
  std::vector<double> a(15, 1.0 / 15);
  auto inf = run_amia(z, a, std::numeric_limits<double>::infinity());
  EXPECT_EQ(inf.selected.size(), 4u);
  EXPECT_EQ(inf.stopped_by, StopReason::threshold);
  auto zero = run_amia(z, a, 0.0);
  EXPECT_EQ(zero.selected.size(), 15u);
  SelectionLimits lim;
  lim.max_count = 6;
  auto capped = run_amia(z, a, 0.0, lim);
  EXPECT_EQ(capped.selected.size(), 6u);
  EXPECT_EQ(capped.stopped_by, StopReason::max_count);
  auto dist = cosine_distance_matrix(z);
  auto g = build_knn(dist, 15, 3, 1.0, 0.2);
  EXPECT_THROW(reverse_select(a, g, dist, -1.0), ConfigError);
}

TEST(ReverseSelect, NoDuplicatesUnderNegativeContributions) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto z = testutil::random_matrix(20, 3, 2000 + seed);
    Rng rng(seed);
    std::vector<double> a(20);
    for (auto& v : a) v = rng.uniform() * (rng.uniform() < 0.2 ? 10.0 : 0.01);
    auto r = run_amia(z, a, 0.0);
    std::set<std::size_t> uniq(r.selected.begin(), r.selected.end());
    EXPECT_EQ(uniq.size(), r.selected.size());
    for (auto i : r.selected) EXPECT_LT(i, 20u);
    for (double m : r.mmd_trace) EXPECT_TRUE(std::isfinite(m));
  }
}

TEST(ReverseSelect, ScaleInvariantSelection) {
  auto z = testutil::random_matrix(16, 6, 8);
  std::vector<double> a(16);
  for (std::size_t i = 0; i < 16; ++i) a[i] = 1.0 / static_cast<double>(i + 2);
  auto r1 = run_amia(z, a, 0.05);
  for (auto& v : z.flat()) v *= 10.0f;
  auto r2 = run_amia(z, a, 0.05);
  EXPECT_EQ(r1.selected, r2.selected);
}

TEST(SelectVariant, Examples) {
  SelectionParams p;
  SelectionInputs in;
  auto full = select_variant(SelectionKind::full, 7, in, p);
  EXPECT_EQ(full.indices, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));

  Matrix uni(4, 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j <= i; ++j) uni(i, j) = 1.0f / static_cast<float>(i + 1);
  in.attention = &uni;
  auto att = select_variant(SelectionKind::attention, 4, in, p);
  EXPECT_EQ(att.indices.size(), 4u);  // nothing above the mean: full set

  auto A = last_row_attention({0.1, 0.5, 0.1, 0.3});
  in.attention = &A;
  EXPECT_EQ(select_variant(SelectionKind::attention, 4, in, p).indices,
            (std::vector<std::size_t>{1, 3}));

  in.seed = 42;
  auto r1 = select_variant(SelectionKind::random, 250, in, p);
  auto r2 = select_variant(SelectionKind::random, 250, in, p);
  EXPECT_EQ(r1.indices, r2.indices);
  EXPECT_EQ(r1.indices.size(), 100u);
  std::set<std::size_t> uniq(r1.indices.begin(), r1.indices.end());
  EXPECT_EQ(uniq.size(), 100u);
  EXPECT_EQ(select_variant(SelectionKind::random, 30, in, p).indices.size(), 30u);
}

TEST(SelectVariant, AmiaUsesScaledThreshold) {
  auto z = testutil::random_matrix(12, 4, 19);
  std::vector<double> a(12, 1.0 / 12);
  auto A = last_row_attention(a);
  SelectionInputs in;
  in.attention = &A;
  in.outputs = &z;
  in.layer_importance = 0.64;
  SelectionParams p;
  auto v = select_variant(SelectionKind::amia, 12, in, p);
  ASSERT_TRUE(v.amia);
  EXPECT_NEAR(v.amia->threshold, 0.1 * 0.8, 1e-12);
  EXPECT_EQ(v.indices, v.amia->selected);

  Matrix small = testutil::random_matrix(3, 4, 1);
  Matrix A3 = last_row_attention({0.2, 0.3, 0.5});
  in.attention = &A3;
  in.outputs = &small;
  EXPECT_EQ(select_variant(SelectionKind::amia, 3, in, p).indices.size(), 3u);
  EXPECT_THROW(selection_kind_from_name("bogus"), ConfigError);
}
