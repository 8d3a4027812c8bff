#include <gtest/gtest.h>

#include "helpers.hpp"
#include "oracle.hpp"
#include "tamp/allocation.hpp"

using namespace tamp;

namespace {

std::vector<LayerBudget> budgets(std::vector<std::size_t> params) {
  std::vector<LayerBudget> out;
  for (std::size_t i = 0; i < params.size(); ++i) out.push_back({LayerId::from_flat(i), params[i]});
  return out;
}

std::vector<double> ratios(const SparsityPlan& p) {
  std::vector<double> r;
  for (const auto& e : p.entries) r.push_back(e.ratio);
  return r;
}

}  // namespace

TEST(AllocateDas, EqualImportancesGiveUniform) {
  std::vector<double> imp = {0.3, 0.3, 0.3};
  auto plan = allocate_das(imp, budgets({10, 20, 30}), 0.5, 0.1);
  for (double r : ratios(plan)) EXPECT_DOUBLE_EQ(r, 0.5);
}

TEST(AllocateDas, TwoLayersEqualParams) {
  std::vector<double> imp = {2, 1};
  auto r = ratios(allocate_das(imp, budgets({1, 1}), 0.5, 0.1));
  EXPECT_NEAR(r[0], 0.4, 1e-12);
  EXPECT_NEAR(r[1], 0.6, 1e-12);
}

TEST(AllocateDas, TwoLayersUnequalParamsMatchesBruteForceShift) {
  std::vector<double> imp = {2, 1};
  auto r = ratios(allocate_das(imp, budgets({3, 1}), 0.5, 0.1));
  // Brute-force 1-D search over the common centre c: r1 = c - 0.1, r2 = c + 0.1.
  double best_c = 0.0, best_err = 1e9;
  for (int i = 0; i <= 1000000; ++i) {
    const double c = i * 1e-6;
    const double err = std::abs((3 * (c - 0.1) + (c + 0.1)) / 4 - 0.5);
    if (err < best_err) {
      best_err = err;
      best_c = c;
    }
  }
  EXPECT_NEAR(best_c, 0.55, 1e-6);
  EXPECT_NEAR(r[0], best_c - 0.1, 1e-6);
  EXPECT_NEAR(r[1], best_c + 0.1, 1e-6);
  EXPECT_NEAR(r[0], 0.45, 1e-12);
  EXPECT_NEAR(r[1], 0.65, 1e-12);
}

TEST(AllocateDas, MatchesBisectionOracleWithClamping) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.below(12);
    std::vector<double> imp(n), params(n);
    std::vector<std::size_t> pc(n);
    for (std::size_t i = 0; i < n; ++i) {
      imp[i] = rng.uniform(0, 2);
      pc[i] = 1 + rng.below(5000);
      params[i] = static_cast<double>(pc[i]);
    }
    const double p = rng.uniform(0.05, 0.95);
    const double lambda = rng.uniform(0, 0.6);
    auto got = ratios(allocate_das(imp, budgets(pc), p, lambda));
    auto ref = oracle::allocate(imp, params, p, lambda);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(got[i], ref[i], 1e-9);
  }
}

TEST(AllocateDas, InfeasibleAndInvalidInputs) {
  std::vector<double> imp = {1, 2};
  EXPECT_THROW(allocate_das(imp, budgets({1, 1}), 1.5, 0.1), InfeasibleError);
  EXPECT_THROW(allocate_das(imp, budgets({1, 1}), 0.5, -0.1), ConfigError);
  std::vector<double> bad = {1, std::nan("")};
  EXPECT_THROW(allocate_das(bad, budgets({1, 1}), 0.5, 0.1), ConfigError);
  std::vector<double> neg = {-1, 1};
  EXPECT_THROW(allocate_das(neg, budgets({1, 1}), 0.5, 0.1), ConfigError);
}

TEST(AllocateDas, ScaleInvariance) {
  std::vector<double> imp = {0.2, 0.9, 0.5, 0.7};
  auto a = ratios(allocate_das(imp, budgets({5, 9, 2, 7}), 0.4, 0.2));
  for (auto& v : imp) v *= 37.0;
  auto b = ratios(allocate_das(imp, budgets({5, 9, 2, 7}), 0.4, 0.2));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(AllocateDas, LambdaZeroIsUniform) {
  std::vector<double> imp = {0.2, 0.9, 0.5};
  for (double r : ratios(allocate_das(imp, budgets({5, 9, 2}), 0.37, 0.0))) EXPECT_NEAR(r, 0.37, 1e-12);
}

TEST(AllocateBlockwise, Examples) {
  std::vector<double> one(7, 0.0);
  for (std::size_t i = 0; i < 7; ++i) one[i] = 0.1 * static_cast<double>(i);
  auto single = allocate_blockwise_das(one, budgets({1, 1, 1, 1, 1, 1, 1}), 0.5, 0.1);
  for (double r : ratios(single)) EXPECT_NEAR(r, 0.5, 1e-12);

  std::vector<double> imp(14);
  for (std::size_t i = 0; i < 14; ++i) imp[i] = i < 7 ? 0.9 : 0.2;
  auto two = allocate_blockwise_das(imp, budgets(std::vector<std::size_t>(14, 4)), 0.5, 0.1);
  for (std::size_t i = 0; i < 14; ++i) EXPECT_NEAR(two.entries[i].ratio, i < 7 ? 0.4 : 0.6, 1e-12);

  Rng rng(4);
  std::vector<double> mixed(21);
  for (auto& v : mixed) v = rng.uniform();
  std::vector<std::size_t> pc(21);
  for (auto& v : pc) v = 1 + rng.below(100);
  auto plan = allocate_blockwise_das(mixed, budgets(pc), 0.5, 0.1);
  for (std::size_t i = 0; i < 21; ++i)
    EXPECT_EQ(plan.entries[i].ratio, plan.entries[(i / 7) * 7].ratio);
  EXPECT_NEAR(plan.weighted_mean(), 0.5, 1e-9);
}

TEST(AllocateUniform, Examples) {
  auto plan = allocate_uniform(budgets({3, 4, 5}), 0.6);
  for (double r : ratios(plan)) EXPECT_DOUBLE_EQ(r, 0.6);
  EXPECT_NO_THROW(check_budget(plan));
  std::vector<LayerBudget> none;
  EXPECT_THROW(allocate_uniform(none, 0.5), ConfigError);
}

TEST(OwlOutlierRatio, Examples) {
  auto I = [](std::vector<float> v) {
    const std::size_t n = v.size();
    return Matrix(1, n, std::move(v));
  };
  EXPECT_DOUBLE_EQ(owl_outlier_ratio(I({2, 2, 2, 2}), 5), 0.0);
  EXPECT_DOUBLE_EQ(owl_outlier_ratio(I({1, 1, 1, 97}), 5), 0.0);
  EXPECT_DOUBLE_EQ(owl_outlier_ratio(I({1, 1, 1, 197}), 5), 0.0);
  EXPECT_DOUBLE_EQ(owl_outlier_ratio(I({0, 0, 0, 100}), 5), 0.0);
  EXPECT_DOUBLE_EQ(owl_outlier_ratio(I({0, 0, 0, 1000, 1, 1, 1, 1}), 5), 1.0 / 8.0);
  EXPECT_DOUBLE_EQ(owl_outlier_ratio(I({0, 0, 0, 0}), 5), 0.0);
  EXPECT_THROW(owl_outlier_ratio(I({1, 2}), 1.0), ConfigError);
}

TEST(AllocateOwl, MirrorsDasMachinery) {
  std::vector<double> outliers = {0.02, 0.01};
  auto r = ratios(allocate_owl(outliers, budgets({1, 1}), 0.5, 0.08));
  EXPECT_NEAR(r[0], 0.42, 1e-12);
  EXPECT_NEAR(r[1], 0.58, 1e-12);
  auto u = ratios(allocate_owl(outliers, budgets({3, 1}), 0.5, 0.1));
  EXPECT_NEAR(u[0], 0.45, 1e-12);
  EXPECT_NEAR(u[1], 0.65, 1e-12);
}

TEST(PlanJson, RoundTrip) {
  std::vector<double> imp = {0.1, 0.5, 0.3};
  auto plan = allocate_das(imp, budgets({10, 20, 30}), 0.5, 0.1);
  auto back = plan_from_json(plan_to_json(plan));
  ASSERT_EQ(back.entries.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.entries[i].layer, plan.entries[i].layer);
    EXPECT_EQ(back.entries[i].ratio, plan.entries[i].ratio);
    EXPECT_EQ(back.entries[i].param_count, plan.entries[i].param_count);
  }
  EXPECT_THROW(parse_layer_name("block.1.q"), FormatError);
  EXPECT_THROW(parse_layer_name("blocks.1.qq"), FormatError);
}
