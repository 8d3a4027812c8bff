#pragma once

// Layer-wise sparsity allocation under a parameter-weighted global budget.
//
// Importances are min-max normalized to s' in [0,1] and mapped to a raw ratio
// p + lambda * (1 - 2 s'); a common shift c is then solved so that
// sum_l n_l * clamp(raw_l + c, 0, 1) == p * sum_l n_l (water-filling over the
// box [0,1]). Higher importance never receives a higher ratio.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "tamp/model.hpp"

namespace tamp {

struct LayerBudget {
  LayerId id;
  std::size_t param_count = 0;
};

struct PlanEntry {
  LayerId layer;
  std::size_t param_count = 0;
  double ratio = 0.0;
};

struct SparsityPlan {
  double target = 0.0;
  double lambda = 0.0;
  std::string method;
  std::vector<PlanEntry> entries;

  /// Parameter-weighted mean ratio.
  double weighted_mean() const {
    long double num = 0.0L;
    long double den = 0.0L;
    for (const auto& e : entries) {
      num += static_cast<long double>(e.param_count) * e.ratio;
      den += static_cast<long double>(e.param_count);
    }
    return den > 0 ? static_cast<double>(num / den) : 0.0;
  }

  const PlanEntry& at(LayerId id) const {
    for (const auto& e : entries)
      if (e.layer == id) return e;
    throw ConfigError("plan has no entry for " + id.name());
  }
};

inline std::vector<LayerBudget> layer_budgets(const ToyModel& m) {
  std::vector<LayerBudget> out;
  for (auto id : m.layer_ids()) out.push_back({id, m.layer(id).param_count()});
  return out;
}

inline constexpr double kBudgetTolerance = 1e-9;

namespace allocation_detail {

inline std::vector<double> minmax_normalize(std::span<const double> s) {
  const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
  std::vector<double> out(s.size(), 0.5);
  if (*hi > *lo)
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - *lo) / (*hi - *lo);
  return out;
}

/// Solves for the shift c and returns the clamped ratios.
inline std::vector<double> water_fill(std::span<const double> raw,
                                      std::span<const double> weights, double target) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  const double goal = target * total;
  auto filled = [&](double c) {
    double g = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i)
      g += weights[i] * std::clamp(raw[i] + c, 0.0, 1.0);
    return g;
  };
  auto apply = [&](double c) {
    std::vector<double> r(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) r[i] = std::clamp(raw[i] + c, 0.0, 1.0);
    return r;
  };
  if (std::abs(filled(0.0) - goal) <= 1e-12 * std::max(total, 1.0)) return apply(0.0);

  std::vector<double> breaks;
  breaks.reserve(2 * raw.size());
  for (double r : raw) {
    breaks.push_back(-r);
    breaks.push_back(1.0 - r);
  }
  std::sort(breaks.begin(), breaks.end());
  breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());
  // g is continuous, nondecreasing and linear between consecutive breakpoints.
  double prev_c = breaks.front();
  double prev_g = filled(prev_c);
  if (goal <= prev_g) return apply(prev_c);
  for (std::size_t b = 1; b < breaks.size(); ++b) {
    const double c = breaks[b];
    const double g = filled(c);
    if (goal <= g) {
      const double c_star = g > prev_g ? prev_c + (goal - prev_g) * (c - prev_c) / (g - prev_g)
                                       : prev_c;
      return apply(c_star);
    }
    prev_c = c;
    prev_g = g;
  }
  return apply(breaks.back());
}

}  // namespace allocation_detail

/// Throws InfeasibleError when the clamped solution cannot meet the budget.
inline void check_budget(const SparsityPlan& plan) {
  for (const auto& e : plan.entries)
    if (!(e.ratio >= 0.0 && e.ratio <= 1.0))
      throw InfeasibleError("ratio out of range for " + e.layer.name());
  const double achieved = plan.weighted_mean();
  if (std::abs(achieved - plan.target) > kBudgetTolerance) {
    std::string binding;
    for (const auto& e : plan.entries)
      if (e.ratio == 0.0 || e.ratio == 1.0) binding += " " + e.layer.name();
    throw InfeasibleError("budget " + std::to_string(plan.target) + " unreachable (achieved " +
                          std::to_string(achieved) + "); binding layers:" +
                          (binding.empty() ? " none" : binding));
  }
}

/// Affine-deviation allocation with water-filling. Shared by DAS and OWL.
inline SparsityPlan allocate_by_importance(std::span<const double> importances,
                                           std::span<const LayerBudget> layers, double target,
                                           double lambda, std::string method) {
  if (layers.empty()) throw ConfigError("no layers to allocate");
  if (importances.size() != layers.size())
    throw ShapeError("importance count does not match layer count");
  if (!(target >= 0.0 && target <= 1.0))
    throw InfeasibleError("target sparsity " + std::to_string(target) + " outside [0,1]");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
  for (double s : importances)
    if (!std::isfinite(s) || s < 0.0) throw ConfigError("importances must be finite and >= 0");

  const auto norm = allocation_detail::minmax_normalize(importances);
  std::vector<double> raw(norm.size());
  std::vector<double> weights(norm.size());
  for (std::size_t i = 0; i < norm.size(); ++i) {
    raw[i] = target + lambda * (1.0 - 2.0 * norm[i]);
    weights[i] = static_cast<double>(layers[i].param_count);
  }
  const auto ratios = allocation_detail::water_fill(raw, weights, target);

  SparsityPlan plan;
  plan.target = target;
  plan.lambda = lambda;
  plan.method = std::move(method);
  for (std::size_t i = 0; i < layers.size(); ++i)
    plan.entries.push_back({layers[i].id, layers[i].param_count, ratios[i]});
  check_budget(plan);
  return plan;
}

inline SparsityPlan allocate_das(std::span<const double> importances,
                                 std::span<const LayerBudget> layers, double target,
                                 double lambda) {
  return allocate_by_importance(importances, layers, target, lambda, "das");
}

inline SparsityPlan allocate_uniform(std::span<const LayerBudget> layers, double target) {
  if (layers.empty()) throw ConfigError("no layers to allocate");
  if (!(target >= 0.0 && target <= 1.0))
    throw InfeasibleError("target sparsity outside [0,1]");
  SparsityPlan plan;
  plan.target = target;
  plan.method = "uniform";
  for (const auto& l : layers) plan.entries.push_back({l.id, l.param_count, target});
  return plan;
}

/// Block importance = mean of its layers' importances; every layer of a block
/// gets the block's ratio.
inline SparsityPlan allocate_blockwise_das(std::span<const double> importances,
                                           std::span<const LayerBudget> layers, double target,
                                           double lambda) {
  if (importances.size() != layers.size())
    throw ShapeError("importance count does not match layer count");
  std::vector<std::size_t> block_of;
  std::vector<double> block_sum;
  std::vector<double> block_count;
  std::vector<LayerBudget> blocks;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::size_t b = layers[i].id.block;
    auto it = std::find_if(blocks.begin(), blocks.end(),
                           [&](const LayerBudget& x) { return x.id.block == b; });
    std::size_t slot = static_cast<std::size_t>(it - blocks.begin());
    if (it == blocks.end()) {
      blocks.push_back({{b, LayerKind::q}, 0});
      block_sum.push_back(0.0);
      block_count.push_back(0.0);
    }
    blocks[slot].param_count += layers[i].param_count;
    block_sum[slot] += importances[i];
    block_count[slot] += 1.0;
    block_of.push_back(slot);
  }
  std::vector<double> block_imp(blocks.size());
  for (std::size_t b = 0; b < blocks.size(); ++b) block_imp[b] = block_sum[b] / block_count[b];
  const auto per_block = allocate_by_importance(block_imp, blocks, target, lambda, "blockwise_das");

  SparsityPlan plan;
  plan.target = target;
  plan.lambda = lambda;
  plan.method = "blockwise_das";
  for (std::size_t i = 0; i < layers.size(); ++i)
    plan.entries.push_back({layers[i].id, layers[i].param_count,
                            per_block.entries[block_of[i]].ratio});
  check_budget(plan);
  return plan;
}

/// Fraction of entries of I exceeding M * mean(I).
inline double owl_outlier_ratio(const Matrix& importance, double m) {
  if (!(m > 1.0)) throw ConfigError("OWL multiplier M must be > 1");
  if (importance.empty()) throw ShapeError("empty importance matrix");
  double sum = 0.0;
  for (float v : importance.flat()) sum += v;
  const double mean = sum / static_cast<double>(importance.size());
  if (mean == 0.0) return 0.0;
  std::size_t count = 0;
  for (float v : importance.flat()) count += static_cast<double>(v) > m * mean;
  return static_cast<double>(count) / static_cast<double>(importance.size());
}

inline SparsityPlan allocate_owl(std::span<const double> outlier_ratios,
                                 std::span<const LayerBudget> layers, double target,
                                 double lambda) {
  return allocate_by_importance(outlier_ratios, layers, target, lambda, "owl");
}

// ---------------------------------------------------------------- json

inline nlohmann::json plan_to_json(const SparsityPlan& plan) {
  nlohmann::json ratios = nlohmann::json::object();
  nlohmann::json params = nlohmann::json::object();
  for (const auto& e : plan.entries) {
    ratios[e.layer.name()] = e.ratio;
    params[e.layer.name()] = e.param_count;
  }
  return {{"target", plan.target},
          {"lambda", plan.lambda},
          {"method", plan.method},
          {"achieved", plan.weighted_mean()},
          {"ratios", ratios},
          {"param_counts", params}};
}

inline LayerId parse_layer_name(const std::string& name) {
  // blocks.<b>.<kind>
  const auto p1 = name.find('.');
  const auto p2 = name.find('.', p1 == std::string::npos ? 0 : p1 + 1);
  if (p1 == std::string::npos || p2 == std::string::npos || name.substr(0, p1) != "blocks")
    throw FormatError("bad layer id '" + name + "'");
  std::size_t block = 0;
  try {
    block = std::stoul(name.substr(p1 + 1, p2 - p1 - 1));
  } catch (const std::exception&) {
    throw FormatError("bad layer id '" + name + "'");
  }
  return {block, kind_from_name(name.substr(p2 + 1))};
}

inline SparsityPlan plan_from_json(const nlohmann::json& j) {
  SparsityPlan plan;
  try {
    plan.target = j.at("target").get<double>();
    plan.lambda = j.value("lambda", 0.0);
    plan.method = j.value("method", std::string("custom"));
    const auto& params = j.at("param_counts");
    for (const auto& [name, ratio] : j.at("ratios").items())
      plan.entries.push_back(
          {parse_layer_name(name), params.at(name).get<std::size_t>(), ratio.get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad plan json: ") + e.what());
  }
  std::sort(plan.entries.begin(), plan.entries.end(),
            [](const PlanEntry& a, const PlanEntry& b) { return a.layer < b.layer; });
  return plan;
}

}  // namespace tamp
