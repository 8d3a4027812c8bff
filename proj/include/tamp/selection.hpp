#pragma once

// Input-token selection for activation statistics.
//
// AMIA: token contributions come from the final query's attention row. They
// are propagated once over a cosine kNN graph of the layer's output tokens
// (a_i += sum_j e_ij a_j, e_ij = exp(-gamma d_ij)), then tokens are picked
// greedily by contribution while each pick penalizes its neighbours
// (a_j -= e_ij a_i). Picking stops once the MMD between the full token set and
// the selection drops below a threshold.

#include <algorithm>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "tamp/diversity.hpp"

namespace tamp {

struct TokenContribution {
  std::vector<double> a;
};

/// Attention distribution of the final query position over all keys.
inline TokenContribution token_contributions(const Matrix& attention) {
  if (attention.rows() != attention.cols() || attention.rows() == 0)
    throw ShapeError("attention matrix must be square and non-empty");
  TokenContribution tc;
  auto last = attention.row(attention.rows() - 1);
  tc.a.assign(last.begin(), last.end());
  for (double v : tc.a)
    if (!std::isfinite(v)) throw NumericError("non-finite attention value");
  return tc;
}

/// Symmetric N x N cosine distances between rows of z (norm floor for zeros).
inline std::vector<double> cosine_distance_matrix(const Matrix& z) {
  const std::size_t n = z.rows();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto u = diversity_detail::unit_rows(z, idx);
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = diversity_detail::clamp_distance(1.0 - diversity_detail::dotd(u[i], u[j]));
      d[i * n + j] = v;
      d[j * n + i] = v;
    }
  return d;
}

struct NeighborGraph {
  std::size_t k = 0;
  double gamma_forward = 1.0;
  double gamma_reverse = 0.2;
  std::vector<std::vector<std::size_t>> neighbors;   // per token, ascending distance
  std::vector<std::vector<double>> distances;        // matching d_ij
  std::vector<std::vector<double>> weights_forward;  // exp(-gamma_forward d_ij)
  std::vector<std::vector<double>> weights_reverse;  // exp(-gamma_reverse d_ij)

  std::size_t size() const { return neighbors.size(); }
};

/// k nearest neighbours by cosine distance, ties to the lower index. `dist`
/// is the row-major N x N matrix from cosine_distance_matrix.
inline NeighborGraph build_knn(std::span<const double> dist, std::size_t n, std::size_t k,
                               double gamma_forward, double gamma_reverse) {
  if (dist.size() != n * n) throw ShapeError("distance matrix size mismatch");
  if (k == 0) throw ConfigError("k must be >= 1");
  if (n <= k)
    throw InsufficientTokensError("kNN needs more than " + std::to_string(k) + " tokens, got " +
                                  std::to_string(n));
  NeighborGraph g;
  g.k = k;
  g.gamma_forward = gamma_forward;
  g.gamma_reverse = gamma_reverse;
  g.neighbors.resize(n);
  g.distances.resize(n);
  g.weights_forward.resize(n);
  g.weights_reverse.resize(n);
  std::vector<std::size_t> order(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t w = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) order[w++] = j;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double da = dist[i * n + a];
                        const double db = dist[i * n + b];
                        return da < db || (da == db && a < b);
                      });
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t j = order[r];
      const double d = dist[i * n + j];
      g.neighbors[i].push_back(j);
      g.distances[i].push_back(d);
      g.weights_forward[i].push_back(std::exp(-gamma_forward * d));
      g.weights_reverse[i].push_back(std::exp(-gamma_reverse * d));
    }
  }
  return g;
}

inline NeighborGraph build_knn(const Matrix& z, std::size_t k, double gamma_forward,
                               double gamma_reverse = 0.2) {
  if (z.rows() <= k)
    throw InsufficientTokensError("kNN needs more than " + std::to_string(k) + " tokens, got " +
                                  std::to_string(z.rows()));
  return build_knn(cosine_distance_matrix(z), z.rows(), k, gamma_forward, gamma_reverse);
}

/// One synchronous propagation pass; every update reads the original a.
inline std::vector<double> forward_update(std::span<const double> a, const NeighborGraph& g) {
  if (a.size() != g.size()) throw ShapeError("contribution length does not match graph size");
  std::vector<double> out(a.begin(), a.end());
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t r = 0; r < g.neighbors[i].size(); ++r)
      out[i] += g.weights_forward[i][r] * a[g.neighbors[i][r]];
  return out;
}

/// Mean kernel value exp(-gamma d_ij) over all i in a, j in b.
inline double kernel_mean(std::span<const std::size_t> a, std::span<const std::size_t> b,
                          std::span<const double> dist, std::size_t n, double gamma) {
  double s = 0.0;
  for (auto i : a)
    for (auto j : b) s += std::exp(-gamma * dist[i * n + j]);
  return s / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

/// A(C,C) + A(C',C') - 2 A(C,C'), clipped at 0.
inline double mmd(std::span<const std::size_t> full, std::span<const std::size_t> subset,
                  std::span<const double> dist, std::size_t n, double gamma) {
  if (full.empty() || subset.empty()) throw InsufficientTokensError("MMD of an empty set");
  const double v = kernel_mean(full, full, dist, n, gamma) +
                   kernel_mean(subset, subset, dist, n, gamma) -
                   2.0 * kernel_mean(full, subset, dist, n, gamma);
  return std::max(v, 0.0);
}

enum class StopReason { threshold, exhausted, max_count };

inline const char* stop_reason_name(StopReason r) {
  switch (r) {
    case StopReason::threshold:
      return "threshold";
    case StopReason::exhausted:
      return "exhausted";
    case StopReason::max_count:
      return "max_count";
  }
  return "?";
}

struct SelectionResult {
  std::vector<std::size_t> selected;  // pick order
  std::vector<double> mmd_trace;      // MMD after each pick
  double threshold = 0.0;
  StopReason stopped_by = StopReason::exhausted;
};

struct SelectionLimits {
  std::optional<std::size_t> min_count;  // default max(k+1, 4)
  std::optional<std::size_t> max_count;
};

/// Greedy reverse pass with neighbour penalties and MMD stopping. The MMD
/// kernel is exp(-graph.gamma_reverse d) over all pairs of the full sets.
inline SelectionResult reverse_select(std::span<const double> contributions,
                                      const NeighborGraph& graph, std::span<const double> dist,
                                      double threshold, const SelectionLimits& limits = {}) {
  const std::size_t n = graph.size();
  if (contributions.size() != n) throw ShapeError("contribution length does not match graph");
  if (dist.size() != n * n) throw ShapeError("distance matrix size mismatch");
  if (!(threshold >= 0.0)) throw ConfigError("MMD threshold must be >= 0");
  const double gamma = graph.gamma_reverse;
  const std::size_t min_count =
      std::min(n, limits.min_count.value_or(std::max<std::size_t>(graph.k + 1, 4)));
  const std::size_t max_count = std::min(n, limits.max_count.value_or(n));

  // Row sums of the kernel over the full set, and the constant A(C,C).
  std::vector<double> row_sum(n, 0.0);
  double full_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) row_sum[i] += std::exp(-gamma * dist[i * n + j]);
    full_sum += row_sum[i];
  }
  const double a_cc = full_sum / static_cast<double>(n * n);

  SelectionResult res;
  res.threshold = threshold;
  std::vector<double> a(contributions.begin(), contributions.end());
  std::vector<bool> taken(n, false);
  double cross_sum = 0.0;  // sum_{i in C, j in C'} e_ij
  double self_sum = 0.0;   // sum_{i,j in C'} e_ij
  while (res.selected.size() < n) {
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i)
      if (!taken[i] && (pick == n || a[i] > a[pick])) pick = i;
    taken[pick] = true;
    const double a_pick = a[pick];
    for (std::size_t r = 0; r < graph.neighbors[pick].size(); ++r)
      a[graph.neighbors[pick][r]] -= graph.weights_reverse[pick][r] * a_pick;

    cross_sum += row_sum[pick];
    double with_new = 1.0;  // e_tt
    for (auto j : res.selected) with_new += 2.0 * std::exp(-gamma * dist[pick * n + j]);
    self_sum += with_new;
    res.selected.push_back(pick);

    const double m = static_cast<double>(res.selected.size());
    const double value =
        std::max(0.0, a_cc + self_sum / (m * m) - 2.0 * cross_sum / (static_cast<double>(n) * m));
    res.mmd_trace.push_back(value);

    if (res.selected.size() < min_count) continue;
    if (value < threshold) {
      res.stopped_by = StopReason::threshold;
      return res;
    }
    if (res.selected.size() >= max_count && max_count < n) {
      res.stopped_by = StopReason::max_count;
      return res;
    }
  }
  res.stopped_by = StopReason::exhausted;
  return res;
}

// ---------------------------------------------------------------- variants

enum class SelectionKind { full, random, attention, amia };

inline const char* selection_kind_name(SelectionKind k) {
  switch (k) {
    case SelectionKind::full:
      return "full";
    case SelectionKind::random:
      return "random";
    case SelectionKind::attention:
      return "attention";
    case SelectionKind::amia:
      return "amia";
  }
  return "?";
}

inline SelectionKind selection_kind_from_name(const std::string& s) {
  for (auto k : {SelectionKind::full, SelectionKind::random, SelectionKind::attention,
                 SelectionKind::amia})
    if (s == selection_kind_name(k)) return k;
  throw ConfigError("unknown selection kind '" + s + "'");
}

struct SelectionParams {
  std::size_t k = 3;
  double gamma_forward = 1.0;
  double gamma_reverse = 0.2;
  double mmd_coefficient = 0.1;
  std::size_t random_count = 100;
  SelectionLimits limits;
};

/// Everything a variant may need for one (layer, sample).
struct SelectionInputs {
  const Matrix* attention = nullptr;  // block attention, N x N
  const Matrix* outputs = nullptr;    // the layer's output tokens, N x C_out
  double layer_importance = 0.0;      // diversity importance s of the layer
  std::uint64_t seed = 0;
};

struct VariantSelection {
  std::vector<std::size_t> indices;  // ascending for full/random/attention, pick order for amia
  std::optional<SelectionResult> amia;
};

inline VariantSelection select_variant(SelectionKind kind, std::size_t n_tokens,
                                       const SelectionInputs& in, const SelectionParams& params) {
  VariantSelection out;
  auto all = [&] {
    std::vector<std::size_t> v(n_tokens);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
  };
  switch (kind) {
    case SelectionKind::full:
      out.indices = all();
      break;
    case SelectionKind::random: {
      Rng rng(in.seed);
      out.indices = rng.sample_without_replacement(n_tokens, params.random_count);
      std::sort(out.indices.begin(), out.indices.end());
      break;
    }
    case SelectionKind::attention: {
      if (!in.attention) throw ConfigError("attention selection needs captured attention");
      const auto tc = token_contributions(*in.attention);
      const double mean =
          std::accumulate(tc.a.begin(), tc.a.end(), 0.0) / static_cast<double>(tc.a.size());
      for (std::size_t i = 0; i < tc.a.size(); ++i)
        if (tc.a[i] > mean) out.indices.push_back(i);
      if (out.indices.empty()) out.indices = all();
      break;
    }
    case SelectionKind::amia: {
      if (!in.attention || !in.outputs)
        throw ConfigError("AMIA selection needs attention and layer outputs");
      if (n_tokens <= params.k) {
        // Too few tokens for a kNN graph; every token is kept.
        out.indices = all();
        SelectionResult r;
        r.selected = out.indices;
        r.mmd_trace.assign(out.indices.size(), 0.0);
        r.stopped_by = StopReason::exhausted;
        out.amia = std::move(r);
        break;
      }
      const auto tc = token_contributions(*in.attention);
      const auto dist = cosine_distance_matrix(*in.outputs);
      const auto graph =
          build_knn(dist, n_tokens, params.k, params.gamma_forward, params.gamma_reverse);
      const auto boosted = forward_update(tc.a, graph);
      const double threshold =
          params.mmd_coefficient * std::sqrt(std::max(in.layer_importance, 0.0));
      auto r = reverse_select(boosted, graph, dist, threshold, params.limits);
      out.indices = r.selected;
      out.amia = std::move(r);
      break;
    }
  }
  return out;
}

}  // namespace tamp
