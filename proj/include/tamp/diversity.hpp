#pragma once

// Output-token diversity: mean pairwise cosine distance of a layer's output
// tokens within a modality (intra) and across two modalities (inter), and the
// layer importance derived from them.

#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "tamp/model.hpp"

namespace tamp {

/// Norm floor applied when normalizing tokens inside set-level diversities.
inline constexpr double kNormFloor = 1e-12;

/// 1 - <u,v>/(|u||v|). Throws DegenerateError for a zero-norm input.
inline double cosine_distance(std::span<const float> u, std::span<const float> v) {
  const double nu = std::sqrt(squared_norm(u));
  const double nv = std::sqrt(squared_norm(v));
  if (nu == 0.0 || nv == 0.0) throw DegenerateError("cosine distance of a zero-norm vector");
  const double c = std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
  return 1.0 - c;
}

/// Optional Monte-Carlo estimate of pairwise means. When the number of pairs
/// does not exceed `max_pairs` the exact value is returned.
struct PairSampling {
  std::size_t max_pairs = 0;
  std::uint64_t seed = 0;
};

namespace diversity_detail {

// Unit rows in double precision; zero rows stay zero.
inline std::vector<std::vector<double>> unit_rows(const Matrix& z,
                                                  std::span<const std::size_t> idx) {
  std::vector<std::vector<double>> out;
  out.reserve(idx.size());
  for (auto i : idx) {
    if (i >= z.rows()) throw ShapeError("token index out of range");
    auto r = z.row(i);
    const double n = std::max(std::sqrt(squared_norm(r)), kNormFloor);
    std::vector<double> u(r.size());
    for (std::size_t c = 0; c < r.size(); ++c) u[c] = r[c] / n;
    out.push_back(std::move(u));
  }
  return out;
}

inline double dotd(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline std::vector<double> column_sum(const std::vector<std::vector<double>>& rows,
                                      std::size_t dim) {
  std::vector<double> s(dim, 0.0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < dim; ++c) s[c] += r[c];
  return s;
}

inline double clamp_distance(double d) { return std::clamp(d, 0.0, 2.0); }

}  // namespace diversity_detail

/// Mean cosine distance over unordered pairs i != j of `span`.
inline double intra_diversity(const Matrix& z, std::span<const std::size_t> span,
                              const std::optional<PairSampling>& sampling = std::nullopt) {
  using namespace diversity_detail;
  const std::size_t n = span.size();
  if (n < 2) throw InsufficientTokensError("intra diversity needs at least 2 tokens");
  const auto u = unit_rows(z, span);
  const std::size_t pairs = n * (n - 1) / 2;
  if (sampling && sampling->max_pairs > 0 && pairs > sampling->max_pairs) {
    Rng rng(sampling->seed);
    double acc = 0.0;
    for (std::size_t s = 0; s < sampling->max_pairs; ++s) {
      const auto i = static_cast<std::size_t>(rng.below(n));
      auto j = static_cast<std::size_t>(rng.below(n - 1));
      if (j >= i) ++j;
      acc += 1.0 - dotd(u[i], u[j]);
    }
    return clamp_distance(acc / static_cast<double>(sampling->max_pairs));
  }
  // sum_{i != j} u_i.u_j = |sum u|^2 - sum |u_i|^2
  const auto total = column_sum(u, z.cols());
  double self = 0.0;
  for (const auto& r : u) self += dotd(r, r);
  const double mean_cos = (dotd(total, total) - self) / static_cast<double>(n * (n - 1));
  return clamp_distance(1.0 - mean_cos);
}

/// Mean cosine distance over the full cross product of two token sets.
inline double inter_diversity(const Matrix& z, std::span<const std::size_t> span_a,
                              std::span<const std::size_t> span_b) {
  using namespace diversity_detail;
  if (span_a.empty() || span_b.empty())
    throw InsufficientTokensError("inter diversity needs non-empty spans");
  const auto sa = column_sum(unit_rows(z, span_a), z.cols());
  const auto sb = column_sum(unit_rows(z, span_b), z.cols());
  const double mean_cos =
      dotd(sa, sb) / (static_cast<double>(span_a.size()) * static_cast<double>(span_b.size()));
  return clamp_distance(1.0 - mean_cos);
}

inline double all_token_diversity(const Matrix& z,
                                  const std::optional<PairSampling>& sampling = std::nullopt) {
  std::vector<std::size_t> all(z.rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return intra_diversity(z, all, sampling);
}

/// Mean over tokens of cos(in_i, out_i). Zero rows use the norm floor.
inline double block_input_output_similarity(const Matrix& block_in, const Matrix& block_out) {
  if (block_in.rows() != block_out.rows() || block_in.cols() != block_out.cols())
    throw ShapeError("block input/output shapes differ");
  if (block_in.rows() == 0) throw InsufficientTokensError("no tokens");
  double acc = 0.0;
  for (std::size_t i = 0; i < block_in.rows(); ++i) {
    const double na = std::max(std::sqrt(squared_norm(block_in.row(i))), kNormFloor);
    const double nb = std::max(std::sqrt(squared_norm(block_out.row(i))), kNormFloor);
    acc += std::clamp(dot(block_in.row(i), block_out.row(i)) / (na * nb), -1.0, 1.0);
  }
  return acc / static_cast<double>(block_in.rows());
}

// ---------------------------------------------------------------- per layer

/// Diversity terms of one layer, averaged over calibration samples.
struct LayerDiversity {
  std::map<int, double> intra;                 // modality id -> s_m
  std::map<std::pair<int, int>, double> inter;  // (a < b) -> s_ab
  std::optional<double> all_token;             // s over all tokens
  double importance = 0.0;
};

/// Unweighted mean of every present intra and inter term. For two modalities
/// this is (s_v + s_l + s_vl) / 3.
inline double layer_importance(const LayerDiversity& d) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [m, v] : d.intra) {
    sum += v;
    ++n;
  }
  for (const auto& [p, v] : d.inter) {
    sum += v;
    ++n;
  }
  if (n == 0) throw DegenerateError("no diversity terms available for layer importance");
  return sum / static_cast<double>(n);
}

enum class ImportanceMode { modality, all_token };

struct DiversityStats {
  std::vector<ModalityId> modalities;
  std::vector<LayerDiversity> layers;  // indexed by LayerId::flat()
};

/// Running per-sample means of diversity terms for one layer.
class LayerDiversityAccumulator {
 public:
  /// Adds one sample's terms. Spans with fewer than 2 tokens skip their intra
  /// term, empty spans skip their inter terms.
  void add_sample(const Matrix& z, const std::vector<Span>& spans,
                  const std::optional<PairSampling>& sampling = std::nullopt) {
    TokenSequence probe;
    probe.spans = spans;
    const auto mods = probe.modalities();
    std::vector<std::vector<std::size_t>> idx;
    for (const auto& m : mods) idx.push_back(probe.indices_of(m.id));
    for (std::size_t a = 0; a < mods.size(); ++a) {
      if (idx[a].size() >= 2) {
        auto& t = intra_[mods[a].id];
        t.first += intra_diversity(z, idx[a], sampling);
        t.second += 1;
      }
      for (std::size_t b = a + 1; b < mods.size(); ++b) {
        if (idx[a].empty() || idx[b].empty()) continue;
        const auto key = std::minmax(mods[a].id, mods[b].id);
        auto& t = inter_[key];
        t.first += inter_diversity(z, idx[a], idx[b]);
        t.second += 1;
      }
    }
    if (z.rows() >= 2) {
      all_.first += all_token_diversity(z, sampling);
      all_.second += 1;
    }
  }

  LayerDiversity finish() const {
    LayerDiversity d;
    for (const auto& [k, t] : intra_) d.intra[k] = t.first / t.second;
    for (const auto& [k, t] : inter_) d.inter[k] = t.first / t.second;
    if (all_.second > 0) d.all_token = all_.first / all_.second;
    d.importance = layer_importance(d);
    return d;
  }

 private:
  std::map<int, std::pair<double, double>> intra_;
  std::map<std::pair<int, int>, std::pair<double, double>> inter_;
  std::pair<double, double> all_{0.0, 0.0};
};

/// Importance scores per layer (flat index) under the chosen aggregation.
inline std::vector<double> layer_importances(const DiversityStats& stats, ImportanceMode mode) {
  std::vector<double> out;
  out.reserve(stats.layers.size());
  for (const auto& l : stats.layers) {
    if (mode == ImportanceMode::all_token) {
      if (!l.all_token) throw DegenerateError("all-token diversity unavailable");
      out.push_back(*l.all_token);
    } else {
      out.push_back(l.importance);
    }
  }
  return out;
}

}  // namespace tamp
