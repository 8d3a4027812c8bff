#pragma once

// Fidelity metrics for pruned models and the analysis reports built on traces
// and plans.

#include <map>
#include <string>
#include <vector>

#include "tamp/allocation.hpp"
#include "tamp/model.hpp"

namespace tamp {

struct EvalMetrics {
  std::vector<ModalityId> modalities;
  std::vector<double> layer_rel_error;                      // per layer (flat index)
  std::vector<std::map<int, double>> layer_rel_error_by_modality;
  double final_rel_error = 0.0;                             // final hidden states
  std::map<int, double> final_rel_error_by_modality;
  double mean_cosine = 1.0;                                 // per-token, final hidden
  std::map<int, double> mean_cosine_by_modality;
};

namespace eval_detail {

struct ErrSum {
  double diff = 0.0;
  double ref = 0.0;
  double value() const {
    if (ref > 0.0) return std::sqrt(diff / ref);
    return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  }
};

inline double token_cosine(std::span<const float> a, std::span<const float> b) {
  const double na = squared_norm(a);
  const double nb = squared_norm(b);
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot(a, b) / std::sqrt(na * nb), -1.0, 1.0);
}

inline int modality_of(const std::vector<Span>& spans, std::size_t token) {
  for (const auto& s : spans)
    if (token >= s.start && token < s.start + s.len) return s.modality.id;
  return -1;
}

inline void check_same_architecture(const ToyModel& a, const ToyModel& b) {
  if (a.d_model != b.d_model || a.d_ff != b.d_ff || a.n_heads != b.n_heads ||
      a.blocks.size() != b.blocks.size())
    throw ConfigError("models have different architectures");
}

}  // namespace eval_detail

/// Compares the pruned model against the dense one on held-out sequences.
/// Layer errors compare each model's own layer outputs, so upstream pruning
/// error propagates into downstream layers.
inline EvalMetrics reconstruction_report(const ToyModel& dense, const ToyModel& pruned,
                                         std::span<const TokenSequence> eval_set,
                                         unsigned threads = 1) {
  using namespace eval_detail;
  check_same_architecture(dense, pruned);
  if (eval_set.empty()) throw ConfigError("evaluation set is empty");
  const std::size_t n_layers = dense.n_layers();

  struct Partial {
    std::vector<ErrSum> layer;
    std::vector<std::map<int, ErrSum>> layer_mod;
    ErrSum final_all;
    std::map<int, ErrSum> final_mod;
    double cos_sum = 0.0;
    std::size_t tokens = 0;
    std::map<int, std::pair<double, std::size_t>> cos_mod;
  };
  std::vector<Partial> parts(eval_set.size());
  CaptureFlags flags;
  flags.layer_outputs = true;
  parallel_for(eval_set.size(), threads, [&](std::size_t s) {
    const auto& seq = eval_set[s];
    const auto d = forward(dense, seq, flags);
    const auto p = forward(pruned, seq, flags);
    auto& part = parts[s];
    part.layer.resize(n_layers);
    part.layer_mod.resize(n_layers);
    for (std::size_t li = 0; li < n_layers; ++li) {
      const auto id = LayerId::from_flat(li);
      const Matrix& zd = d.trace.blocks[id.block].output(id.kind);
      const Matrix& zp = p.trace.blocks[id.block].output(id.kind);
      for (std::size_t t = 0; t < zd.rows(); ++t) {
        double diff = 0.0;
        double ref = 0.0;
        for (std::size_t c = 0; c < zd.cols(); ++c) {
          const double e = static_cast<double>(zd(t, c)) - zp(t, c);
          diff += e * e;
          ref += static_cast<double>(zd(t, c)) * zd(t, c);
        }
        part.layer[li].diff += diff;
        part.layer[li].ref += ref;
        auto& m = part.layer_mod[li][modality_of(seq.spans, t)];
        m.diff += diff;
        m.ref += ref;
      }
    }
    for (std::size_t t = 0; t < d.hidden.rows(); ++t) {
      double diff = 0.0;
      double ref = 0.0;
      for (std::size_t c = 0; c < d.hidden.cols(); ++c) {
        const double e = static_cast<double>(d.hidden(t, c)) - p.hidden(t, c);
        diff += e * e;
        ref += static_cast<double>(d.hidden(t, c)) * d.hidden(t, c);
      }
      const int mod = modality_of(seq.spans, t);
      part.final_all.diff += diff;
      part.final_all.ref += ref;
      part.final_mod[mod].diff += diff;
      part.final_mod[mod].ref += ref;
      const double c = token_cosine(d.hidden.row(t), p.hidden.row(t));
      part.cos_sum += c;
      part.tokens += 1;
      part.cos_mod[mod].first += c;
      part.cos_mod[mod].second += 1;
    }
  });

  std::vector<ErrSum> layer(n_layers);
  std::vector<std::map<int, ErrSum>> layer_mod(n_layers);
  ErrSum final_all;
  std::map<int, ErrSum> final_mod;
  double cos_sum = 0.0;
  std::size_t tokens = 0;
  std::map<int, std::pair<double, std::size_t>> cos_mod;
  EvalMetrics out;
  for (std::size_t s = 0; s < parts.size(); ++s) {
    const auto& part = parts[s];
    for (std::size_t li = 0; li < n_layers; ++li) {
      layer[li].diff += part.layer[li].diff;
      layer[li].ref += part.layer[li].ref;
      for (const auto& [m, e] : part.layer_mod[li]) {
        layer_mod[li][m].diff += e.diff;
        layer_mod[li][m].ref += e.ref;
      }
    }
    final_all.diff += part.final_all.diff;
    final_all.ref += part.final_all.ref;
    for (const auto& [m, e] : part.final_mod) {
      final_mod[m].diff += e.diff;
      final_mod[m].ref += e.ref;
    }
    cos_sum += part.cos_sum;
    tokens += part.tokens;
    for (const auto& [m, c] : part.cos_mod) {
      cos_mod[m].first += c.first;
      cos_mod[m].second += c.second;
    }
    for (const auto& m : eval_set[s].modalities()) {
      bool seen = false;
      for (const auto& k : out.modalities) seen = seen || k.id == m.id;
      if (!seen) out.modalities.push_back(m);
    }
  }
  std::sort(out.modalities.begin(), out.modalities.end(),
            [](const ModalityId& a, const ModalityId& b) { return a.id < b.id; });
  for (std::size_t li = 0; li < n_layers; ++li) {
    out.layer_rel_error.push_back(layer[li].value());
    std::map<int, double> by_mod;
    for (const auto& [m, e] : layer_mod[li]) by_mod[m] = e.value();
    out.layer_rel_error_by_modality.push_back(std::move(by_mod));
  }
  out.final_rel_error = final_all.value();
  for (const auto& [m, e] : final_mod) out.final_rel_error_by_modality[m] = e.value();
  out.mean_cosine = tokens ? cos_sum / static_cast<double>(tokens) : 1.0;
  for (const auto& [m, c] : cos_mod)
    out.mean_cosine_by_modality[m] = c.first / static_cast<double>(c.second);
  return out;
}

// ---------------------------------------------------------------- rel-avg

struct TaskScore {
  double pruned = 0.0;
  double reference = 0.0;
};

/// Mean over tasks of 100 * pruned / reference.
inline double rel_avg(const std::map<std::string, TaskScore>& scores) {
  if (scores.empty()) throw ConfigError("rel_avg needs at least one task");
  double sum = 0.0;
  for (const auto& [task, s] : scores) {
    if (!(s.reference > 0.0)) throw ConfigError("reference score for '" + task + "' must be > 0");
    sum += 100.0 * s.pruned / s.reference;
  }
  return sum / static_cast<double>(scores.size());
}

/// Reconstruction-derived task scores: the per-token cosine similarity of
/// final hidden states (clipped at 0), overall and per modality. The dense
/// model scores exactly 1 on each.
inline std::map<std::string, TaskScore> reconstruction_tasks(const EvalMetrics& m) {
  std::map<std::string, TaskScore> tasks;
  tasks["cos_all"] = {std::max(m.mean_cosine, 0.0), 1.0};
  for (const auto& mod : m.modalities) {
    auto it = m.mean_cosine_by_modality.find(mod.id);
    if (it != m.mean_cosine_by_modality.end())
      tasks["cos_" + mod.name] = {std::max(it->second, 0.0), 1.0};
  }
  return tasks;
}

// ---------------------------------------------------------------- attention

struct AttentionProfile {
  std::vector<ModalityId> modalities;
  std::vector<std::map<int, double>> per_block;  // modality id -> mean mass
};

/// Mean over queries (and samples) of the attention mass that lands on each
/// modality's keys.
inline AttentionProfile attention_by_modality(std::span<const ActivationTrace> traces) {
  if (traces.empty()) throw ConfigError("no traces");
  AttentionProfile out;
  std::vector<std::map<int, double>> sums;
  std::size_t queries = 0;
  for (const auto& t : traces) {
    if (!t.flags.attention) throw ConfigError("trace was captured without attention");
    if (sums.empty()) sums.resize(t.blocks.size());
    if (t.blocks.size() != sums.size()) throw ShapeError("traces have different block counts");
    TokenSequence probe;
    probe.spans = t.spans;
    for (const auto& m : probe.modalities()) {
      bool seen = false;
      for (const auto& k : out.modalities) seen = seen || k.id == m.id;
      if (!seen) out.modalities.push_back(m);
    }
    for (std::size_t b = 0; b < t.blocks.size(); ++b) {
      const Matrix& a = t.blocks[b].attention;
      if (a.rows() != t.n_tokens || a.cols() != t.n_tokens)
        throw ShapeError("attention shape mismatch");
      for (const auto& m : out.modalities) sums[b].try_emplace(m.id, 0.0);
      for (std::size_t q = 0; q < a.rows(); ++q)
        for (const auto& sp : t.spans) {
          double mass = 0.0;
          for (std::size_t j = sp.start; j < sp.start + sp.len; ++j) mass += a(q, j);
          sums[b][sp.modality.id] += mass;
        }
    }
    queries += t.n_tokens;
  }
  std::sort(out.modalities.begin(), out.modalities.end(),
            [](const ModalityId& a, const ModalityId& b) { return a.id < b.id; });
  for (auto& s : sums) {
    std::map<int, double> block;
    for (const auto& m : out.modalities) block[m.id] = s[m.id] / static_cast<double>(queries);
    out.per_block.push_back(std::move(block));
  }
  return out;
}

// ---------------------------------------------------------------- sparsity

struct SparsityReport {
  std::map<LayerKind, double> per_kind;  // mean ratio over blocks
  std::vector<double> per_block;         // parameter-weighted mean ratio
};

inline SparsityReport sparsity_report(const SparsityPlan& plan) {
  if (plan.entries.empty()) throw ConfigError("empty plan");
  std::map<LayerKind, std::pair<double, std::size_t>> kinds;
  std::map<std::size_t, std::pair<long double, long double>> blocks;
  for (const auto& e : plan.entries) {
    kinds[e.layer.kind].first += e.ratio;
    kinds[e.layer.kind].second += 1;
    blocks[e.layer.block].first += static_cast<long double>(e.param_count) * e.ratio;
    blocks[e.layer.block].second += static_cast<long double>(e.param_count);
  }
  SparsityReport r;
  for (const auto& [k, v] : kinds) r.per_kind[k] = v.first / static_cast<double>(v.second);
  for (const auto& [b, v] : blocks)
    r.per_block.push_back(v.second > 0 ? static_cast<double>(v.first / v.second) : 0.0);
  return r;
}

/// Reads achieved ratios from the stored masks (unmasked layers count as 0).
inline SparsityReport sparsity_report(const ToyModel& model) {
  if (model.blocks.empty()) throw ConfigError("model has no blocks");
  SparsityPlan plan;
  for (auto id : model.layer_ids()) {
    const auto& l = model.layer(id);
    const double ratio = l.mask ? static_cast<double>(l.mask->dropped()) /
                                      static_cast<double>(l.param_count())
                                : 0.0;
    plan.entries.push_back({id, l.param_count(), ratio});
  }
  return sparsity_report(plan);
}

}  // namespace tamp
