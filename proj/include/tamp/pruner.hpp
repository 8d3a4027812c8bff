#pragma once

// Weight scoring, mask generation and the calibration-driven pruning pipeline.

#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tamp/allocation.hpp"
#include "tamp/diversity.hpp"
#include "tamp/selection.hpp"

namespace tamp {

// ---------------------------------------------------------------- activation

struct InputActivation {
  std::vector<double> norms;  // per input channel
  std::size_t token_count = 0;
  SelectionKind selection_kind = SelectionKind::full;
};

/// Accumulates per-channel sums of squares across calibration samples.
class ActivationAccumulator {
 public:
  explicit ActivationAccumulator(std::size_t channels = 0) : sumsq_(channels, 0.0) {}

  void add_rows(const Matrix& x, std::span<const std::size_t> rows) {
    if (sumsq_.empty()) sumsq_.assign(x.cols(), 0.0);
    if (x.cols() != sumsq_.size()) throw ShapeError("activation width mismatch");
    for (auto r : rows) {
      auto row = x.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) sumsq_[c] += static_cast<double>(row[c]) * row[c];
    }
    tokens_ += rows.size();
  }

  void add_all(const Matrix& x) {
    std::vector<std::size_t> rows(x.rows());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    add_rows(x, rows);
  }

  void merge(const ActivationAccumulator& other) {
    if (sumsq_.empty()) sumsq_.assign(other.sumsq_.size(), 0.0);
    if (other.sumsq_.size() != sumsq_.size()) throw ShapeError("activation width mismatch");
    for (std::size_t c = 0; c < sumsq_.size(); ++c) sumsq_[c] += other.sumsq_[c];
    tokens_ += other.tokens_;
  }

  std::size_t tokens() const { return tokens_; }

  InputActivation finish(SelectionKind kind) const {
    if (tokens_ == 0) throw InsufficientTokensError("input activation over an empty token set");
    InputActivation act;
    act.norms.resize(sumsq_.size());
    for (std::size_t c = 0; c < sumsq_.size(); ++c) act.norms[c] = std::sqrt(sumsq_[c]);
    act.token_count = tokens_;
    act.selection_kind = kind;
    return act;
  }

 private:
  std::vector<double> sumsq_;
  std::size_t tokens_ = 0;
};

/// Per-channel l2 norm over the stacked rows of `x`.
inline InputActivation input_activation(const Matrix& x,
                                        SelectionKind kind = SelectionKind::full) {
  ActivationAccumulator acc(x.cols());
  acc.add_all(x);
  return acc.finish(kind);
}

// ---------------------------------------------------------------- scoring

inline Matrix importance_magnitude(const Matrix& w) {
  Matrix out(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.size(); ++i) out.flat()[i] = std::abs(w.flat()[i]);
  return out;
}

/// I[o,c] = norms[c] * |W[o,c]|
inline Matrix importance_wanda(const Matrix& w, const InputActivation& act) {
  if (act.norms.size() != w.cols())
    throw ShapeError("activation length " + std::to_string(act.norms.size()) +
                     " != weight C_in " + std::to_string(w.cols()));
  Matrix out(w.rows(), w.cols());
  for (std::size_t o = 0; o < w.rows(); ++o)
    for (std::size_t c = 0; c < w.cols(); ++c)
      out(o, c) = static_cast<float>(act.norms[c] * std::abs(static_cast<double>(w(o, c))));
  return out;
}

// ---------------------------------------------------------------- masks

enum class MaskGroup { per_output_row, per_layer };

struct PruneMask {
  KeepMask keep;
  double achieved_ratio = 0.0;
};

/// Number of entries dropped from a group of `size` at `ratio`. The small
/// epsilon absorbs representation error such as 0.7 * 10 = 6.9999...
inline std::size_t drop_count(double ratio, std::size_t size) {
  const double x = std::clamp(ratio, 0.0, 1.0) * static_cast<double>(size);
  return std::min(size, static_cast<std::size_t>(std::floor(x + 1e-9)));
}

/// Drops the lowest-importance entries of each group; ties drop the lower
/// flattened index first.
inline PruneMask make_mask(const Matrix& importance, double ratio,
                           MaskGroup group = MaskGroup::per_output_row) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mask ratio outside [0,1]");
  PruneMask pm;
  pm.keep = KeepMask::all(importance.rows(), importance.cols(), true);
  auto drop_lowest = [&](std::size_t begin, std::size_t size) {
    const std::size_t n_drop = drop_count(ratio, size);
    if (n_drop == 0) return;
    std::vector<std::size_t> order(size);
    std::iota(order.begin(), order.end(), begin);
    const auto flat = importance.flat();
    auto less = [&](std::size_t a, std::size_t b) {
      return flat[a] < flat[b] || (flat[a] == flat[b] && a < b);
    };
    if (n_drop < size)
      std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_drop),
                       order.end(), less);
    for (std::size_t i = 0; i < n_drop; ++i) pm.keep.keep[order[i]] = 0;
  };
  if (group == MaskGroup::per_output_row) {
    for (std::size_t r = 0; r < importance.rows(); ++r)
      drop_lowest(r * importance.cols(), importance.cols());
  } else {
    drop_lowest(0, importance.size());
  }
  pm.achieved_ratio = importance.size() == 0 ? 0.0
                                             : static_cast<double>(pm.keep.dropped()) /
                                                   static_cast<double>(importance.size());
  return pm;
}

// ---------------------------------------------------------------- pipeline

enum class Method { magnitude, wanda, owl, das, amia, tamp };
enum class Allocation { uniform, das, blockwise_das, all_token_das, owl };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::magnitude: return "magnitude";
    case Method::wanda: return "wanda";
    case Method::owl: return "owl";
    case Method::das: return "das";
    case Method::amia: return "amia";
    case Method::tamp: return "tamp";
  }
  return "?";
}

inline Method method_from_name(const std::string& s) {
  for (auto m : {Method::magnitude, Method::wanda, Method::owl, Method::das, Method::amia,
                 Method::tamp})
    if (s == method_name(m)) return m;
  throw ConfigError("unknown method '" + s + "'");
}

inline const char* allocation_name(Allocation a) {
  switch (a) {
    case Allocation::uniform: return "uniform";
    case Allocation::das: return "das";
    case Allocation::blockwise_das: return "blockwise_das";
    case Allocation::all_token_das: return "all_token_das";
    case Allocation::owl: return "owl";
  }
  return "?";
}

inline Allocation allocation_from_name(const std::string& s) {
  for (auto a : {Allocation::uniform, Allocation::das, Allocation::blockwise_das,
                 Allocation::all_token_das, Allocation::owl})
    if (s == allocation_name(a)) return a;
  throw ConfigError("unknown allocation '" + s + "'");
}

inline Allocation default_allocation(Method m) {
  switch (m) {
    case Method::owl: return Allocation::owl;
    case Method::das:
    case Method::tamp: return Allocation::das;
    default: return Allocation::uniform;
  }
}

inline SelectionKind default_selection(Method m) {
  return m == Method::amia || m == Method::tamp ? SelectionKind::amia : SelectionKind::full;
}

struct PruneConfig {
  Method method = Method::tamp;
  std::optional<Allocation> allocation;     // overrides the method default
  std::optional<SelectionKind> selection;   // overrides the method default
  double sparsity = 0.5;
  double lambda = 0.1;
  double owl_lambda = 0.08;
  double owl_m = 5.0;
  MaskGroup group = MaskGroup::per_output_row;
  SelectionParams selection_params;
  std::optional<PairSampling> pair_sampling;
  std::uint64_t seed = 0;
  bool sequential = false;
  unsigned threads = 1;

  Allocation resolved_allocation() const { return allocation.value_or(default_allocation(method)); }
  SelectionKind resolved_selection() const {
    return selection.value_or(default_selection(method));
  }
};

/// Selection summary for one layer, aggregated over calibration samples.
struct LayerSelectionStats {
  std::size_t samples = 0;
  std::size_t selected_tokens = 0;
  std::size_t total_tokens = 0;
  std::map<int, std::size_t> per_modality;
  std::map<std::string, std::size_t> stopped_by;
  double mean_final_mmd = 0.0;
};

struct PruneReport {
  std::string method;
  std::string allocation;
  std::string selection;
  SparsityPlan plan;
  std::vector<double> achieved;  // per layer (flat index)
  double achieved_global = 0.0;
  std::optional<DiversityStats> diversity;
  std::vector<LayerSelectionStats> selection_stats;  // per layer, empty for full
  std::vector<double> owl_outlier_ratios;
};

/// Per-sample selection detail, collected when a caller asks for it.
struct SelectionRecord {
  LayerId layer;
  std::size_t sample = 0;
  std::vector<std::size_t> selected;
  std::vector<std::size_t> per_modality_counts;  // indexed like the sample's modalities
  std::vector<ModalityId> modalities;
  std::vector<double> mmd_trace;
  std::string stopped_by;
  double threshold = 0.0;
};

namespace pruner_detail {

inline constexpr std::size_t kChunk = 16;

/// Runs fn(sample, trace) over calibration samples in chunks, computing traces
/// in parallel and handing them to fn in sample order.
template <typename Fn>
void for_each_trace(const ToyModel& model, std::span<const TokenSequence> calib,
                    const CaptureFlags& flags, unsigned threads, Fn&& fn) {
  for (std::size_t begin = 0; begin < calib.size(); begin += kChunk) {
    const std::size_t count = std::min(kChunk, calib.size() - begin);
    std::vector<ActivationTrace> traces(count);
    parallel_for(count, threads, [&](std::size_t i) {
      traces[i] = forward(model, calib[begin + i], flags).trace;
    });
    for (std::size_t i = 0; i < count; ++i) fn(begin + i, traces[i]);
  }
}

}  // namespace pruner_detail

/// Diversity statistics of every layer, averaged sample by sample.
inline DiversityStats compute_diversity(const ToyModel& model, std::span<const TokenSequence> calib,
                                        unsigned threads = 1,
                                        const std::optional<PairSampling>& sampling = std::nullopt) {
  if (calib.empty()) throw ConfigError("calibration set is empty");
  DiversityStats stats;
  std::vector<LayerDiversityAccumulator> acc(model.n_layers());
  CaptureFlags flags;
  flags.layer_outputs = true;
  pruner_detail::for_each_trace(model, calib, flags, threads,
                                [&](std::size_t s, const ActivationTrace& t) {
    for (const auto& m : calib[s].modalities()) {
      bool seen = false;
      for (const auto& k : stats.modalities) seen = seen || k.id == m.id;
      if (!seen) stats.modalities.push_back(m);
    }
    for (auto id : model.layer_ids())
      acc[id.flat()].add_sample(t.blocks[id.block].output(id.kind), t.spans, sampling);
  });
  std::sort(stats.modalities.begin(), stats.modalities.end(),
            [](const ModalityId& a, const ModalityId& b) { return a.id < b.id; });
  for (auto& a : acc) stats.layers.push_back(a.finish());
  return stats;
}

/// Input activations for the requested layers, with the configured token
/// selection applied per (layer, sample).
struct ActivationPass {
  std::map<std::size_t, InputActivation> activations;  // flat layer index
  std::map<std::size_t, LayerSelectionStats> stats;
  std::vector<SelectionRecord> records;
};

inline ActivationPass compute_activations(const ToyModel& model,
                                          std::span<const TokenSequence> calib,
                                          std::span<const LayerId> layers, SelectionKind kind,
                                          const SelectionParams& params,
                                          const std::vector<double>& layer_importance,
                                          std::uint64_t seed, unsigned threads,
                                          bool keep_records = false) {
  if (calib.empty()) throw ConfigError("calibration set is empty");
  CaptureFlags flags;
  flags.layer_inputs = true;
  flags.layer_outputs = kind == SelectionKind::amia;
  flags.attention = kind == SelectionKind::amia || kind == SelectionKind::attention;

  std::vector<ActivationAccumulator> acc(layers.size());
  std::vector<LayerSelectionStats> stats(layers.size());
  ActivationPass pass;

  for (std::size_t begin = 0; begin < calib.size(); begin += pruner_detail::kChunk) {
    const std::size_t count = std::min(pruner_detail::kChunk, calib.size() - begin);
    // [sample][layer]
    std::vector<std::vector<ActivationAccumulator>> partial(count);
    std::vector<std::vector<VariantSelection>> chosen(count);
    parallel_for(count, threads, [&](std::size_t i) {
      const std::size_t s = begin + i;
      const auto trace = forward(model, calib[s], flags).trace;
      partial[i].resize(layers.size());
      chosen[i].resize(layers.size());
      for (std::size_t li = 0; li < layers.size(); ++li) {
        const LayerId id = layers[li];
        const auto& bt = trace.blocks[id.block];
        SelectionInputs in;
        in.attention = flags.attention ? &bt.attention : nullptr;
        in.outputs = flags.layer_outputs ? &bt.output(id.kind) : nullptr;
        in.layer_importance = layer_importance.empty() ? 0.0 : layer_importance[id.flat()];
        in.seed = mix_seed(seed, s, id.flat());
        auto sel = select_variant(kind, trace.n_tokens, in, params);
        partial[i][li].add_rows(bt.input(id.kind), sel.indices);
        chosen[i][li] = std::move(sel);
      }
    });
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t s = begin + i;
      const auto mods = calib[s].modalities();
      for (std::size_t li = 0; li < layers.size(); ++li) {
        acc[li].merge(partial[i][li]);
        auto& st = stats[li];
        const auto& sel = chosen[i][li];
        st.samples += 1;
        st.selected_tokens += sel.indices.size();
        st.total_tokens += calib[s].size();
        std::vector<std::size_t> counts(mods.size(), 0);
        for (auto t : sel.indices)
          for (const auto& sp : calib[s].spans)
            if (t >= sp.start && t < sp.start + sp.len) {
              st.per_modality[sp.modality.id] += 1;
              for (std::size_t m = 0; m < mods.size(); ++m)
                if (mods[m].id == sp.modality.id) counts[m] += 1;
            }
        const char* reason = sel.amia ? stop_reason_name(sel.amia->stopped_by) : "n/a";
        st.stopped_by[reason] += 1;
        if (sel.amia && !sel.amia->mmd_trace.empty()) st.mean_final_mmd += sel.amia->mmd_trace.back();
        if (keep_records) {
          SelectionRecord rec;
          rec.layer = layers[li];
          rec.sample = s;
          rec.selected = sel.indices;
          rec.per_modality_counts = counts;
          rec.modalities = mods;
          rec.stopped_by = reason;
          if (sel.amia) {
            rec.mmd_trace = sel.amia->mmd_trace;
            rec.threshold = sel.amia->threshold;
          }
          pass.records.push_back(std::move(rec));
        }
      }
    }
  }
  for (std::size_t li = 0; li < layers.size(); ++li) {
    if (stats[li].samples > 0) stats[li].mean_final_mmd /= static_cast<double>(stats[li].samples);
    pass.activations.emplace(layers[li].flat(), acc[li].finish(kind));
    pass.stats.emplace(layers[li].flat(), stats[li]);
  }
  return pass;
}

inline SparsityPlan build_plan(const ToyModel& model, const PruneConfig& cfg,
                               const std::optional<DiversityStats>& diversity,
                               const std::vector<double>& owl_ratios) {
  const auto budgets = layer_budgets(model);
  switch (cfg.resolved_allocation()) {
    case Allocation::uniform:
      return allocate_uniform(budgets, cfg.sparsity);
    case Allocation::das:
      return allocate_das(layer_importances(*diversity, ImportanceMode::modality), budgets,
                          cfg.sparsity, cfg.lambda);
    case Allocation::all_token_das: {
      auto plan = allocate_by_importance(layer_importances(*diversity, ImportanceMode::all_token),
                                         budgets, cfg.sparsity, cfg.lambda, "all_token_das");
      return plan;
    }
    case Allocation::blockwise_das:
      return allocate_blockwise_das(layer_importances(*diversity, ImportanceMode::modality),
                                    budgets, cfg.sparsity, cfg.lambda);
    case Allocation::owl:
      return allocate_owl(owl_ratios, budgets, cfg.sparsity, cfg.owl_lambda);
  }
  throw ConfigError("unknown allocation");
}

/// Scores, masks and commits every layer. Masks are computed for all layers
/// before any is applied, unless `cfg.sequential` is set, in which case each
/// block is calibrated on the model with earlier blocks already pruned.
inline std::pair<ToyModel, PruneReport> prune_model(const ToyModel& dense,
                                                    std::span<const TokenSequence> calib,
                                                    const PruneConfig& cfg,
                                                    std::vector<SelectionRecord>* records = nullptr) {
  dense.validate();
  if (!(cfg.sparsity > 0.0 && cfg.sparsity < 1.0))
    throw ConfigError("sparsity must be in (0,1), got " + std::to_string(cfg.sparsity));
  const Allocation alloc = cfg.resolved_allocation();
  const SelectionKind kind = cfg.resolved_selection();
  const bool magnitude = cfg.method == Method::magnitude;
  const bool need_diversity = alloc == Allocation::das || alloc == Allocation::blockwise_das ||
                              alloc == Allocation::all_token_das ||
                              (!magnitude && kind == SelectionKind::amia);
  if (!magnitude && calib.empty()) throw ConfigError("calibration set is empty");
  if (alloc != Allocation::uniform && calib.empty())
    throw ConfigError("non-uniform allocation needs calibration data");

  PruneReport report;
  report.method = method_name(cfg.method);
  report.allocation = allocation_name(alloc);
  report.selection = magnitude ? "none" : selection_kind_name(kind);

  if (need_diversity) report.diversity = compute_diversity(dense, calib, cfg.threads, cfg.pair_sampling);
  std::vector<double> importance_s;
  if (report.diversity) importance_s = layer_importances(*report.diversity, ImportanceMode::modality);

  const auto ids = dense.layer_ids();

  // OWL outlier ratios always come from full-token Wanda scores on the dense model.
  if (alloc == Allocation::owl) {
    auto full = compute_activations(dense, calib, ids, SelectionKind::full, cfg.selection_params,
                                    {}, cfg.seed, cfg.threads);
    for (auto id : ids)
      report.owl_outlier_ratios.push_back(owl_outlier_ratio(
          importance_wanda(dense.layer(id).weight, full.activations.at(id.flat())), cfg.owl_m));
  }
  report.plan = build_plan(dense, cfg, report.diversity, report.owl_outlier_ratios);

  ToyModel model = dense;
  std::vector<std::optional<PruneMask>> masks(ids.size());
  std::map<std::size_t, LayerSelectionStats> sel_stats;

  auto score_and_mask = [&](const ToyModel& source, std::span<const LayerId> group) {
    std::map<std::size_t, InputActivation> acts;
    if (!magnitude) {
      auto pass = compute_activations(source, calib, group, kind, cfg.selection_params,
                                      importance_s, cfg.seed, cfg.threads, records != nullptr);
      acts = std::move(pass.activations);
      for (auto& [k, v] : pass.stats) sel_stats[k] = v;
      if (records)
        for (auto& r : pass.records) records->push_back(std::move(r));
    }
    std::vector<PruneMask> out(group.size());
    parallel_for(group.size(), cfg.threads, [&](std::size_t i) {
      const LayerId id = group[i];
      try {
        const Matrix& w = dense.layer(id).weight;
        const Matrix imp = magnitude ? importance_magnitude(w)
                                     : importance_wanda(w, acts.at(id.flat()));
        out[i] = make_mask(imp, report.plan.at(id).ratio, cfg.group);
      } catch (const Error& e) {
        throw ContextError(id.name(), e);
      }
    });
    for (std::size_t i = 0; i < group.size(); ++i) masks[group[i].flat()] = std::move(out[i]);
  };

  if (cfg.sequential && !magnitude) {
    for (std::size_t b = 0; b < dense.blocks.size(); ++b) {
      std::vector<LayerId> group;
      for (auto k : kAllKinds) group.push_back({b, k});
      score_and_mask(model, group);
      for (const auto& id : group) model.layer(id).apply_mask(masks[id.flat()]->keep);
    }
  } else {
    score_and_mask(dense, ids);
    for (const auto& id : ids) model.layer(id).apply_mask(masks[id.flat()]->keep);
  }

  long double dropped = 0.0L;
  long double total = 0.0L;
  for (const auto& id : ids) {
    report.achieved.push_back(masks[id.flat()]->achieved_ratio);
    dropped += static_cast<long double>(masks[id.flat()]->keep.dropped());
    total += static_cast<long double>(dense.layer(id).param_count());
  }
  report.achieved_global = static_cast<double>(dropped / total);
  if (!magnitude && kind != SelectionKind::full)
    for (const auto& id : ids) report.selection_stats.push_back(sel_stats.at(id.flat()));
  return {std::move(model), std::move(report)};
}

// ---------------------------------------------------------------- structural

/// DAS block importance: mean of the block's layer importances.
inline std::vector<double> das_block_importance(const DiversityStats& stats,
                                                std::size_t n_blocks) {
  if (stats.layers.size() != n_blocks * kLayersPerBlock)
    throw ShapeError("diversity stats do not match block count");
  std::vector<double> out(n_blocks, 0.0);
  for (std::size_t i = 0; i < stats.layers.size(); ++i)
    out[i / kLayersPerBlock] += stats.layers[i].importance / kLayersPerBlock;
  return out;
}

/// 1 - mean cos(block input, block output), averaged over samples.
inline std::vector<double> shortgpt_block_importance(const ToyModel& model,
                                                     std::span<const TokenSequence> calib,
                                                     unsigned threads = 1) {
  if (calib.empty()) throw ConfigError("calibration set is empty");
  std::vector<double> sim(model.blocks.size(), 0.0);
  CaptureFlags flags;
  flags.block_io = true;
  pruner_detail::for_each_trace(model, calib, flags, threads,
                                [&](std::size_t, const ActivationTrace& t) {
    for (std::size_t b = 0; b < model.blocks.size(); ++b)
      sim[b] += block_input_output_similarity(t.blocks[b].block_in, t.blocks[b].block_out);
  });
  std::vector<double> out(sim.size());
  for (std::size_t b = 0; b < sim.size(); ++b)
    out[b] = 1.0 - sim[b] / static_cast<double>(calib.size());
  return out;
}

struct BlockPruneResult {
  ToyModel model;
  std::vector<std::size_t> removed;  // original indices, ascending
};

/// Removes the floor(ratio * n_blocks) least important blocks. Ties remove the
/// deeper block first; survivors keep their order.
inline BlockPruneResult block_prune(const ToyModel& model, std::span<const double> importance,
                                    double ratio) {
  const std::size_t n = model.blocks.size();
  if (importance.size() != n) throw ShapeError("block importance count mismatch");
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("block ratio outside [0,1]");
  const std::size_t n_drop = drop_count(ratio, n);
  if (n_drop >= n) throw ConfigError("block pruning would remove every block");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return importance[a] < importance[b] || (importance[a] == importance[b] && a > b);
  });
  BlockPruneResult res;
  res.removed.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_drop));
  std::sort(res.removed.begin(), res.removed.end());
  res.model = model;
  res.model.blocks.clear();
  for (std::size_t b = 0; b < n; ++b) {
    if (std::binary_search(res.removed.begin(), res.removed.end(), b)) continue;
    Block blk = model.blocks[b];
    const std::size_t new_index = res.model.blocks.size();
    for (auto& l : blk.layers) l.block_index = new_index;
    res.model.blocks.push_back(std::move(blk));
  }
  return res;
}

// ---------------------------------------------------------------- report json

inline nlohmann::json diversity_to_json(const DiversityStats& d) {
  nlohmann::json layers = nlohmann::json::array();
  auto name_of = [&](int id) {
    for (const auto& m : d.modalities)
      if (m.id == id) return m.name;
    return std::to_string(id);
  };
  for (std::size_t i = 0; i < d.layers.size(); ++i) {
    const auto& l = d.layers[i];
    nlohmann::json intra = nlohmann::json::object();
    for (const auto& [k, v] : l.intra) intra[name_of(k)] = v;
    nlohmann::json inter = nlohmann::json::object();
    for (const auto& [k, v] : l.inter) inter[name_of(k.first) + "|" + name_of(k.second)] = v;
    nlohmann::json entry = {{"layer", LayerId::from_flat(i).name()},
                            {"intra", intra},
                            {"inter", inter},
                            {"importance", l.importance}};
    if (l.all_token) entry["all_token"] = *l.all_token;
    layers.push_back(entry);
  }
  return layers;
}

inline nlohmann::json report_to_json(const PruneReport& r, const ToyModel& model) {
  nlohmann::json achieved = nlohmann::json::object();
  const auto ids = model.layer_ids();
  for (std::size_t i = 0; i < ids.size() && i < r.achieved.size(); ++i)
    achieved[ids[i].name()] = r.achieved[i];
  nlohmann::json j = {{"method", r.method},
                      {"allocation", r.allocation},
                      {"selection", r.selection},
                      {"plan", plan_to_json(r.plan)},
                      {"achieved", achieved},
                      {"achieved_global", r.achieved_global}};
  if (r.diversity) j["diversity"] = diversity_to_json(*r.diversity);
  if (!r.owl_outlier_ratios.empty()) {
    nlohmann::json o = nlohmann::json::object();
    for (std::size_t i = 0; i < ids.size(); ++i) o[ids[i].name()] = r.owl_outlier_ratios[i];
    j["owl_outlier_ratios"] = o;
  }
  if (!r.selection_stats.empty()) {
    nlohmann::json s = nlohmann::json::object();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto& st = r.selection_stats[i];
      nlohmann::json per_mod = nlohmann::json::object();
      for (const auto& [m, c] : st.per_modality) {
        std::string name = std::to_string(m);
        if (r.diversity)
          for (const auto& mm : r.diversity->modalities)
            if (mm.id == m) name = mm.name;
        per_mod[name] = c;
      }
      s[ids[i].name()] = {{"samples", st.samples},
                          {"selected_tokens", st.selected_tokens},
                          {"total_tokens", st.total_tokens},
                          {"per_modality", per_mod},
                          {"stopped_by", st.stopped_by},
                          {"mean_final_mmd", st.mean_final_mmd}};
    }
    j["selection"] = s;
  }
  return j;
}

}  // namespace tamp
