#pragma once

// Subcommand implementations behind the `tamp` executable. Each command takes
// a fully resolved RunConfig, writes its artifacts and a run.json describing
// that config, and throws on failure. Argument parsing lives in tools/.

#include <charconv>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tamp/eval.hpp"
#include "tamp/io.hpp"
#include "tamp/pruner.hpp"
#include "tamp/synth.hpp"

namespace tamp {

inline constexpr const char* kToolVersion = "0.1.0";

/// Invalid or inconsistent command-line configuration.
class UsageError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "usage"; }
};

struct RunConfig {
  std::string command;
  std::string model_dir;
  std::string calib;
  std::string eval;
  std::string out_dir;
  std::string report;

  std::string method = "tamp";
  std::vector<std::string> methods = {"wanda", "tamp"};  // compare
  std::string allocation;                                // empty = method default
  std::string selection;                                 // empty = method default
  double sparsity = 0.5;
  std::vector<double> sparsities = {0.5};  // compare
  double lambda = 0.1;
  double owl_lambda = 0.08;
  double owl_m = 5.0;
  std::string group = "row";
  std::size_t k = 3;
  double gamma_forward = 1.0;
  double gamma_reverse = 0.2;
  double mmd_coefficient = 0.1;
  std::size_t random_count = 100;
  std::size_t calib_size = 128;
  std::size_t pair_samples = 0;  // 0 = exhaustive
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool sequential = false;

  // gen-synth
  std::string scenario = "plain";  // plain | adversarial
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t n_blocks = 4;
  std::string modalities = "visual:24,language:16";
  std::string noisy_modality;
  std::size_t calib_samples = 128;
  std::size_t eval_samples = 16;
};

// ---------------------------------------------------------------- run.json

inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["tool"] = "tamp";
  j["version"] = kToolVersion;
  j["checkpoint_format"] = 1;
  j["command"] = c.command;
  j["model_dir"] = c.model_dir;
  j["calib"] = c.calib;
  j["eval"] = c.eval;
  j["out_dir"] = c.out_dir;
  j["report"] = c.report;
  j["method"] = c.method;
  j["methods"] = c.methods;
  j["allocation"] = c.allocation;
  j["selection"] = c.selection;
  j["sparsity"] = c.sparsity;
  j["sparsities"] = c.sparsities;
  j["lambda"] = c.lambda;
  j["owl_lambda"] = c.owl_lambda;
  j["owl_m"] = c.owl_m;
  j["group"] = c.group;
  j["k"] = c.k;
  j["gamma_forward"] = c.gamma_forward;
  j["gamma_reverse"] = c.gamma_reverse;
  j["mmd_coefficient"] = c.mmd_coefficient;
  j["random_count"] = c.random_count;
  j["calib_size"] = c.calib_size;
  j["pair_samples"] = c.pair_samples;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["sequential"] = c.sequential;
  j["scenario"] = c.scenario;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["n_blocks"] = c.n_blocks;
  j["modalities"] = c.modalities;
  j["noisy_modality"] = c.noisy_modality;
  j["calib_samples"] = c.calib_samples;
  j["eval_samples"] = c.eval_samples;
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  auto get = [&](const char* key, auto& dst) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(dst);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(std::string("run config field '") + key + "': " + e.what());
    }
  };
  get("command", c.command);
  get("model_dir", c.model_dir);
  get("calib", c.calib);
  get("eval", c.eval);
  get("out_dir", c.out_dir);
  get("report", c.report);
  get("method", c.method);
  get("methods", c.methods);
  get("allocation", c.allocation);
  get("selection", c.selection);
  get("sparsity", c.sparsity);
  get("sparsities", c.sparsities);
  get("lambda", c.lambda);
  get("owl_lambda", c.owl_lambda);
  get("owl_m", c.owl_m);
  get("group", c.group);
  get("k", c.k);
  get("gamma_forward", c.gamma_forward);
  get("gamma_reverse", c.gamma_reverse);
  get("mmd_coefficient", c.mmd_coefficient);
  get("random_count", c.random_count);
  get("calib_size", c.calib_size);
  get("pair_samples", c.pair_samples);
  get("seed", c.seed);
  get("threads", c.threads);
  get("sequential", c.sequential);
  get("scenario", c.scenario);
  get("d_model", c.d_model);
  get("n_heads", c.n_heads);
  get("d_ff", c.d_ff);
  get("n_blocks", c.n_blocks);
  get("modalities", c.modalities);
  get("noisy_modality", c.noisy_modality);
  get("calib_samples", c.calib_samples);
  get("eval_samples", c.eval_samples);
  return c;
}

inline RunConfig load_run_config(const fs::path& p) {
  try {
    return config_from_json(io_detail::read_json(p));
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
}

// ---------------------------------------------------------------- validation

namespace cmd_detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw UsageError(msg);
}

inline void require_path(const std::string& p, const char* what) {
  require(!p.empty(), std::string("--") + what + " is required");
  require(fs::exists(p), std::string(what) + " path does not exist: " + p);
}

inline void check_sparsity(double s) {
  require(s > 0.0 && s < 1.0, "sparsity must be in (0,1), got " + std::to_string(s));
}

}  // namespace cmd_detail

/// Throws UsageError for anything a user could fix on the command line.
inline void validate(const RunConfig& c) {
  using namespace cmd_detail;
  require(c.k >= 1, "k must be >= 1");
  require(c.gamma_forward > 0.0 && c.gamma_reverse > 0.0, "gammas must be > 0");
  require(c.mmd_coefficient > 0.0, "MMD coefficient must be > 0");
  require(c.lambda >= 0.0 && c.owl_lambda >= 0.0, "lambda must be >= 0");
  require(c.owl_m > 1.0, "OWL M must be > 1");
  require(c.group == "row" || c.group == "layer", "group must be row or layer");
  require(c.threads >= 1, "threads must be >= 1");
  require(c.calib_size >= 1, "calib size must be >= 1");
  auto known = [](auto&& parse, const std::string& v) {
    if (v.empty()) return;
    try {
      parse(v);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  };
  known(method_from_name, c.method);
  for (const auto& m : c.methods) known(method_from_name, m);
  known(allocation_from_name, c.allocation);
  known(selection_kind_from_name, c.selection);

  if (c.command == "gen-synth") {
    require(!c.out_dir.empty(), "--out is required");
    require(c.scenario == "plain" || c.scenario == "adversarial",
            "scenario must be plain or adversarial");
    require(c.n_heads >= 1 && c.d_model % c.n_heads == 0, "d_model must be divisible by n_heads");
    require(c.n_blocks >= 1, "n_blocks must be >= 1");
    require(c.calib_samples >= 1 && c.eval_samples >= 1, "sample counts must be >= 1");
    try {
      parse_modalities(c.modalities);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  } else if (c.command == "prune") {
    require_path(c.model_dir, "model");
    require_path(c.calib, "calib");
    require(!c.out_dir.empty(), "--out is required");
    check_sparsity(c.sparsity);
  } else if (c.command == "analyze") {
    require_path(c.model_dir, "model");
    require_path(c.calib, "calib");
    require(!c.out_dir.empty(), "--out is required");
    check_sparsity(c.sparsity);
  } else if (c.command == "compare") {
    require_path(c.model_dir, "model");
    require_path(c.calib, "calib");
    require_path(c.eval, "eval");
    require(!c.out_dir.empty(), "--out is required");
    require(!c.methods.empty(), "at least one method is required");
    require(!c.sparsities.empty(), "at least one sparsity is required");
    for (double s : c.sparsities) check_sparsity(s);
  } else {
    throw UsageError("unknown command '" + c.command + "'");
  }
}

// ---------------------------------------------------------------- csv

/// Shortest round-trip decimal form; identical on every run.
inline std::string fmt_num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) { row(header); }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) text_ += ',';
      text_ += quote(cells[i]);
    }
    text_ += "\r\n";
  }
  const std::string& str() const { return text_; }
  void save(const fs::path& p) const { io_detail::write_text(p, text_); }

  static std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
      if (ch == '"') out += '"';
      out += ch;
    }
    return out + "\"";
  }

 private:
  std::string text_;
};

// ---------------------------------------------------------------- shared

namespace cmd_detail {

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  io_detail::write_text(p, j.dump(2) + "\n");
}

inline void write_json(const fs::path& p, const nlohmann::ordered_json& j) {
  io_detail::write_text(p, j.dump(2) + "\n");
}

inline void write_run_json(const RunConfig& c) {
  fs::create_directories(c.out_dir);
  write_json(fs::path(c.out_dir) / "run.json", config_to_json(c));
}

struct Inputs {
  ToyModel model;
  ModalityRegistry registry;
  std::vector<TokenSequence> calib;
  std::vector<TokenSequence> eval;
};

inline Inputs load_inputs(const RunConfig& c, bool with_eval) {
  Inputs in;
  in.model = load_checkpoint(c.model_dir);
  in.calib = load_sequences(c.calib, in.model.d_model, in.registry);
  if (in.calib.empty()) throw ConfigError("calibration file has no sequences: " + c.calib);
  if (in.calib.size() > c.calib_size) in.calib.resize(c.calib_size);
  if (with_eval) {
    in.eval = load_sequences(c.eval, in.model.d_model, in.registry);
    if (in.eval.empty()) throw ConfigError("evaluation file has no sequences: " + c.eval);
  }
  return in;
}

inline PruneConfig prune_config(const RunConfig& c, const std::string& method, double sparsity) {
  PruneConfig p;
  p.method = method_from_name(method);
  if (!c.allocation.empty()) p.allocation = allocation_from_name(c.allocation);
  if (!c.selection.empty()) p.selection = selection_kind_from_name(c.selection);
  p.sparsity = sparsity;
  p.lambda = c.lambda;
  p.owl_lambda = c.owl_lambda;
  p.owl_m = c.owl_m;
  p.group = c.group == "layer" ? MaskGroup::per_layer : MaskGroup::per_output_row;
  p.selection_params.k = c.k;
  p.selection_params.gamma_forward = c.gamma_forward;
  p.selection_params.gamma_reverse = c.gamma_reverse;
  p.selection_params.mmd_coefficient = c.mmd_coefficient;
  p.selection_params.random_count = c.random_count;
  if (c.pair_samples > 0) p.pair_sampling = PairSampling{c.pair_samples, c.seed};
  p.seed = c.seed;
  p.sequential = c.sequential;
  p.threads = c.threads;
  return p;
}

inline std::string modality_name(const std::vector<ModalityId>& mods, int id) {
  for (const auto& m : mods)
    if (m.id == id) return m.name;
  return std::to_string(id);
}

}  // namespace cmd_detail

// ---------------------------------------------------------------- commands

inline void cmd_gen_synth(const RunConfig& c) {
  validate(c);
  const fs::path out(c.out_dir);
  ToyModel model;
  std::vector<TokenSequence> calib;
  std::vector<TokenSequence> eval;
  const auto mods = parse_modalities(c.modalities);
  if (c.scenario == "adversarial") {
    AdversarialScenarioConfig ac;
    ac.d_model = c.d_model;
    ac.n_heads = c.n_heads;
    ac.d_ff = c.d_ff;
    ac.n_blocks = c.n_blocks;
    ac.modalities = mods;
    if (!c.noisy_modality.empty()) ac.noisy_modality = c.noisy_modality;
    ac.calib_samples = c.calib_samples;
    ac.eval_samples = c.eval_samples;
    auto sc = make_adversarial_scenario(c.seed, ac);
    model = std::move(sc.model);
    calib = std::move(sc.calib);
    eval = std::move(sc.eval);
  } else {
    model = init_synthetic(c.d_model, c.n_heads, c.d_ff, c.n_blocks, c.seed);
    WorldConfig wc;
    wc.d_model = c.d_model;
    wc.modalities = mods;
    wc.seed = mix_seed(c.seed, 0xD47A);
    SyntheticWorld world(wc);
    std::vector<std::string> clean;
    for (const auto& m : mods)
      if (m.name != c.noisy_modality) clean.push_back(m.name);
    if (clean.empty()) throw UsageError("every modality is noisy; evaluation would be empty");
    calib = world.sample({c.calib_samples, mix_seed(c.seed, 0xCA1B), c.noisy_modality, {}});
    eval = world.sample({c.eval_samples, mix_seed(c.seed, 0xE7A1), "", clean});
  }
  save_checkpoint(model, out / "model");
  save_sequences(calib, out, "calib");
  save_sequences(eval, out, "eval");
  cmd_detail::write_run_json(c);
}

inline void cmd_prune(const RunConfig& c) {
  validate(c);
  auto in = cmd_detail::load_inputs(c, false);
  const auto pc = cmd_detail::prune_config(c, c.method, c.sparsity);
  auto [pruned, report] = prune_model(in.model, in.calib, pc);
  const fs::path out(c.out_dir);
  save_checkpoint(pruned, out);
  auto j = report_to_json(report, in.model);
  cmd_detail::write_json(c.report.empty() ? out / "report.json" : fs::path(c.report), j);
  cmd_detail::write_run_json(c);
}

inline void cmd_analyze(const RunConfig& c) {
  validate(c);
  using cmd_detail::modality_name;
  auto in = cmd_detail::load_inputs(c, false);
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  const auto& model = in.model;
  const auto stats = compute_diversity(model, in.calib, c.threads,
                                       c.pair_samples > 0
                                           ? std::optional<PairSampling>(PairSampling{c.pair_samples, c.seed})
                                           : std::nullopt);
  const auto& mods = stats.modalities;

  // diversity.csv: one row per (block, kind)
  std::vector<std::string> header = {"block", "kind"};
  for (const auto& m : mods) header.push_back("intra_" + m.name);
  std::vector<std::pair<int, int>> pairs;
  for (std::size_t a = 0; a < mods.size(); ++a)
    for (std::size_t b = a + 1; b < mods.size(); ++b) {
      pairs.emplace_back(mods[a].id, mods[b].id);
      header.push_back("inter_" + mods[a].name + "_" + mods[b].name);
    }
  header.push_back("all_token");
  header.push_back("s");
  CsvWriter div(header);
  for (auto id : model.layer_ids()) {
    const auto& l = stats.layers[id.flat()];
    std::vector<std::string> row = {std::to_string(id.block), std::string(kind_name(id.kind))};
    for (const auto& m : mods) {
      auto it = l.intra.find(m.id);
      row.push_back(it == l.intra.end() ? "" : fmt_num(it->second));
    }
    for (const auto& p : pairs) {
      auto it = l.inter.find(p);
      row.push_back(it == l.inter.end() ? "" : fmt_num(it->second));
    }
    row.push_back(l.all_token ? fmt_num(*l.all_token) : "");
    row.push_back(fmt_num(l.importance));
    div.row(row);
  }
  div.save(out / "diversity.csv");

  // attention.csv: per block, mean attention mass per modality
  {
    std::vector<ActivationTrace> traces;
    CaptureFlags flags;
    flags.attention = true;
    for (const auto& s : in.calib) traces.push_back(forward(model, s, flags).trace);
    const auto prof = attention_by_modality(traces);
    std::vector<std::string> h = {"block"};
    for (const auto& m : prof.modalities) h.push_back(m.name);
    CsvWriter att(h);
    for (std::size_t b = 0; b < prof.per_block.size(); ++b) {
      std::vector<std::string> row = {std::to_string(b)};
      for (const auto& m : prof.modalities) row.push_back(fmt_num(prof.per_block[b].at(m.id)));
      att.row(row);
    }
    att.save(out / "attention.csv");
  }

  // plan.json plus sparsity distributions of that plan
  PruneConfig pc = cmd_detail::prune_config(c, c.method, c.sparsity);
  std::vector<double> owl;
  if (pc.resolved_allocation() == Allocation::owl) {
    const auto ids = model.layer_ids();
    auto full = compute_activations(model, in.calib, ids, SelectionKind::full, pc.selection_params,
                                    {}, c.seed, c.threads);
    for (auto id : ids)
      owl.push_back(owl_outlier_ratio(
          importance_wanda(model.layer(id).weight, full.activations.at(id.flat())), c.owl_m));
  }
  const auto plan = build_plan(model, pc, stats, owl);
  cmd_detail::write_json(out / "plan.json", plan_to_json(plan));

  auto write_sparsity = [&](const SparsityReport& r, const std::string& prefix) {
    CsvWriter by_type({"kind", "mean_sparsity"});
    for (const auto& [k, v] : r.per_kind) by_type.row({std::string(kind_name(k)), fmt_num(v)});
    by_type.save(out / (prefix + "_by_type.csv"));
    CsvWriter by_block({"block", "mean_sparsity"});
    for (std::size_t b = 0; b < r.per_block.size(); ++b)
      by_block.row({std::to_string(b), fmt_num(r.per_block[b])});
    by_block.save(out / (prefix + "_by_block.csv"));
  };
  write_sparsity(sparsity_report(plan), "sparsity");
  bool masked = false;
  for (auto id : model.layer_ids()) masked = masked || model.layer(id).mask.has_value();
  if (masked) write_sparsity(sparsity_report(model), "mask_sparsity");

  // selection.csv: per (layer, sample) selection summary
  if (!c.selection.empty()) {
    const auto kind = selection_kind_from_name(c.selection);
    const auto imp = layer_importances(stats, ImportanceMode::modality);
    const auto ids = model.layer_ids();
    auto pass = compute_activations(model, in.calib, ids, kind, pc.selection_params, imp, c.seed,
                                    c.threads, true);
    std::vector<std::string> h = {"block", "kind", "sample", "n_tokens", "selected"};
    for (const auto& m : mods) h.push_back("selected_" + m.name);
    for (const auto& x : {"stopped_by", "threshold", "final_mmd", "mmd_trace"}) h.push_back(x);
    CsvWriter sel(h);
    for (const auto& r : pass.records) {
      std::vector<std::string> row = {std::to_string(r.layer.block),
                                      std::string(kind_name(r.layer.kind)),
                                      std::to_string(r.sample),
                                      std::to_string(in.calib[r.sample].size()),
                                      std::to_string(r.selected.size())};
      for (const auto& m : mods) {
        std::size_t n = 0;
        for (std::size_t i = 0; i < r.modalities.size(); ++i)
          if (r.modalities[i].id == m.id) n = r.per_modality_counts[i];
        row.push_back(std::to_string(n));
      }
      row.push_back(r.stopped_by);
      row.push_back(fmt_num(r.threshold));
      row.push_back(r.mmd_trace.empty() ? "" : fmt_num(r.mmd_trace.back()));
      std::string trace;
      for (std::size_t i = 0; i < r.mmd_trace.size(); ++i)
        trace += (i ? ";" : "") + fmt_num(r.mmd_trace[i]);
      row.push_back(trace);
      sel.row(row);
    }
    sel.save(out / "selection.csv");
  }
  cmd_detail::write_run_json(c);
}

/// One (method, sparsity) cell of a comparison.
struct CompareRow {
  std::string method;
  double sparsity = 0.0;
  double achieved = 0.0;
  EvalMetrics metrics;
  double rel_avg = 0.0;
};

inline std::vector<CompareRow> run_compare(const RunConfig& c, const cmd_detail::Inputs& in) {
  std::vector<CompareRow> rows;
  for (const auto& method : c.methods) {
    for (double s : c.sparsities) {
      const auto pc = cmd_detail::prune_config(c, method, s);
      auto [pruned, report] = prune_model(in.model, in.calib, pc);
      CompareRow r;
      r.method = method;
      r.sparsity = s;
      r.achieved = report.achieved_global;
      r.metrics = reconstruction_report(in.model, pruned, in.eval, c.threads);
      r.rel_avg = rel_avg(reconstruction_tasks(r.metrics));
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

inline void cmd_compare(const RunConfig& c) {
  validate(c);
  using cmd_detail::modality_name;
  auto in = cmd_detail::load_inputs(c, true);
  const auto rows = run_compare(c, in);
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  const auto& mods = rows.front().metrics.modalities;

  std::vector<std::string> header = {"method", "sparsity", "achieved", "final_rel_error",
                                     "cos_all"};
  for (const auto& m : mods) header.push_back("cos_" + m.name);
  header.push_back("rel_avg");
  CsvWriter csv(header);
  nlohmann::ordered_json jrows = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    std::vector<std::string> cells = {r.method, fmt_num(r.sparsity), fmt_num(r.achieved),
                                      fmt_num(r.metrics.final_rel_error),
                                      fmt_num(r.metrics.mean_cosine)};
    nlohmann::ordered_json jr;
    jr["method"] = r.method;
    jr["sparsity"] = r.sparsity;
    jr["achieved"] = r.achieved;
    jr["final_rel_error"] = r.metrics.final_rel_error;
    jr["cos_all"] = r.metrics.mean_cosine;
    for (const auto& m : mods) {
      auto it = r.metrics.mean_cosine_by_modality.find(m.id);
      const double v = it == r.metrics.mean_cosine_by_modality.end() ? 0.0 : it->second;
      cells.push_back(fmt_num(v));
      jr["cos_" + m.name] = v;
    }
    cells.push_back(fmt_num(r.rel_avg));
    jr["rel_avg"] = r.rel_avg;
    csv.row(cells);
    jrows.push_back(jr);
  }
  csv.save(out / "matrix.csv");
  nlohmann::ordered_json j;
  j["columns"] = header;
  j["rows"] = jrows;
  cmd_detail::write_json(out / "matrix.json", j);

  CsvWriter sweep({"method", "sparsity", "final_rel_error", "rel_avg"});
  for (const auto& r : rows)
    sweep.row({r.method, fmt_num(r.sparsity), fmt_num(r.metrics.final_rel_error), fmt_num(r.rel_avg)});
  sweep.save(out / "sweep.csv");
  cmd_detail::write_run_json(c);
}

inline void run_command(const RunConfig& c) {
  if (c.command == "gen-synth") return cmd_gen_synth(c);
  if (c.command == "prune") return cmd_prune(c);
  if (c.command == "analyze") return cmd_analyze(c);
  if (c.command == "compare") return cmd_compare(c);
  throw UsageError("unknown command '" + c.command + "'");
}

/// Machine-readable error line for stderr.
inline std::string error_record(const std::string& kind, const std::string& message, int exit_code) {
  nlohmann::ordered_json j;
  j["error"] = {{"kind", kind}, {"message", message}, {"exit_code", exit_code}};
  return j.dump();
}

}  // namespace tamp
