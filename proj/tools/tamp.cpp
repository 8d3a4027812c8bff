// tamp: command-line front end. Exit codes: 0 ok, 1 runtime failure,
// 2 usage error. Failures print one JSON error record on stderr.

#include <functional>
#include <iostream>

#include <CLI11.hpp>

#include "tamp/commands.hpp"

namespace {

using tamp::RunConfig;

// Flags are bound to scratch values; only flags the user actually passed are
// copied onto the resolved config, so `--config run.json` plus overrides
// works.
class Binder {
 public:
  explicit Binder(CLI::App* app) : app_(app) {}

  template <typename T>
  CLI::Option* opt(const std::string& flags, T RunConfig::*field, const std::string& help) {
    auto value = std::make_shared<T>();
    auto* o = app_->add_option(flags, *value, help);
    apply_.emplace_back(o, [value, field](RunConfig& c) { c.*field = *value; });
    return o;
  }

  void flag(const std::string& flags, bool RunConfig::*field, const std::string& help) {
    auto value = std::make_shared<bool>(false);
    auto* o = app_->add_flag(flags, *value, help);
    apply_.emplace_back(o, [value, field](RunConfig& c) { c.*field = *value; });
  }

  void apply(RunConfig& c) const {
    for (const auto& [o, fn] : apply_)
      if (o->count() > 0) fn(c);
  }

 private:
  CLI::App* app_;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> apply_;
};

void common_pruning_flags(Binder& b) {
  b.opt("--method", &RunConfig::method, "magnitude|wanda|owl|das|amia|tamp");
  b.opt("--allocation", &RunConfig::allocation, "uniform|das|blockwise_das|all_token_das|owl");
  b.opt("--selection", &RunConfig::selection, "full|random|attention|amia");
  b.opt("--lambda", &RunConfig::lambda, "DAS deviation half-width");
  b.opt("--owl-lambda", &RunConfig::owl_lambda, "OWL deviation half-width");
  b.opt("--owl-m", &RunConfig::owl_m, "OWL outlier multiplier");
  b.opt("--group", &RunConfig::group, "mask comparison group: row|layer");
  b.opt("--k", &RunConfig::k, "kNN neighbours");
  b.opt("--gamma-forward", &RunConfig::gamma_forward, "forward kernel gamma");
  b.opt("--gamma-reverse", &RunConfig::gamma_reverse, "reverse/MMD kernel gamma");
  b.opt("--mmd-coef", &RunConfig::mmd_coefficient, "MMD threshold coefficient");
  b.opt("--random-count", &RunConfig::random_count, "tokens drawn by random selection");
  b.opt("--calib-size", &RunConfig::calib_size, "max calibration sequences used");
  b.opt("--pair-samples", &RunConfig::pair_samples, "Monte-Carlo diversity pairs (0 = exact)");
  b.opt("--seed", &RunConfig::seed, "seed");
  b.opt("--threads", &RunConfig::threads, "worker threads");
  b.flag("--sequential", &RunConfig::sequential, "recalibrate each block on the pruned prefix");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-adaptive pruning toolkit for toy multimodal transformers"};
  app.require_subcommand(1);
  std::string config_path;
  std::map<std::string, std::unique_ptr<Binder>> binders;

  auto add = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "run.json of an earlier run");
    auto b = std::make_unique<Binder>(sub);
    b->opt("--out", &RunConfig::out_dir, "output directory");
    auto* raw = b.get();
    binders[name] = std::move(b);
    return raw;
  };

  {
    auto* b = add("gen-synth", "write a seeded model and calibration/eval data");
    b->opt("--scenario", &RunConfig::scenario, "plain|adversarial");
    b->opt("--d-model", &RunConfig::d_model, "model width");
    b->opt("--heads", &RunConfig::n_heads, "attention heads");
    b->opt("--d-ff", &RunConfig::d_ff, "FFN width");
    b->opt("--blocks", &RunConfig::n_blocks, "number of blocks");
    b->opt("--modalities", &RunConfig::modalities, "name:len,... token layout");
    b->opt("--noisy-modality", &RunConfig::noisy_modality, "modality replaced by noise in calibration");
    b->opt("--calib-samples", &RunConfig::calib_samples, "calibration sequences");
    b->opt("--eval-samples", &RunConfig::eval_samples, "evaluation sequences");
    b->opt("--seed", &RunConfig::seed, "seed");
  }
  {
    auto* b = add("prune", "prune a checkpoint");
    b->opt("--model", &RunConfig::model_dir, "checkpoint directory");
    b->opt("--calib", &RunConfig::calib, "calibration JSONL");
    b->opt("--sparsity", &RunConfig::sparsity, "target sparsity in (0,1)");
    b->opt("--report", &RunConfig::report, "report JSON path (default OUT/report.json)");
    common_pruning_flags(*b);
  }
  {
    auto* b = add("analyze", "diversity, attention, sparsity and selection reports");
    b->opt("--model", &RunConfig::model_dir, "checkpoint directory");
    b->opt("--calib", &RunConfig::calib, "calibration JSONL");
    b->opt("--sparsity", &RunConfig::sparsity, "target sparsity for plan.json");
    common_pruning_flags(*b);
  }
  {
    auto* b = add("compare", "method x sparsity grid on held-out data");
    b->opt("--model", &RunConfig::model_dir, "checkpoint directory");
    b->opt("--calib", &RunConfig::calib, "calibration JSONL");
    b->opt("--eval", &RunConfig::eval, "evaluation JSONL");
    b->opt("--methods", &RunConfig::methods, "methods to compare")->delimiter(',');
    b->opt("--sparsities", &RunConfig::sparsities, "sparsity levels")->delimiter(',');
    common_pruning_flags(*b);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << tamp::error_record("usage", e.what(), 2) << "\n";
    return 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    RunConfig cfg = config_path.empty() ? RunConfig{} : tamp::load_run_config(config_path);
    cfg.command = sub->get_name();
    binders.at(cfg.command)->apply(cfg);
    tamp::run_command(cfg);
  } catch (const tamp::UsageError& e) {
    std::cerr << tamp::error_record(e.kind(), e.what(), 2) << "\n";
    return 2;
  } catch (const tamp::Error& e) {
    std::cerr << tamp::error_record(e.kind(), e.what(), 1) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << tamp::error_record("internal", e.what(), 1) << "\n";
    return 1;
  }
  return 0;
}
