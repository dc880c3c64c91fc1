#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rehydil/experiments.hpp"
#include "rehydil/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace rehydil;

namespace {

struct ConfigFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool no_replay = false, no_tac = false, no_cph = false;
  std::optional<std::string> similarity, cph_stages;
  std::optional<double> alpha, beta, gamma;
  std::optional<std::size_t> epochs, stages;

  void add_to(CLI::App* app) {
    app->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override one config key (key=value), repeatable");
    app->add_option("--seed", seed, "training and initialization seed");
    app->add_flag("--no-replay", no_replay, "disable the replay buffer");
    app->add_flag("--no-tac", no_tac, "disable the contrastive loss");
    app->add_flag("--no-cph", no_cph, "no hypergraph layers (plain U-Net)");
    app->add_option("--similarity", similarity, "contrastive similarity")->check(CLI::IsMember({"tversky", "cosine"}));
    app->add_option("--alpha", alpha, "Tversky false-positive weight");
    app->add_option("--beta", beta, "Tversky false-negative weight");
    app->add_option("--gamma", gamma, "focal Tversky exponent");
    app->add_option("--cph-stages", cph_stages, "encoder stages with hypergraph layers, e.g. 4,5");
    app->add_option("--epochs", epochs, "epochs per stage");
    app->add_option("--stages", stages, "train only the first N modalities of the order");
  }

  TrainConfig build() const {
    TrainConfig c = config_file.empty() ? TrainConfig{} : load_config_file(config_file);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
      set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) {
      c.seed = *seed;
      c.model.init_seed = *seed;
    }
    if (no_replay) c.use_replay = false;
    if (no_tac) c.use_tac = false;
    if (cph_stages) c.model.cph_stages = parse_stage_set(*cph_stages);
    if (no_cph) c.model.cph_stages.clear();
    if (similarity) c.similarity = similarity_from_string(*similarity);
    if (alpha) c.tversky.alpha = *alpha;
    if (beta) c.tversky.beta = *beta;
    if (gamma) c.gamma = *gamma;
    if (epochs) c.plan.epochs = *epochs;
    if (stages) {
      if (*stages == 0 || *stages > c.plan.modality_order.size()) {
        throw std::invalid_argument("--stages must be in [1, " + std::to_string(c.plan.modality_order.size()) + "]");
      }
      c.plan.modality_order.resize(*stages);
      c.plan.omega.resize(*stages);
    }
    c.validate();
    return c;
  }
};

void print_eval(const RunEvaluation& e) {
  std::cout << "# DSC per modality subset (mean over patients)\n";
  e.subsets.write_summary_csv(std::cout);
  std::cout << "\n# DSC per stage and seen modality\n";
  e.forgetting.write_csv(std::cout);
}

int cmd_gen_data(const DatasetSpec& spec, const std::string& out) {
  spec.validate();
  generate_dataset(spec, out);
  std::cout << "dataset written to " << out << "\n";
  return 0;
}

int cmd_train(const ConfigFlags& flags, const std::string& data, const std::string& out, bool then_eval) {
  const TrainConfig config = flags.build();
  const fs::path run_dir = resolve_run_dir(out);
  Dataset dataset = Dataset::open(data);
  SampleStore store(dataset);
  train_run(config, store, run_dir);
  std::cout << "run written to " << run_dir.string() << "\n";
  if (then_eval) print_eval(evaluate_run(run_dir, store));
  return 0;
}

int cmd_eval(const std::string& run, const std::string& data, const std::string& split, std::size_t batch) {
  const fs::path run_dir = resolve_run_dir(run);
  Dataset dataset = Dataset::open(data.empty() ? run_data_source(run_dir) : fs::path(data));
  SampleStore store(dataset);
  print_eval(evaluate_run(run_dir, store, batch, split_from_string(split)));
  return 0;
}

int cmd_gradcheck(std::size_t seeds, bool verbose) {
  GradCheckSuiteOptions options;
  options.seeds = seeds;
  const auto result = run_gradcheck_suite(options, [&](const GradCheckCase& c) {
    if (verbose || !c.report.passed) {
      std::printf("%s %s seed %zu: max rel err %.3e %s\n", c.component.c_str(), c.target.c_str(), c.seed,
                  c.report.max_relative_error, c.report.passed ? "ok" : "FAILED");
    }
  });
  for (const auto& name : result.components()) {
    std::printf("%-14s seeds %zu  max rel err %.3e\n", name.c_str(), result.seeds(name), result.max_error(name));
  }
  std::printf("gradcheck %s\n", result.passed() ? "passed" : "FAILED");
  return result.passed() ? 0 : 1;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& grid, const std::string& out) {
  std::vector<RunSummary> summaries;
  for (const auto& r : runs) summaries.push_back(summarize_run(resolve_run_dir(r)));
  std::ostringstream table;
  if (grid.empty()) {
    write_comparison_table(table, summaries);
  } else {
    write_grid_table(table, ablation_grid_from_string(grid), summaries);
  }
  std::cout << table.str();
  if (!out.empty()) {
    std::ofstream f(out, std::ios::trunc);
    f << table.str();
    if (!f) throw std::runtime_error("cannot write " + out);
  }
  return 0;
}

int cmd_ablate(const ConfigFlags& flags, const std::string& data, const std::string& out,
               const std::vector<std::string>& grids) {
  const TrainConfig base = flags.build();
  std::vector<AblationGrid> selected;
  for (const auto& g : grids) selected.push_back(ablation_grid_from_string(g));
  if (selected.empty()) selected = all_ablation_grids();
  const fs::path out_dir = resolve_run_dir(out);
  Dataset dataset = Dataset::open(data);
  SampleStore store(dataset);
  for (AblationGrid g : selected) std::cout << run_ablation(g, base, store, out_dir, &std::cerr) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental multi-modality segmentation with hypergraph layers and replay"};
  app.require_subcommand(1);

  DatasetSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset directory");
  gen->add_option("--out", gen_out, "dataset directory")->required();
  gen->add_option("--seed", spec.seed, "generator seed");
  gen->add_option("--patients", spec.num_patients, "number of patients");
  gen->add_option("--slices", spec.slices_per_patient, "slices per patient");
  gen->add_option("--image-size", spec.image_size, "slice height and width");
  gen->add_option("--depth", spec.network_depth, "network depth the image size must support");
  gen->add_option("--noise", spec.noise_sigma, "noise standard deviation");

  ConfigFlags train_flags;
  std::string train_data, train_out;
  bool train_eval = false;
  auto* train = app.add_subcommand("train", "sequential training over the modality order");
  train->add_option("--data", train_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", train_out, "run directory (relative paths go under $REHYDIL_RUN_ROOT)")->required();
  train->add_flag("--eval", train_eval, "evaluate the run after training");
  train_flags.add_to(train);

  std::string eval_run, eval_data, eval_split = "test";
  std::size_t eval_batch = 4;
  auto* eval = app.add_subcommand("eval", "subset DSC and per-stage DSC tables for a run");
  eval->add_option("run", eval_run, "run directory")->required();
  eval->add_option("--data", eval_data, "dataset directory (default: the one the run was trained on)");
  eval->add_option("--split", eval_split, "split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--batch", eval_batch, "slices per forward pass");

  std::size_t gc_seeds = 20;
  bool gc_verbose = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--seeds", gc_seeds, "random draws per component");
  gradcheck->add_flag("--verbose", gc_verbose, "print every case");

  std::vector<std::string> report_runs;
  std::string report_grid, report_out;
  auto* report = app.add_subcommand("report", "comparison table across evaluated runs");
  report->add_option("runs", report_runs, "run directories")->required();
  report->add_option("--grid", report_grid, "label rows as one ablation grid")
      ->check(CLI::IsMember({"cph", "similarity", "tversky", "modules"}));
  report->add_option("--out", report_out, "also write the table to this file");

  ConfigFlags ablate_flags;
  std::string ablate_data, ablate_out;
  std::vector<std::string> ablate_grids;
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the ablation grids");
  ablate->add_option("--data", ablate_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--out", ablate_out, "output directory (relative paths go under $REHYDIL_RUN_ROOT)")->required();
  ablate->add_option("--grid", ablate_grids, "cph, similarity, tversky or modules (default: all)")
      ->check(CLI::IsMember({"cph", "similarity", "tversky", "modules"}));
  ablate_flags.add_to(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code != 0 && !e.get_name().empty() && e.get_name() != "CallForHelp") std::cerr << app.help();
    return code;
  }

  CLI::App* active = app.get_subcommands().front();
  try {
    if (active == gen) return cmd_gen_data(spec, gen_out);
    if (active == train) return cmd_train(train_flags, train_data, train_out, train_eval);
    if (active == eval) return cmd_eval(eval_run, eval_data, eval_split, eval_batch);
    if (active == gradcheck) return cmd_gradcheck(gc_seeds, gc_verbose);
    if (active == report) return cmd_report(report_runs, report_grid, report_out);
    if (active == ablate) return cmd_ablate(ablate_flags, ablate_data, ablate_out, ablate_grids);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n\n" << active->help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
