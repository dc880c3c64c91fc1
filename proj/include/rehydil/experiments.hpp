#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "rehydil/dil_trainer.hpp"
#include "rehydil/eval.hpp"

namespace rehydil {

/// Relative run paths resolve under $REHYDIL_RUN_ROOT when it is set.
std::filesystem::path resolve_run_dir(const std::filesystem::path& path);

/// run_training plus data_source.txt recording the store's dataset directory.
RunResult train_run(const TrainConfig& config, const SampleStore& store, const std::filesystem::path& run_dir);
std::filesystem::path run_data_source(const std::filesystem::path& run_dir);
TrainConfig run_config(const std::filesystem::path& run_dir);

struct RunEvaluation {
  DscReport subsets;
  ForgettingReport forgetting;
};

/// Loads the run's stage checkpoints, evaluates the final model on all 15
/// subsets and every stage on its seen modalities, and writes
/// dsc_subsets.csv, dsc_summary.csv and forgetting.csv into the run.
RunEvaluation evaluate_run(const std::filesystem::path& run_dir, const SampleStore& store, std::size_t batch_size = 4,
                           Split split = Split::Test);

struct RunSummary {
  std::filesystem::path dir;
  TrainConfig config;
  /// Mean over the 15 subset rows of dsc_summary.csv, per region.
  std::array<double, kNumRegions> mean_dsc{};
};

/// Reads config.txt and dsc_summary.csv only.
RunSummary summarize_run(const std::filesystem::path& run_dir);

/// run,replay,tac,cph_stages,similarity,alpha,beta,WT,TC,ET with DSC in percent.
void write_comparison_table(std::ostream& out, const std::vector<RunSummary>& runs);

enum class AblationGrid { Cph, Similarity, Tversky, Modules };

std::string to_string(AblationGrid grid);
AblationGrid ablation_grid_from_string(const std::string& name);
std::vector<AblationGrid> all_ablation_grids();

struct AblationSetting {
  std::string label;
  std::string slug;  // directory name
  TrainConfig config;
};

/// Settings of one grid on top of `base`:
///   cph: CPH at stages {5}, {4,5}, {3,4,5}
///   similarity: cosine, tversky
///   tversky: (alpha, beta) in (0.5,0.5) (0.9,1.3) (0.8,1.4) (0.7,1.5) (0.6,1.6)
///   modules: replay with CPH and TAC each off or on.
std::vector<AblationSetting> ablation_settings(AblationGrid grid, const TrainConfig& base);

/// Row label of a run within a grid, derived from its configuration.
std::string grid_setting_label(AblationGrid grid, const TrainConfig& config);

/// grid,setting,WT,TC,ET with DSC in percent.
void write_grid_table(std::ostream& out, AblationGrid grid, const std::vector<RunSummary>& runs);

/// Trains and evaluates every setting under out_dir/<grid>/<slug> and writes
/// out_dir/<grid>.csv. Returns the table text.
std::string run_ablation(AblationGrid grid, const TrainConfig& base, const SampleStore& store,
                         const std::filesystem::path& out_dir, std::ostream* log = nullptr);

}  // namespace rehydil
