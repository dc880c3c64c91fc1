#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "rehydil/experiments.hpp"

using namespace rehydil;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::trunc) << text;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.model.depth = 3;
  c.model.base_channels = 2;
  c.model.image_size = 16;
  c.model.cph_stages = {2, 3};
  c.plan.modality_order = {Modality::T1, Modality::T2};
  c.plan.omega = {0.0, 1.0};
  c.plan.epochs = 1;
  c.plan.batch_size = 3;
  return c;
}

// A summary whose 15 rows hold known values: WT = row / 100, TC = 0.5, ET = 0.
std::string fake_summary() {
  std::string s = "subset_mask,subset,WT,TC,ET\n";
  for (const auto& subset : ModalitySubset::nonempty()) {
    s += std::to_string(subset.bits()) + "," + subset.label() + "," + std::to_string(subset.bits() / 100.0) + ",0.5,0\n";
  }
  return s;
}

class ExperimentsTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("rehydil_experiments_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }
  fs::path root_;
};

}  // namespace

TEST(AblationSettings, GridsHaveTheExpectedRows) {
  TrainConfig base;
  auto labels = [&](AblationGrid g) {
    std::vector<std::string> out;
    for (const auto& s : ablation_settings(g, base)) out.push_back(s.label);
    return out;
  };
  EXPECT_EQ(labels(AblationGrid::Cph), (std::vector<std::string>{"layers 5", "layers 5+4", "layers 5+4+3"}));
  EXPECT_EQ(labels(AblationGrid::Similarity), (std::vector<std::string>{"cosine", "tversky"}));
  EXPECT_EQ(labels(AblationGrid::Tversky),
            (std::vector<std::string>{"alpha 0.5 beta 0.5", "alpha 0.9 beta 1.3", "alpha 0.8 beta 1.4",
                                      "alpha 0.7 beta 1.5", "alpha 0.6 beta 1.6"}));
  EXPECT_EQ(labels(AblationGrid::Modules), (std::vector<std::string>{"DIL", "DIL+CPH", "DIL+TAC", "DIL+CPH+TAC"}));
  for (const auto& s : ablation_settings(AblationGrid::Modules, base)) {
    EXPECT_TRUE(s.config.use_replay);
    EXPECT_EQ(s.config.model.cph_stages.empty(), s.label.find("CPH") == std::string::npos);
  }
  const auto tv = ablation_settings(AblationGrid::Tversky, base);
  EXPECT_EQ(tv[3].config.tversky.alpha, 0.7);
  EXPECT_EQ(tv[3].config.tversky.beta, 1.5);
  for (const auto& s : tv) EXPECT_EQ(s.slug.find(' '), std::string::npos);
  // Everything outside the swept field stays at the base value.
  EXPECT_EQ(format_config(ablation_settings(AblationGrid::Similarity, base)[1].config), format_config(base));
}

TEST(AblationSettings, GridNamesRoundTrip) {
  for (AblationGrid g : all_ablation_grids()) EXPECT_EQ(ablation_grid_from_string(to_string(g)), g);
  EXPECT_THROW(ablation_grid_from_string("layers"), std::invalid_argument);
}

TEST(AblationSettings, ModulesGridKeepsAConfiguredCphPlacement) {
  TrainConfig base;
  base.model.cph_stages = {3};
  EXPECT_EQ(ablation_settings(AblationGrid::Modules, base)[1].config.model.cph_stages, (std::set<std::size_t>{3}));
  base.model.cph_stages.clear();
  EXPECT_EQ(ablation_settings(AblationGrid::Modules, base)[1].config.model.cph_stages, ModelConfig{}.cph_stages);
}

TEST_F(ExperimentsTest, SummaryAveragesTheFifteenSubsets) {
  TrainConfig c;
  c.similarity = SimilarityKind::Cosine;
  write(root_ / "runA" / "config.txt", format_config(c));
  write(root_ / "runA" / "dsc_summary.csv", fake_summary());
  const RunSummary s = summarize_run(root_ / "runA");
  EXPECT_NEAR(s.mean_dsc[0], 0.08, 1e-12);  // mean of 1..15 is 8
  EXPECT_NEAR(s.mean_dsc[1], 0.5, 1e-12);
  EXPECT_EQ(s.mean_dsc[2], 0.0);
  std::ostringstream table;
  write_comparison_table(table, {s});
  EXPECT_EQ(table.str(), "run,replay,tac,cph_stages,similarity,alpha,beta,WT,TC,ET\n"
                         "runA,on,on,5+4,cosine,0.7,1.5,8.00,50.00,0.00\n");
  std::ostringstream grid;
  write_grid_table(grid, AblationGrid::Similarity, {s});
  EXPECT_EQ(grid.str(), "grid,setting,WT,TC,ET\nsimilarity,cosine,8.00,50.00,0.00\n");
}

TEST_F(ExperimentsTest, SummaryRejectsIncompleteTables) {
  write(root_ / "r" / "config.txt", format_config(TrainConfig{}));
  std::string partial = fake_summary();
  partial.resize(partial.rfind('\n', partial.size() - 2) + 1);
  write(root_ / "r" / "dsc_summary.csv", partial);
  EXPECT_THROW(summarize_run(root_ / "r"), std::invalid_argument);
  write(root_ / "r" / "dsc_summary.csv", "mask,WT\n");
  EXPECT_THROW(summarize_run(root_ / "r"), std::invalid_argument);
  EXPECT_THROW(summarize_run(root_ / "missing"), std::invalid_argument);
}

TEST_F(ExperimentsTest, RelativeRunPathsUseTheRunRoot) {
  ::setenv("REHYDIL_RUN_ROOT", root_.c_str(), 1);
  EXPECT_EQ(resolve_run_dir("x/y"), root_ / "x/y");
  EXPECT_EQ(resolve_run_dir("/abs/run"), fs::path("/abs/run"));
  ::unsetenv("REHYDIL_RUN_ROOT");
  EXPECT_EQ(resolve_run_dir("x/y"), fs::path("x/y"));
}

TEST_F(ExperimentsTest, TrainEvaluateSummarize) {
  DatasetSpec spec;
  spec.seed = 4;
  spec.num_patients = 12;
  spec.slices_per_patient = 2;
  spec.image_size = 16;
  spec.network_depth = 3;
  generate_dataset(spec, root_ / "data");
  const Dataset data = Dataset::open(root_ / "data");
  const SampleStore store(data);
  const TrainConfig c = tiny_config();
  train_run(c, store, root_ / "run");
  EXPECT_EQ(run_data_source(root_ / "run"), fs::absolute(root_ / "data").lexically_normal());
  EXPECT_EQ(format_config(run_config(root_ / "run")), format_config(c));
  const RunEvaluation e = evaluate_run(root_ / "run", store);
  for (const char* f : {"dsc_subsets.csv", "dsc_summary.csv", "forgetting.csv"}) EXPECT_TRUE(fs::exists(root_ / "run" / f));
  EXPECT_EQ(e.forgetting.dsc.size(), 2u);
  const RunSummary s = summarize_run(root_ / "run");
  for (std::size_t r = 0; r < kNumRegions; ++r) {
    double mean = 0.0;
    for (const auto& subset : ModalitySubset::nonempty()) mean += e.subsets.mean(static_cast<Region>(r), subset) / 15.0;
    EXPECT_NEAR(s.mean_dsc[r], mean, 1e-12);
  }
  // Evaluation is a pure function of the run: a second pass rewrites identical files.
  const std::string before = slurp(root_ / "run" / "dsc_subsets.csv");
  evaluate_run(root_ / "run", store);
  EXPECT_EQ(slurp(root_ / "run" / "dsc_subsets.csv"), before);
  fs::remove(root_ / "run" / checkpoint_name(2, Modality::T2));
  EXPECT_THROW(evaluate_run(root_ / "run", store), std::invalid_argument);
}
