#include "rehydil/experiments.hpp"

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <set>
#include <stdexcept>

namespace fs = std::filesystem;

namespace rehydil {
namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string short_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string percent_columns(const std::array<double, kNumRegions>& dsc) {
  std::string out;
  for (double v : dsc) out += "," + fixed(100.0 * v, 2);
  return out;
}

std::string stage_label(const std::set<std::size_t>& stages) {
  if (stages.empty()) return "none";
  std::string out;
  for (auto it = stages.rbegin(); it != stages.rend(); ++it) out += (out.empty() ? "" : "+") + std::to_string(*it);
  return out;
}

}  // namespace

fs::path resolve_run_dir(const fs::path& path) {
  const char* root = std::getenv("REHYDIL_RUN_ROOT");
  if (path.is_relative() && root != nullptr && *root != '\0') return fs::path(root) / path;
  return path;
}

RunResult train_run(const TrainConfig& config, const SampleStore& store, const fs::path& run_dir) {
  fs::create_directories(run_dir);
  write_file(run_dir / "data_source.txt", fs::absolute(store.dataset().root()).lexically_normal().string() + "\n");
  return run_training(config, store, run_dir);
}

fs::path run_data_source(const fs::path& run_dir) {
  std::string text = read_file(run_dir / "data_source.txt");
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  return text;
}

TrainConfig run_config(const fs::path& run_dir) { return parse_config(read_file(run_dir / "config.txt")); }

RunEvaluation evaluate_run(const fs::path& run_dir, const SampleStore& store, std::size_t batch_size, Split split) {
  const TrainConfig config = run_config(run_dir);
  const auto& order = config.plan.modality_order;
  std::vector<ModelParams> stages;
  for (std::size_t s = 0; s < order.size(); ++s) {
    const fs::path ckpt = run_dir / checkpoint_name(s + 1, order[s]);
    if (!fs::exists(ckpt)) throw std::invalid_argument("missing checkpoint " + ckpt.string());
    stages.push_back(load_checkpoint(ckpt));
  }
  RunEvaluation result;
  result.subsets = evaluate_subsets(stages.back(), store, ModalitySubset::nonempty(), config.threshold, batch_size, split);
  result.forgetting = forgetting_report(stages, order, store, config.threshold, batch_size, split);
  std::ostringstream entries, summary, forgetting;
  result.subsets.write_entries_csv(entries);
  result.subsets.write_summary_csv(summary);
  result.forgetting.write_csv(forgetting);
  write_file(run_dir / "dsc_subsets.csv", entries.str());
  write_file(run_dir / "dsc_summary.csv", summary.str());
  write_file(run_dir / "forgetting.csv", forgetting.str());
  return result;
}

RunSummary summarize_run(const fs::path& run_dir) {
  RunSummary s;
  s.dir = run_dir;
  s.config = run_config(run_dir);
  std::stringstream in(read_file(run_dir / "dsc_summary.csv"));
  std::string line;
  std::getline(in, line);
  if (line != "subset_mask,subset,WT,TC,ET") throw std::invalid_argument("unexpected header in " + run_dir.string());
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    if (cells.size() != 2 + kNumRegions) throw std::invalid_argument("malformed summary row in " + run_dir.string());
    for (std::size_t r = 0; r < kNumRegions; ++r) s.mean_dsc[r] += std::stod(cells[2 + r]);
    ++rows;
  }
  if (rows != 15) {
    throw std::invalid_argument("expected 15 subset rows in " + run_dir.string() + ", got " + std::to_string(rows));
  }
  for (double& v : s.mean_dsc) v /= static_cast<double>(rows);
  return s;
}

void write_comparison_table(std::ostream& out, const std::vector<RunSummary>& runs) {
  out << "run,replay,tac,cph_stages,similarity,alpha,beta,WT,TC,ET\n";
  for (const auto& r : runs) {
    const TrainConfig& c = r.config;
    out << r.dir.filename().string() << ',' << (c.use_replay ? "on" : "off") << ',' << (c.use_tac ? "on" : "off")
        << ',' << stage_label(c.model.cph_stages) << ',' << to_string(c.similarity) << ','
        << short_number(c.tversky.alpha) << ',' << short_number(c.tversky.beta) << percent_columns(r.mean_dsc)
        << '\n';
  }
}

std::string to_string(AblationGrid grid) {
  switch (grid) {
    case AblationGrid::Cph: return "cph";
    case AblationGrid::Similarity: return "similarity";
    case AblationGrid::Tversky: return "tversky";
    case AblationGrid::Modules: return "modules";
  }
  throw std::invalid_argument("unknown ablation grid");
}

AblationGrid ablation_grid_from_string(const std::string& name) {
  for (AblationGrid g : all_ablation_grids())
    if (to_string(g) == name) return g;
  throw std::invalid_argument("unknown ablation grid '" + name + "' (expected cph, similarity, tversky or modules)");
}

std::vector<AblationGrid> all_ablation_grids() {
  return {AblationGrid::Cph, AblationGrid::Similarity, AblationGrid::Tversky, AblationGrid::Modules};
}

std::vector<AblationSetting> ablation_settings(AblationGrid grid, const TrainConfig& base) {
  std::vector<AblationSetting> out;
  auto add = [&](TrainConfig c) {
    c.validate();
    const std::string label = grid_setting_label(grid, c);
    std::string slug;
    for (char ch : label) slug += std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' ? ch : '_';
    out.push_back({label, slug, std::move(c)});
  };
  switch (grid) {
    case AblationGrid::Cph:
      for (std::set<std::size_t> stages : {std::set<std::size_t>{5}, {4, 5}, {3, 4, 5}}) {
        TrainConfig c = base;
        c.model.cph_stages = stages;
        add(c);
      }
      break;
    case AblationGrid::Similarity:
      for (SimilarityKind kind : {SimilarityKind::Cosine, SimilarityKind::Tversky}) {
        TrainConfig c = base;
        c.similarity = kind;
        add(c);
      }
      break;
    case AblationGrid::Tversky:
      for (auto [a, b] : std::vector<std::pair<double, double>>{{0.5, 0.5}, {0.9, 1.3}, {0.8, 1.4}, {0.7, 1.5}, {0.6, 1.6}}) {
        TrainConfig c = base;
        c.tversky.alpha = a;
        c.tversky.beta = b;
        add(c);
      }
      break;
    case AblationGrid::Modules: {
      const std::set<std::size_t> cph = base.model.cph_stages.empty() ? ModelConfig{}.cph_stages : base.model.cph_stages;
      for (bool with_cph : {false, true}) {
        for (bool with_tac : {false, true}) {
          TrainConfig c = base;
          c.use_replay = true;
          c.use_tac = with_tac;
          c.model.cph_stages = with_cph ? cph : std::set<std::size_t>{};
          add(c);
        }
      }
      // Table order: DIL, DIL+CPH, DIL+TAC, DIL+CPH+TAC.
      std::swap(out[1], out[2]);
      break;
    }
  }
  return out;
}

std::string grid_setting_label(AblationGrid grid, const TrainConfig& c) {
  switch (grid) {
    case AblationGrid::Cph: return "layers " + stage_label(c.model.cph_stages);
    case AblationGrid::Similarity: return to_string(c.similarity);
    case AblationGrid::Tversky:
      return "alpha " + short_number(c.tversky.alpha) + " beta " + short_number(c.tversky.beta);
    case AblationGrid::Modules: {
      std::string label = c.use_replay ? "DIL" : "sequential";
      if (!c.model.cph_stages.empty()) label += "+CPH";
      if (c.use_tac) label += "+TAC";
      return label;
    }
  }
  throw std::invalid_argument("unknown ablation grid");
}

void write_grid_table(std::ostream& out, AblationGrid grid, const std::vector<RunSummary>& runs) {
  out << "grid,setting,WT,TC,ET\n";
  for (const auto& r : runs) out << to_string(grid) << ',' << grid_setting_label(grid, r.config) << percent_columns(r.mean_dsc) << '\n';
}

std::string run_ablation(AblationGrid grid, const TrainConfig& base, const SampleStore& store, const fs::path& out_dir,
                         std::ostream* log) {
  std::vector<RunSummary> runs;
  for (const auto& setting : ablation_settings(grid, base)) {
    const fs::path run_dir = out_dir / to_string(grid) / setting.slug;
    if (log) *log << "[" << to_string(grid) << "] " << setting.label << " -> " << run_dir.string() << std::endl;
    train_run(setting.config, store, run_dir);
    evaluate_run(run_dir, store);
    runs.push_back(summarize_run(run_dir));
  }
  std::ostringstream table;
  write_grid_table(table, grid, runs);
  write_file(out_dir / (to_string(grid) + ".csv"), table.str());
  return table.str();
}

}  // namespace rehydil
