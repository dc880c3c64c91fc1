#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rehydil/chsnet.hpp"
#include "rehydil/data_synth.hpp"
#include "rehydil/losses.hpp"

namespace rehydil {

struct StagePlan {
  std::vector<Modality> modality_order = {Modality::T1, Modality::T2, Modality::Flair, Modality::T1ce};
  std::vector<double> omega = {0.0, 1.0, 1.0, 1.0};  // TAC weight per stage
  std::size_t epochs = 6;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  double weight_decay = 4e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  bool decoupled_weight_decay = false;
  double warmup_fraction = 0.05;
  std::vector<double> milestones = {0.4, 0.6, 0.8, 0.9};  // fractions of the stage's steps
  double lr_decay = 0.5;

  void validate() const;
};

struct TrainConfig {
  ModelConfig model;
  StagePlan plan;
  double retention_percent = 10.0;
  bool use_replay = true;
  bool use_tac = true;
  bool replay_in_intra = true;
  TverskyParams tversky;
  double gamma = 1.2;
  double tau = 1.0;
  SimilarityKind similarity = SimilarityKind::Tversky;
  std::uint64_t seed = 1;
  double threshold = 0.5;

  void validate() const;
};

/// `key = value` lines covering every field, sorted by key.
std::string format_config(const TrainConfig& config);
/// Applies `key = value` lines ('#' starts a comment) on top of `base`.
/// Unknown keys and malformed values throw std::invalid_argument.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);
TrainConfig load_config_file(const std::filesystem::path& path, TrainConfig base = {});

/// floor(n * percent / 100).
std::size_t retention_count(std::size_t n, double retention_percent);

/// Ranks samples by |loss - median| (even count: mean of the two middle
/// values), ties to the lower position, and keeps the first
/// floor(n * percent / 100). Returns ids in rank order.
std::vector<std::size_t> select_replay_samples(const std::vector<std::size_t>& sample_ids,
                                               const std::vector<double>& losses, double retention_percent);

struct ReplayEntry {
  std::size_t sample_id = 0;
  Modality modality = Modality::T1;
  std::size_t patient_id = 0;
  double loss = 0.0;
  std::size_t stage = 0;  // 1-based
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(double retention_percent = 10.0);

  double retention_percent() const { return retention_percent_; }
  /// T = sum over seen stages of floor(|D_i| * percent / 100).
  std::size_t capacity() const;
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<ReplayEntry>& entries() const { return entries_; }

  /// Selects and appends this stage's retained samples.
  void extend(std::size_t stage, const std::vector<std::size_t>& stage_samples, const std::vector<double>& losses,
              const SampleStore& store);
  void write_manifest(const std::filesystem::path& path) const;

 private:
  double retention_percent_;
  std::vector<std::size_t> stage_sizes_;
  std::vector<ReplayEntry> entries_;
};

/// Draws batches of samples with pairwise-distinct patients, uniformly over
/// all such sets.
class DistinctPatientSampler {
 public:
  /// `patients[i]` is the patient of `sample_ids[i]`.
  DistinctPatientSampler(std::vector<std::size_t> sample_ids, const std::vector<std::size_t>& patients,
                         std::size_t batch_size);

  std::vector<std::size_t> draw(std::mt19937_64& rng) const;
  std::size_t num_patients() const { return groups_.size(); }

 private:
  std::vector<std::vector<std::size_t>> groups_;  // sample ids per patient
  std::size_t batch_size_;
  std::vector<std::vector<long double>> suffix_esp_;  // e_k over patients j..end
};

/// Adam with weight decay.
class Adam {
 public:
  /// Coupled decay adds weight_decay * w to the gradient before the moment
  /// updates. Decoupled decay shrinks w by lr * weight_decay * w after the step.
  Adam(std::vector<Tensor> params, double beta1, double beta2, double epsilon, double weight_decay,
       bool decoupled = false);
  /// Parameters without a gradient are treated as having a zero gradient.
  void step(double lr);
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, epsilon_, weight_decay_;
  bool decoupled_;
  std::size_t t_ = 0;
};

/// Linear warm-up over the first fraction of steps, then the rate is
/// multiplied by `decay` at each milestone (fractions of total steps).
class WarmupMultiStep {
 public:
  WarmupMultiStep(double base_lr, std::size_t total_steps, double warmup_fraction, std::vector<double> milestones,
                  double decay);
  double lr(std::size_t step) const;  // 0-based step
  std::size_t warmup_steps() const { return warmup_; }
  const std::vector<std::size_t>& milestone_steps() const { return milestone_steps_; }

 private:
  double base_;
  std::size_t warmup_;
  std::vector<std::size_t> milestone_steps_;
  double decay_;
};

struct BalancedQueue {
  std::vector<PredictionEntry> replay;   // previous-stage model, constants
  std::vector<PredictionEntry> current;  // current model, tracked
  std::vector<std::size_t> replay_ids;   // sample ids behind `replay`
  std::size_t sample_size = 0;
  std::size_t bank_size() const { return replay.size() + current.size(); }
};

/// Draws S = min(B, |R|) replay samples without replacement, predicts them with
/// `previous` under no-grad, and pairs them with S of the current batch's
/// predictions. All maps are clamped to [0, 1].
BalancedQueue populate_balanced_queue(const ReplayBuffer& replay, const std::vector<std::size_t>& current_batch,
                                      const Tensor& current_predictions, const ModelParams& previous,
                                      const SampleStore& store, std::mt19937_64& rng);

/// Same draw as populate_balanced_queue for the replay side only.
std::vector<std::size_t> draw_replay_batch(const ReplayBuffer& replay, std::size_t batch_size, std::mt19937_64& rng);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MetricsRow {
  std::size_t stage = 0;  // 1-based
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // 1-based within the stage
  double lr = 0.0;
  double l_intra = 0.0;
  double l_tac = 0.0;
  double l_total = 0.0;
};

std::string metrics_header();
std::string format_metrics_row(const MetricsRow& row);

struct StageOutcome {
  ModelParams params;
  std::vector<std::size_t> sample_ids;  // the stage's training samples
  std::vector<double> sample_losses;    // end-of-stage loss per sample
  std::vector<MetricsRow> metrics;
};

/// Trains stage `stage` (1-based) starting from `previous` (ignored at stage 1).
/// `replay` may be null when replay is off.
StageOutcome train_stage(std::size_t stage, const TrainConfig& config, const SampleStore& store,
                         const ReplayBuffer* replay, const ModelParams* previous,
                         const std::function<void(const MetricsRow&)>& on_step = {});

/// Per-sample loss used to rank replay candidates: L_intra at stage 1, plus
/// omega * TAC against a fixed seeded replay bank afterwards.
std::vector<double> replay_selection_losses(std::size_t stage, const TrainConfig& config, const SampleStore& store,
                                            const std::vector<std::size_t>& sample_ids, const ModelParams& params,
                                            const ReplayBuffer* replay, const ModelParams* previous);

struct RunResult {
  std::vector<ModelParams> stage_params;
  ReplayBuffer replay;
};

/// Full sequential run. Writes config.txt, metrics.csv, stageN_<MOD>.ckpt and
/// replay_buffer.csv into `run_dir`.
RunResult run_training(const TrainConfig& config, const SampleStore& store, const std::filesystem::path& run_dir);

std::string checkpoint_name(std::size_t stage, Modality modality);

}  // namespace rehydil
