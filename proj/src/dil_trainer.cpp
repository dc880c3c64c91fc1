#include "rehydil/dil_trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "rehydil/ops.hpp"

namespace rehydil {

namespace fs = std::filesystem;

namespace {

// Independent random streams so switching one feature off leaves the others'
// draws untouched.
enum class Stream : std::uint32_t { Batches = 1, Replay = 2, Selection = 3 };

std::mt19937_64 stream_rng(std::uint64_t seed, std::size_t stage, Stream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage), static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw std::invalid_argument("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw std::invalid_argument("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return std::stoull(v);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw std::invalid_argument("config: '" + key + "' expects true or false, got '" + v + "'");
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& f) {
  std::string out;
  for (const auto& it : items) out += (out.empty() ? "" : ",") + f(it);
  return out;
}

Tensor sample_maps(const Tensor& batch, std::size_t index) {
  Tensor one = index_select(batch, 0, {index});
  return reshape(one, {batch.dim(1), batch.dim(2), batch.dim(3)});
}

// Partial Fisher-Yates: k distinct positions out of n, in draw order.
std::vector<std::size_t> draw_without_replacement(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

std::vector<PredictionEntry> replay_entries(const ReplayBuffer& replay, const std::vector<std::size_t>& positions,
                                            const ModelParams& previous, const SampleStore& store) {
  std::vector<std::size_t> ids;
  for (std::size_t p : positions) ids.push_back(replay.entries()[p].sample_id);
  NoGradGuard no_grad;
  ForwardInfo info;
  Tensor preds = clamp(forward(store.images(ids), previous, &info), 0.0, 1.0);
  std::vector<PredictionEntry> out;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const ReplayEntry& e = replay.entries()[positions[k]];
    out.push_back({sample_maps(preds, k), e.patient_id, channel(e.modality), PredictionSource::PreviousStage});
  }
  return out;
}

}  // namespace

void StagePlan::validate() const {
  if (modality_order.empty()) throw std::invalid_argument("plan needs at least one stage");
  std::vector<Modality> sorted = modality_order;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw std::invalid_argument("each modality may appear in only one stage");
  }
  if (omega.size() != modality_order.size()) throw std::invalid_argument("omega needs one value per stage");
  for (double w : omega) {
    if (!(w >= 0.0)) throw std::invalid_argument("omega values must be non-negative");
  }
  if (epochs == 0 || batch_size == 0) throw std::invalid_argument("epochs and batch_size must be positive");
  if (!(learning_rate > 0.0) || !(weight_decay >= 0.0)) throw std::invalid_argument("bad learning rate or weight decay");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(adam_epsilon > 0.0)) {
    throw std::invalid_argument("bad Adam constants");
  }
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw std::invalid_argument("warmup_fraction must be in [0, 1)");
  for (double m : milestones) {
    if (!(m > 0.0 && m <= 1.0)) throw std::invalid_argument("milestones must be fractions in (0, 1]");
  }
  if (!std::is_sorted(milestones.begin(), milestones.end())) throw std::invalid_argument("milestones must be ascending");
  if (!(lr_decay > 0.0)) throw std::invalid_argument("lr_decay must be positive");
}

void TrainConfig::validate() const {
  model.validate();
  plan.validate();
  tversky.validate();
  if (!(retention_percent > 0.0 && retention_percent <= 100.0)) {
    throw std::invalid_argument("retention_percent must be in (0, 100]");
  }
  if (use_tac && !use_replay) {
    throw std::invalid_argument("TAC needs the replay buffer: its queue holds replayed predictions (disable both)");
  }
  if (!(gamma > 0.0) || !(tau > 0.0)) throw std::invalid_argument("gamma and tau must be positive");
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must be in (0, 1)");
  if (model.num_modalities != kNumModalities || model.num_classes != kNumRegions) {
    throw std::invalid_argument("the dataset has 4 modalities and 3 regions");
  }
}

std::string format_config(const TrainConfig& c) {
  std::map<std::string, std::string> kv;
  kv["model.depth"] = std::to_string(c.model.depth);
  kv["model.base_channels"] = std::to_string(c.model.base_channels);
  kv["model.num_classes"] = std::to_string(c.model.num_classes);
  kv["model.num_modalities"] = std::to_string(c.model.num_modalities);
  kv["model.cph_stages"] = format_stage_set(c.model.cph_stages);
  kv["model.image_size"] = std::to_string(c.model.image_size);
  kv["model.init_seed"] = std::to_string(c.model.init_seed);
  kv["model.instance_norm"] = c.model.instance_norm ? "true" : "false";
  kv["plan.modality_order"] = join(c.plan.modality_order, [](Modality m) { return to_string(m); });
  kv["plan.omega"] = join(c.plan.omega, fmt);
  kv["plan.epochs"] = std::to_string(c.plan.epochs);
  kv["plan.batch_size"] = std::to_string(c.plan.batch_size);
  kv["plan.learning_rate"] = fmt(c.plan.learning_rate);
  kv["plan.weight_decay"] = fmt(c.plan.weight_decay);
  kv["plan.adam_beta1"] = fmt(c.plan.adam_beta1);
  kv["plan.adam_beta2"] = fmt(c.plan.adam_beta2);
  kv["plan.adam_epsilon"] = fmt(c.plan.adam_epsilon);
  kv["plan.decoupled_weight_decay"] = c.plan.decoupled_weight_decay ? "true" : "false";
  kv["plan.warmup_fraction"] = fmt(c.plan.warmup_fraction);
  kv["plan.milestones"] = join(c.plan.milestones, fmt);
  kv["plan.lr_decay"] = fmt(c.plan.lr_decay);
  kv["retention_percent"] = fmt(c.retention_percent);
  kv["use_replay"] = c.use_replay ? "true" : "false";
  kv["use_tac"] = c.use_tac ? "true" : "false";
  kv["replay_in_intra"] = c.replay_in_intra ? "true" : "false";
  kv["tversky.alpha"] = fmt(c.tversky.alpha);
  kv["tversky.beta"] = fmt(c.tversky.beta);
  kv["tversky.epsilon"] = fmt(c.tversky.epsilon);
  kv["gamma"] = fmt(c.gamma);
  kv["tau"] = fmt(c.tau);
  kv["similarity"] = to_string(c.similarity);
  kv["seed"] = std::to_string(c.seed);
  kv["threshold"] = fmt(c.threshold);
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

void set_config_value(TrainConfig& c, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  auto doubles = [&] {
    std::vector<double> out;
    for (const auto& item : split_list(v)) out.push_back(to_double(key, item));
    return out;
  };
  if (key == "model.depth") c.model.depth = to_uint(key, v);
  else if (key == "model.base_channels") c.model.base_channels = to_uint(key, v);
  else if (key == "model.num_classes") c.model.num_classes = to_uint(key, v);
  else if (key == "model.num_modalities") c.model.num_modalities = to_uint(key, v);
  else if (key == "model.cph_stages") c.model.cph_stages = parse_stage_set(v);
  else if (key == "model.image_size") c.model.image_size = to_uint(key, v);
  else if (key == "model.init_seed") c.model.init_seed = to_uint(key, v);
  else if (key == "model.instance_norm") c.model.instance_norm = to_bool(key, v);
  else if (key == "plan.modality_order") {
    c.plan.modality_order.clear();
    for (const auto& item : split_list(v)) c.plan.modality_order.push_back(modality_from_string(item));
  } else if (key == "plan.omega") c.plan.omega = doubles();
  else if (key == "plan.epochs") c.plan.epochs = to_uint(key, v);
  else if (key == "plan.batch_size") c.plan.batch_size = to_uint(key, v);
  else if (key == "plan.learning_rate") c.plan.learning_rate = to_double(key, v);
  else if (key == "plan.weight_decay") c.plan.weight_decay = to_double(key, v);
  else if (key == "plan.adam_beta1") c.plan.adam_beta1 = to_double(key, v);
  else if (key == "plan.adam_beta2") c.plan.adam_beta2 = to_double(key, v);
  else if (key == "plan.adam_epsilon") c.plan.adam_epsilon = to_double(key, v);
  else if (key == "plan.decoupled_weight_decay") c.plan.decoupled_weight_decay = to_bool(key, v);
  else if (key == "plan.warmup_fraction") c.plan.warmup_fraction = to_double(key, v);
  else if (key == "plan.milestones") c.plan.milestones = v.empty() ? std::vector<double>{} : doubles();
  else if (key == "plan.lr_decay") c.plan.lr_decay = to_double(key, v);
  else if (key == "retention_percent") c.retention_percent = to_double(key, v);
  else if (key == "use_replay") c.use_replay = to_bool(key, v);
  else if (key == "use_tac") c.use_tac = to_bool(key, v);
  else if (key == "replay_in_intra") c.replay_in_intra = to_bool(key, v);
  else if (key == "tversky.alpha") c.tversky.alpha = to_double(key, v);
  else if (key == "tversky.beta") c.tversky.beta = to_double(key, v);
  else if (key == "tversky.epsilon") c.tversky.epsilon = to_double(key, v);
  else if (key == "gamma") c.gamma = to_double(key, v);
  else if (key == "tau") c.tau = to_double(key, v);
  else if (key == "similarity") c.similarity = similarity_from_string(v);
  else if (key == "seed") c.seed = to_uint(key, v);
  else if (key == "threshold") c.threshold = to_double(key, v);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    set_config_value(base, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

TrainConfig load_config_file(const fs::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::size_t retention_count(std::size_t n, double retention_percent) {
  // The small slack keeps exact products such as 100 * 10 / 100 from rounding down.
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * retention_percent / 100.0 + 1e-9));
}

std::vector<std::size_t> select_replay_samples(const std::vector<std::size_t>& sample_ids,
                                               const std::vector<double>& losses, double retention_percent) {
  if (sample_ids.empty()) throw std::invalid_argument("select_replay_samples: empty stage");
  if (sample_ids.size() != losses.size()) throw std::invalid_argument("select_replay_samples: one loss per sample");
  if (!(retention_percent > 0.0)) throw std::invalid_argument("select_replay_samples: retention must be positive");
  for (double l : losses) {
    if (!std::isfinite(l)) throw std::invalid_argument("select_replay_samples: non-finite loss");
  }
  std::vector<double> sorted = losses;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(losses[a] - median) < std::abs(losses[b] - median);
  });
  const std::size_t keep = std::min(n, retention_count(n, retention_percent));
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < keep; ++i) out.push_back(sample_ids[order[i]]);
  return out;
}

ReplayBuffer::ReplayBuffer(double retention_percent) : retention_percent_(retention_percent) {
  if (!(retention_percent > 0.0)) throw std::invalid_argument("replay buffer: retention must be positive");
}

std::size_t ReplayBuffer::capacity() const {
  std::size_t t = 0;
  for (std::size_t n : stage_sizes_) t += retention_count(n, retention_percent_);
  return t;
}

void ReplayBuffer::extend(std::size_t stage, const std::vector<std::size_t>& stage_samples,
                          const std::vector<double>& losses, const SampleStore& store) {
  const auto kept = select_replay_samples(stage_samples, losses, retention_percent_);
  for (std::size_t id : kept) {
    const std::size_t pos = static_cast<std::size_t>(std::find(stage_samples.begin(), stage_samples.end(), id) -
                                                     stage_samples.begin());
    entries_.push_back({id, store.modality_of(id), store.patient_of(id), losses[pos], stage});
  }
  stage_sizes_.push_back(stage_samples.size());
}

void ReplayBuffer::write_manifest(const fs::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "stage,sample_id,patient_id,modality,loss\n";
  for (const auto& e : entries_) {
    out << e.stage << ',' << e.sample_id << ',' << e.patient_id << ',' << to_string(e.modality) << ',' << fmt(e.loss)
        << '\n';
  }
}

DistinctPatientSampler::DistinctPatientSampler(std::vector<std::size_t> sample_ids,
                                               const std::vector<std::size_t>& patients, std::size_t batch_size)
    : batch_size_(batch_size) {
  if (sample_ids.size() != patients.size()) throw std::invalid_argument("sampler: one patient per sample");
  if (batch_size == 0) throw std::invalid_argument("sampler: batch size must be positive");
  std::map<std::size_t, std::vector<std::size_t>> by_patient;
  for (std::size_t i = 0; i < sample_ids.size(); ++i) by_patient[patients[i]].push_back(sample_ids[i]);
  for (auto& [p, ids] : by_patient) groups_.push_back(std::move(ids));
  if (groups_.size() < batch_size) {
    throw std::invalid_argument("sampler: batch size " + std::to_string(batch_size) + " needs that many distinct patients, only " +
                                std::to_string(groups_.size()) + " available; reduce the batch size");
  }
  // suffix_esp_[j][k] = elementary symmetric polynomial e_k of the group sizes j..m-1.
  const std::size_t m = groups_.size();
  suffix_esp_.assign(m + 1, std::vector<long double>(batch_size + 1, 0.0L));
  suffix_esp_[m][0] = 1.0L;
  for (std::size_t j = m; j-- > 0;) {
    const auto n = static_cast<long double>(groups_[j].size());
    suffix_esp_[j][0] = 1.0L;
    for (std::size_t k = 1; k <= batch_size; ++k) suffix_esp_[j][k] = suffix_esp_[j + 1][k] + n * suffix_esp_[j + 1][k - 1];
  }
}

std::vector<std::size_t> DistinctPatientSampler::draw(std::mt19937_64& rng) const {
  // Include each patient with its conditional probability under the uniform
  // law on valid sets, then pick one of its samples uniformly.
  std::vector<std::size_t> batch;
  std::size_t k = batch_size_;
  std::uniform_real_distribution<long double> unit(0.0L, 1.0L);
  for (std::size_t j = 0; j < groups_.size() && k > 0; ++j) {
    const auto n = static_cast<long double>(groups_[j].size());
    const long double include = n * suffix_esp_[j + 1][k - 1] / suffix_esp_[j][k];
    if (unit(rng) < include) {
      std::uniform_int_distribution<std::size_t> pick(0, groups_[j].size() - 1);
      batch.push_back(groups_[j][pick(rng)]);
      --k;
    }
  }
  return batch;
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double epsilon, double weight_decay, bool decoupled)
    : params_(std::move(params)),
      beta1_(beta1),
      beta2_(beta2),
      epsilon_(epsilon),
      weight_decay_(weight_decay),
      decoupled_(decoupled) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i];
    auto grad = p.grad();
    auto value = p.mutable_data();
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double w = value[k];
      const double g = (grad.empty() ? 0.0 : grad[k]) + (decoupled_ ? 0.0 : weight_decay_ * w);
      m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g;
      v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g * g;
      value[k] -= lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + epsilon_);
      if (decoupled_) value[k] -= lr * weight_decay_ * w;
    }
  }
}

WarmupMultiStep::WarmupMultiStep(double base_lr, std::size_t total_steps, double warmup_fraction,
                                 std::vector<double> milestones, double decay)
    : base_(base_lr), decay_(decay) {
  warmup_ = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps) - 1e-9));
  for (double m : milestones) {
    milestone_steps_.push_back(static_cast<std::size_t>(std::floor(m * static_cast<double>(total_steps) + 1e-9)));
  }
}

double WarmupMultiStep::lr(std::size_t step) const {
  if (step < warmup_) return base_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
  double lr = base_;
  for (std::size_t m : milestone_steps_) {
    if (step >= m) lr *= decay_;
  }
  return lr;
}

std::vector<std::size_t> draw_replay_batch(const ReplayBuffer& replay, std::size_t batch_size, std::mt19937_64& rng) {
  if (replay.empty()) throw std::logic_error("replay buffer is empty after stage 1");
  return draw_without_replacement(replay.size(), std::min(batch_size, replay.size()), rng);
}

BalancedQueue populate_balanced_queue(const ReplayBuffer& replay, const std::vector<std::size_t>& current_batch,
                                      const Tensor& current_predictions, const ModelParams& previous,
                                      const SampleStore& store, std::mt19937_64& rng) {
  if (current_predictions.rank() != 4 || current_predictions.dim(0) != current_batch.size()) {
    throw ShapeError("populate_balanced_queue", "predictions do not match the current batch");
  }
  BalancedQueue q;
  const auto positions = draw_replay_batch(replay, current_batch.size(), rng);
  q.sample_size = positions.size();
  q.replay = replay_entries(replay, positions, previous, store);
  for (std::size_t p : positions) q.replay_ids.push_back(replay.entries()[p].sample_id);
  Tensor clamped = clamp(current_predictions, 0.0, 1.0);
  for (std::size_t k : draw_without_replacement(current_batch.size(), q.sample_size, rng)) {
    const std::size_t id = current_batch[k];
    q.current.push_back({sample_maps(clamped, k), store.patient_of(id), channel(store.modality_of(id)),
                         PredictionSource::CurrentStage});
  }
  return q;
}

std::string metrics_header() { return "stage,epoch,step,lr,l_intra,l_tac,l_total"; }

std::string format_metrics_row(const MetricsRow& r) {
  return std::to_string(r.stage) + ',' + std::to_string(r.epoch) + ',' + std::to_string(r.step) + ',' + fmt(r.lr) + ',' +
         fmt(r.l_intra) + ',' + fmt(r.l_tac) + ',' + fmt(r.l_total);
}

std::vector<double> replay_selection_losses(std::size_t stage, const TrainConfig& config, const SampleStore& store,
                                            const std::vector<std::size_t>& sample_ids, const ModelParams& params,
                                            const ReplayBuffer* replay, const ModelParams* previous) {
  NoGradGuard no_grad;
  const double omega = config.plan.omega.at(stage - 1);
  const bool with_tac = stage > 1 && config.use_tac && omega > 0.0 && replay && !replay->empty() && previous;
  std::vector<PredictionEntry> bank;
  if (with_tac) {
    std::mt19937_64 rng = stream_rng(config.seed, stage, Stream::Selection);
    bank = replay_entries(*replay, draw_replay_batch(*replay, config.plan.batch_size, rng), *previous, store);
  }
  const TacConfig tac_cfg{config.tversky, config.tau, config.similarity};

  // Deterministic batches: samples of one slice index (distinct patients), in
  // patient order, chunked by the batch size.
  std::map<std::size_t, std::vector<std::size_t>> by_slice;
  std::map<std::size_t, std::size_t> position;
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    by_slice[store.dataset().record(sample_ids[i]).slice].push_back(sample_ids[i]);
    position[sample_ids[i]] = i;
  }
  std::vector<double> losses(sample_ids.size(), 0.0);
  for (auto& [slice, ids] : by_slice) {
    std::sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return store.patient_of(a) < store.patient_of(b); });
    for (std::size_t start = 0; start < ids.size(); start += config.plan.batch_size) {
      const std::vector<std::size_t> chunk(ids.begin() + static_cast<long>(start),
                                           ids.begin() + static_cast<long>(std::min(ids.size(), start + config.plan.batch_size)));
      ForwardInfo info;
      Tensor pred = forward(store.images(chunk), params, &info);
      Tensor intra = per_sample_intra_loss(pred, store.masks(chunk), config.tversky, config.gamma);
      Tensor clamped = clamp(pred, 0.0, 1.0);
      for (std::size_t k = 0; k < chunk.size(); ++k) {
        double loss = intra.at(k);
        if (with_tac) {
          const std::size_t id = chunk[k];
          PredictionEntry anchor{sample_maps(clamped, k), store.patient_of(id), channel(store.modality_of(id)),
                                 PredictionSource::CurrentStage};
          loss += omega * tac_loss_directional({anchor}, bank, tac_cfg).loss.item();
        }
        losses[position[chunk[k]]] = loss;
      }
    }
  }
  return losses;
}

StageOutcome train_stage(std::size_t stage, const TrainConfig& config, const SampleStore& store,
                         const ReplayBuffer* replay, const ModelParams* previous,
                         const std::function<void(const MetricsRow&)>& on_step) {
  config.validate();
  const StagePlan& plan = config.plan;
  if (stage < 1 || stage > plan.modality_order.size()) throw std::invalid_argument("train_stage: stage out of range");
  if (stage > 1 && !previous) throw std::invalid_argument("train_stage: stage > 1 needs the previous stage's weights");
  const bool use_replay = config.use_replay && stage > 1;
  if (use_replay && (!replay || replay->empty())) {
    throw std::logic_error("train_stage: replay buffer is empty at stage " + std::to_string(stage));
  }
  const double omega = plan.omega[stage - 1];
  const bool use_tac = use_replay && config.use_tac && omega > 0.0;
  const Modality modality = plan.modality_order[stage - 1];

  StageOutcome out;
  out.params = stage == 1 ? ModelParams::init(config.model) : load_stage_weights(*previous, config.model);
  out.sample_ids = store.dataset().sample_ids(Split::Train, modality);
  std::vector<std::size_t> patients;
  for (std::size_t id : out.sample_ids) patients.push_back(store.patient_of(id));
  DistinctPatientSampler sampler(out.sample_ids, patients, plan.batch_size);

  const std::size_t steps_per_epoch = (out.sample_ids.size() + plan.batch_size - 1) / plan.batch_size;
  const std::size_t total_steps = plan.epochs * steps_per_epoch;
  WarmupMultiStep schedule(plan.learning_rate, total_steps, plan.warmup_fraction, plan.milestones, plan.lr_decay);
  Adam optimizer(out.params.tensors(), plan.adam_beta1, plan.adam_beta2, plan.adam_epsilon, plan.weight_decay,
                 plan.decoupled_weight_decay);
  std::mt19937_64 batch_rng = stream_rng(config.seed, stage, Stream::Batches);
  std::mt19937_64 replay_rng = stream_rng(config.seed, stage, Stream::Replay);
  const TacConfig tac_cfg{config.tversky, config.tau, config.similarity};

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const double lr = schedule.lr(step);
      const std::vector<std::size_t> batch = sampler.draw(batch_rng);
      Tensor pred = forward(store.images(batch), out.params);
      Tensor per_sample = per_sample_intra_loss(pred, store.masks(batch), config.tversky, config.gamma);
      Tensor tac = Tensor::scalar(0.0);
      if (use_replay) {
        std::vector<std::size_t> replay_ids;
        if (use_tac) {
          BalancedQueue q = populate_balanced_queue(*replay, batch, pred, *previous, store, replay_rng);
          tac = tac_loss(q.replay, q.current, tac_cfg).loss;
          replay_ids = q.replay_ids;
        } else {
          for (std::size_t pos : draw_replay_batch(*replay, plan.batch_size, replay_rng)) {
            replay_ids.push_back(replay->entries()[pos].sample_id);
          }
        }
        if (config.replay_in_intra) {
          ForwardInfo info;
          Tensor replay_pred = forward(store.images(replay_ids), out.params, &info);
          Tensor replay_loss = per_sample_intra_loss(replay_pred, store.masks(replay_ids), config.tversky, config.gamma);
          per_sample = concat({per_sample, replay_loss}, 0);
        }
      }
      Tensor intra = mean(per_sample);
      Tensor total = total_loss(tac, intra, omega);
      const double total_value = total.item();
      if (!std::isfinite(total_value)) {
        std::string ids;
        for (std::size_t id : batch) ids += (ids.empty() ? "" : " ") + std::to_string(id);
        throw TrainingError("non-finite loss at stage " + std::to_string(stage) + " step " + std::to_string(step + 1) +
                            " (lr " + fmt(lr) + ", batch " + ids + ")");
      }
      out.params.zero_grad();
      total.backward();
      optimizer.step(lr);
      MetricsRow row{stage, epoch, step + 1, lr, intra.item(), tac.item(), total_value};
      out.metrics.push_back(row);
      if (on_step) on_step(row);
    }
  }
  out.sample_losses = replay_selection_losses(stage, config, store, out.sample_ids, out.params, replay, previous);
  return out;
}

std::string checkpoint_name(std::size_t stage, Modality modality) {
  return "stage" + std::to_string(stage) + "_" + to_string(modality) + ".ckpt";
}

RunResult run_training(const TrainConfig& config, const SampleStore& store, const fs::path& run_dir) {
  config.validate();
  if (store.image_size() != config.model.image_size) {
    throw std::invalid_argument("dataset image size " + std::to_string(store.image_size()) +
                                " differs from model.image_size " + std::to_string(config.model.image_size));
  }
  fs::create_directories(run_dir);
  {
    std::ofstream cfg(run_dir / "config.txt", std::ios::trunc);
    cfg << format_config(config);
  }
  std::ofstream metrics(run_dir / "metrics.csv", std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write metrics in " + run_dir.string());
  metrics << metrics_header() << '\n';
  auto log = [&](const MetricsRow& row) { metrics << format_metrics_row(row) << '\n'; };

  RunResult result{{}, ReplayBuffer(config.retention_percent)};
  for (std::size_t stage = 1; stage <= config.plan.modality_order.size(); ++stage) {
    const ModelParams* previous = stage > 1 ? &result.stage_params.back() : nullptr;
    StageOutcome outcome = train_stage(stage, config, store, config.use_replay ? &result.replay : nullptr, previous, log);
    if (config.use_replay) result.replay.extend(stage, outcome.sample_ids, outcome.sample_losses, store);
    save_checkpoint(run_dir / checkpoint_name(stage, config.plan.modality_order[stage - 1]), outcome.params);
    result.stage_params.push_back(std::move(outcome.params));
  }
  result.replay.write_manifest(run_dir / "replay_buffer.csv");
  return result;
}

}  // namespace rehydil
