#include "rehydil/gradcheck_suite.hpp"

#include <algorithm>
#include <random>

#include "rehydil/chsnet.hpp"
#include "rehydil/hypergraph.hpp"
#include "rehydil/losses.hpp"
#include "rehydil/ops.hpp"

namespace rehydil {
namespace {

Tensor uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor(shape, std::move(data));
}

Tensor mask(const Shape& shape, std::mt19937_64& rng, double p) {
  std::bernoulli_distribution coin(p);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = coin(rng) ? 1.0 : 0.0;
  return Tensor(shape, std::move(data));
}

class Runner {
 public:
  Runner(const GradCheckSuiteOptions& options, const std::function<void(const GradCheckCase&)>& on_case)
      : options_(options), on_case_(on_case) {}

  void check(const std::string& component, const std::string& target, std::size_t seed,
             const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
    GradCheckCase c{component, target, seed, finite_difference_check(f, x, options_.step, options_.tolerance)};
    if (on_case_) on_case_(c);
    result.cases.push_back(std::move(c));
  }

  GradCheckSuiteResult result;

 private:
  GradCheckSuiteOptions options_;
  std::function<void(const GradCheckCase&)> on_case_;
};

void check_losses(Runner& run, std::size_t seed) {
  std::mt19937_64 rng(seed * 7919 + 1);
  Tensor target = mask({3, 4, 4}, rng, 0.4);
  Tensor pred = uniform({3, 4, 4}, rng, 0.05, 0.95);
  std::uniform_real_distribution<double> a(0.3, 0.9), b(0.9, 1.8), g(0.5, 2.0);
  const TverskyParams params{a(rng), b(rng), 1e-6};
  const double gamma = g(rng);
  run.check("tversky_dice", "pred", seed, [&](const Tensor& x) { return tversky_dice_loss(x, target, params); },
            pred);
  run.check("focal_tversky", "pred", seed,
            [&](const Tensor& x) { return focal_tversky_loss(x, target, params, gamma); }, pred);
}

void check_tac(Runner& run, std::size_t seed) {
  std::mt19937_64 rng(seed * 104729 + 3);
  std::vector<PredictionEntry> replay = {
      PredictionEntry{uniform({3, 4, 4}, rng, 0.05, 0.95), 0, 0, PredictionSource::PreviousStage},
      PredictionEntry{uniform({3, 4, 4}, rng, 0.05, 0.95), 1, 1, PredictionSource::PreviousStage}};
  Tensor current = uniform({2, 3, 4, 4}, rng, 0.05, 0.95);
  for (SimilarityKind kind : {SimilarityKind::Tversky, SimilarityKind::Cosine}) {
    const TacConfig config{TverskyParams{}, 1.0, kind};
    auto f = [&](const Tensor& x) {
      std::vector<PredictionEntry> cur = {
          PredictionEntry{reshape(index_select(x, 0, {0}), {3, 4, 4}), 2, 2, PredictionSource::CurrentStage},
          PredictionEntry{reshape(index_select(x, 0, {1}), {3, 4, 4}), 0, 2, PredictionSource::CurrentStage}};
      return tac_loss(replay, cur, config).loss;
    };
    run.check("tac", "current queue (" + to_string(kind) + ")", seed, f, current);
  }
}

void check_hgnn_layer(Runner& run, std::size_t seed) {
  std::mt19937_64 rng(seed * 15485863 + 5);
  const std::size_t c = 3;
  Tensor map = uniform({2, c, 2, 3}, rng, -1.0, 1.0);
  const VertexSet layout = flatten_features(map);
  const Hypergraph graph = build_hypergraph(layout);
  Tensor weights = uniform({layout.size()}, rng, 0.5, 1.5);
  Tensor kernel = uniform({c, 2 * c, 1, 1}, rng, -0.5, 0.5);
  Tensor bias = uniform({c}, rng, -0.1, 0.1);
  Tensor probe = uniform({2, c, 2, 3}, rng, -1.0, 1.0);
  auto layer = [&](const Tensor& m, const Tensor& w, const Tensor& k, const Tensor& b) {
    const VertexSet v = flatten_features(m);
    return sum(fuse(hgnn_propagate(graph, v, w), v, m, k, b) * probe);
  };
  run.check("hgnn_layer", "features", seed, [&](const Tensor& x) { return layer(x, weights, kernel, bias); }, map);
  run.check("hgnn_layer", "edge_weights", seed, [&](const Tensor& x) { return layer(map, x, kernel, bias); },
            weights);
  run.check("hgnn_layer", "kernel", seed, [&](const Tensor& x) { return layer(map, weights, x, bias); }, kernel);
  run.check("hgnn_layer", "bias", seed, [&](const Tensor& x) { return layer(map, weights, kernel, x); }, bias);
}

void check_network(Runner& run, std::size_t seed) {
  ModelConfig config;
  config.depth = 3;
  config.base_channels = 2;
  config.image_size = 8;
  config.cph_stages = {2, 3};
  config.instance_norm = seed % 5 != 4;
  config.init_seed = seed + 1;
  ModelParams params = ModelParams::init(config);
  std::mt19937_64 rng(seed * 32452843 + 7);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  // Nonzero biases and uneven edge weights so every path carries signal.
  for (const auto& e : params.entries()) {
    if (e.value.rank() != 1) continue;
    Tensor t = e.value;
    for (double& v : t.mutable_data()) v = e.name.ends_with("edge_weight") ? 0.5 + 5 * u(rng) : u(rng);
  }
  Tensor x = uniform({3, 4, 8, 8}, rng, 0.0, 1.0);
  Tensor target = mask({3, 3, 8, 8}, rng, 0.4);
  for (const auto& entry : params.entries()) {
    auto f = [&](const Tensor& value) {
      ModelParams q = params;
      q.replace(entry.name, value);
      ForwardInfo info;
      return intra_loss(forward(x, q, &info), target, TverskyParams{}, 0.75);
    };
    run.check("chsnet", entry.name, seed, f, entry.value);
  }
}

}  // namespace

bool GradCheckSuiteResult::passed() const {
  return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.report.passed; });
}

std::vector<std::string> GradCheckSuiteResult::components() const {
  std::vector<std::string> out;
  for (const auto& c : cases)
    if (std::find(out.begin(), out.end(), c.component) == out.end()) out.push_back(c.component);
  return out;
}

double GradCheckSuiteResult::max_error(const std::string& component) const {
  double worst = 0.0;
  for (const auto& c : cases)
    if (c.component == component) worst = std::max(worst, c.report.max_relative_error);
  return worst;
}

std::size_t GradCheckSuiteResult::seeds(const std::string& component) const {
  std::vector<std::size_t> seen;
  for (const auto& c : cases)
    if (c.component == component && std::find(seen.begin(), seen.end(), c.seed) == seen.end()) seen.push_back(c.seed);
  return seen.size();
}

GradCheckSuiteResult run_gradcheck_suite(const GradCheckSuiteOptions& options,
                                         const std::function<void(const GradCheckCase&)>& on_case) {
  Runner run(options, on_case);
  for (std::size_t seed = 0; seed < options.seeds; ++seed) {
    check_losses(run, seed);
    check_tac(run, seed);
    check_hgnn_layer(run, seed);
    check_network(run, seed);
  }
  return run.result;
}

}  // namespace rehydil
