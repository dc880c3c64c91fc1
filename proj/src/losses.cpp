#include "rehydil/losses.hpp"

#include <cmath>
#include <optional>

#include "rehydil/ops.hpp"

namespace rehydil {

namespace {

void require_unit_interval(const char* op, const Tensor& t) {
  for (double v : t.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError(op, "value " + std::to_string(v) + " outside [0, 1]");
  }
}

Tensor tversky_from_moments(const Tensor& overlap, const Tensor& g_mass, const Tensor& u_mass,
                            const TverskyParams& p) {
  // <g,1-u> = |g| - <g,u>, <1-g,u> = |u| - <g,u>
  Tensor fp = g_mass - overlap;
  Tensor fn = u_mass - overlap;
  Tensor num = overlap + p.epsilon;
  Tensor den = overlap + fp * p.alpha + fn * p.beta + p.epsilon;
  return num / den;
}

// Flattens C x H x W or B x C x H x W into (B*C) x P rows and reports B and C.
Tensor as_class_rows(const char* op, const Tensor& t, std::size_t& batch, std::size_t& classes) {
  if (t.rank() == 3) {
    batch = 1;
    classes = t.dim(0);
    return reshape(t, {classes, t.dim(1) * t.dim(2)});
  }
  if (t.rank() == 4) {
    batch = t.dim(0);
    classes = t.dim(1);
    return reshape(t, {batch * classes, t.dim(2) * t.dim(3)});
  }
  throw ShapeError(op, "expected C x H x W or B x C x H x W, got " + shape_to_string(t.shape()));
}

// B x C matrix of per-class similarities between predictions and targets.
Tensor class_similarities(const char* op, const Tensor& pred, const Tensor& target, const TverskyParams& params) {
  if (pred.shape() != target.shape()) throw ShapeError(op, pred.shape(), target.shape());
  params.validate();
  std::size_t batch = 0, classes = 0;
  Tensor g = as_class_rows(op, pred, batch, classes);
  Tensor u = as_class_rows(op, target, batch, classes);
  return reshape(tversky_similarity_rows(g, u, params), {batch, classes});
}

// Per-sample components (length B) of the Dice-style and focal terms.
Tensor per_sample_dice(const Tensor& s) { return 1.0 - mean(s, 1); }

Tensor per_sample_focal(const Tensor& s, double gamma) {
  if (!(gamma > 0.0)) throw DomainError("focal_tversky_loss", "gamma must be positive");
  return mean(pow(clamp(1.0 - s, 0.0, 1.0), gamma), 1);
}

struct TacSum {
  std::optional<Tensor> sum;
  std::size_t terms = 0;
};

Tensor stack_class_rows(const std::vector<PredictionEntry>& entries, std::size_t& classes, std::size_t& pixels) {
  std::vector<Tensor> rows;
  rows.reserve(entries.size());
  for (const auto& e : entries) {
    if (e.probs.rank() != 3) throw ShapeError("tac_loss", "entries must be C x H x W, got " + shape_to_string(e.probs.shape()));
    if (rows.empty()) {
      classes = e.probs.dim(0);
      pixels = e.probs.dim(1) * e.probs.dim(2);
    } else if (e.probs.dim(0) != classes || e.probs.dim(1) * e.probs.dim(2) != pixels) {
      throw ShapeError("tac_loss", entries.front().probs.shape(), e.probs.shape());
    }
    rows.push_back(reshape(e.probs, {classes, pixels}));
  }
  return rows.size() == 1 ? rows.front() : concat(rows, 0);
}

TacSum tac_terms(const std::vector<PredictionEntry>& anchors, const std::vector<PredictionEntry>& others,
                 const TacConfig& config) {
  if (!(config.tau > 0.0)) throw DomainError("tac_loss", "temperature must be positive");
  TacSum result;
  if (anchors.empty() || others.empty()) return result;
  std::size_t classes = 0, pixels = 0, classes_o = 0, pixels_o = 0;
  Tensor g = stack_class_rows(anchors, classes, pixels);
  Tensor u = stack_class_rows(others, classes_o, pixels_o);
  if (classes != classes_o || pixels != pixels_o) throw ShapeError("tac_loss", g.shape(), u.shape());

  const std::size_t rows = anchors.size() * classes, cols = others.size() * classes;
  std::vector<double> neg_mask(rows * cols, 0.0);
  std::vector<std::size_t> pos_flat, pos_row;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    for (std::size_t o = 0; o < others.size(); ++o) {
      if (anchors[a].patient == others[o].patient || anchors[a].modality == others[o].modality) continue;
      for (std::size_t c = 0; c < classes; ++c) {
        const std::size_t r = a * classes + c;
        for (std::size_t z = 0; z < classes; ++z) {
          const std::size_t col = o * classes + z;
          if (z == c) {
            pos_flat.push_back(r * cols + col);
            pos_row.push_back(r);
          } else {
            neg_mask[r * cols + col] = 1.0;
          }
        }
      }
    }
  }
  if (pos_flat.empty()) return result;

  Tensor sim = config.similarity == SimilarityKind::Tversky ? tversky_similarity_matrix(g, u, config.tversky)
                                                            : cosine_similarity_matrix(g, u);
  Tensor logits = sim * (1.0 / config.tau);
  Tensor e = exp(logits);
  Tensor neg_sum = sum(e * Tensor({rows, cols}, std::move(neg_mask)), 1);
  Tensor denom = gather(e, pos_flat) + gather(neg_sum, pos_row);
  Tensor terms = log(denom) - gather(logits, pos_flat);
  result.sum = sum(terms);
  result.terms = pos_flat.size();
  return result;
}

TacResult finish(std::vector<TacSum> parts) {
  TacResult out;
  std::optional<Tensor> total;
  for (auto& p : parts) {
    if (!p.sum) continue;
    total = total ? *total + *p.sum : *p.sum;
    out.terms += p.terms;
  }
  if (!total) {
    out.loss = Tensor::scalar(0.0);
    out.degenerate = true;
    return out;
  }
  out.loss = *total * (1.0 / static_cast<double>(out.terms));
  return out;
}

}  // namespace

void TverskyParams::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw std::invalid_argument("Tversky alpha and beta must be non-negative");
  if (!(epsilon >= 0.0)) throw std::invalid_argument("Tversky epsilon must be non-negative");
}

std::string to_string(SimilarityKind kind) { return kind == SimilarityKind::Tversky ? "tversky" : "cosine"; }

SimilarityKind similarity_from_string(const std::string& name) {
  if (name == "tversky") return SimilarityKind::Tversky;
  if (name == "cosine") return SimilarityKind::Cosine;
  throw std::invalid_argument("unknown similarity '" + name + "' (expected tversky or cosine)");
}

Tensor tversky_similarity(const Tensor& g, const Tensor& u, const TverskyParams& params) {
  if (g.numel() != u.numel()) throw ShapeError("tversky_similarity", g.shape(), u.shape());
  const std::size_t n = g.numel();
  return tversky_similarity_rows(reshape(g, {1, n}), reshape(u, {1, n}), params);
}

Tensor tversky_similarity_rows(const Tensor& g, const Tensor& u, const TverskyParams& params) {
  if (g.rank() != 2 || g.shape() != u.shape()) throw ShapeError("tversky_similarity", g.shape(), u.shape());
  params.validate();
  require_unit_interval("tversky_similarity", g);
  require_unit_interval("tversky_similarity", u);
  return tversky_from_moments(sum(g * u, 1), sum(g, 1), sum(u, 1), params);
}

Tensor tversky_similarity_matrix(const Tensor& g, const Tensor& u, const TverskyParams& params) {
  if (g.rank() != 2 || u.rank() != 2 || g.dim(1) != u.dim(1)) {
    throw ShapeError("tversky_similarity_matrix", g.shape(), u.shape());
  }
  params.validate();
  require_unit_interval("tversky_similarity_matrix", g);
  require_unit_interval("tversky_similarity_matrix", u);
  const std::size_t a = g.dim(0), b = u.dim(0);
  Tensor overlap = matmul(g, transpose(u));
  Tensor g_mass = matmul(reshape(sum(g, 1), {a, 1}), Tensor::ones({1, b}));
  Tensor u_mass = matmul(Tensor::ones({a, 1}), reshape(sum(u, 1), {1, b}));
  return tversky_from_moments(overlap, g_mass, u_mass, params);
}

Tensor cosine_similarity_matrix(const Tensor& g, const Tensor& u, double epsilon) {
  if (g.rank() != 2 || u.rank() != 2 || g.dim(1) != u.dim(1)) {
    throw ShapeError("cosine_similarity_matrix", g.shape(), u.shape());
  }
  const std::size_t a = g.dim(0), b = u.dim(0);
  Tensor dots = matmul(g, transpose(u));
  Tensor g_norm = pow(sum(g * g, 1) + epsilon, 0.5);
  Tensor u_norm = pow(sum(u * u, 1) + epsilon, 0.5);
  Tensor norms = matmul(reshape(g_norm, {a, 1}), reshape(u_norm, {1, b}));
  return dots / norms;
}

Tensor tversky_dice_loss(const Tensor& pred, const Tensor& target, const TverskyParams& params) {
  return mean(per_sample_dice(class_similarities("tversky_dice_loss", pred, target, params)));
}

Tensor focal_tversky_loss(const Tensor& pred, const Tensor& target, const TverskyParams& params, double gamma) {
  return mean(per_sample_focal(class_similarities("focal_tversky_loss", pred, target, params), gamma));
}

Tensor intra_loss(const Tensor& pred, const Tensor& target, const TverskyParams& params, double gamma) {
  return mean(per_sample_intra_loss(pred.rank() == 3 ? reshape(pred, {1, pred.dim(0), pred.dim(1), pred.dim(2)}) : pred,
                                    target.rank() == 3
                                        ? reshape(target, {1, target.dim(0), target.dim(1), target.dim(2)})
                                        : target,
                                    params, gamma));
}

Tensor per_sample_intra_loss(const Tensor& pred, const Tensor& target, const TverskyParams& params, double gamma) {
  Tensor s = class_similarities("intra_loss", pred, target, params);
  return per_sample_dice(s) + per_sample_focal(s, gamma);
}

TacResult tac_loss_directional(const std::vector<PredictionEntry>& anchors, const std::vector<PredictionEntry>& others,
                               const TacConfig& config) {
  std::vector<TacSum> parts;
  parts.push_back(tac_terms(anchors, others, config));
  return finish(std::move(parts));
}

TacResult tac_loss(const std::vector<PredictionEntry>& replay_queue, const std::vector<PredictionEntry>& current_queue,
                   const TacConfig& config) {
  std::vector<TacSum> parts;
  parts.push_back(tac_terms(replay_queue, current_queue, config));
  parts.push_back(tac_terms(current_queue, replay_queue, config));
  return finish(std::move(parts));
}

Tensor total_loss(const Tensor& tac, const Tensor& intra, double omega) {
  if (!(omega >= 0.0)) throw DomainError("total_loss", "omega must be non-negative");
  if (omega == 0.0) return intra;
  return tac * omega + intra;
}

}  // namespace rehydil
