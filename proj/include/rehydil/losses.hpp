#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "rehydil/tensor.hpp"

namespace rehydil {

/// Penalty weights of the Tversky index: alpha weighs false positives
/// <g, 1-u>, beta weighs false negatives <1-g, u>. epsilon smooths both the
/// numerator and the denominator so two empty masks have similarity 1.
struct TverskyParams {
  double alpha = 0.7;
  double beta = 1.5;
  double epsilon = 1e-6;

  void validate() const;
};

enum class SimilarityKind { Tversky, Cosine };

std::string to_string(SimilarityKind kind);
SimilarityKind similarity_from_string(const std::string& name);

/// Soft Tversky index over all elements:
///   (<g,u> + eps) / (<g,u> + alpha <g,1-u> + beta <1-g,u> + eps).
/// Not symmetric unless alpha == beta. Inputs must lie in [0, 1].
Tensor tversky_similarity(const Tensor& g, const Tensor& u, const TverskyParams& params);

/// Row-wise index for two R x P matrices -> length-R vector.
Tensor tversky_similarity_rows(const Tensor& g, const Tensor& u, const TverskyParams& params);

/// All-pairs index: rows of `g` (A x P) against rows of `u` (B x P) -> A x B.
Tensor tversky_similarity_matrix(const Tensor& g, const Tensor& u, const TverskyParams& params);

/// All-pairs cosine similarity, the ablation alternative to the Tversky kernel.
Tensor cosine_similarity_matrix(const Tensor& g, const Tensor& u, double epsilon = 1e-12);

/// Tversky-Dice loss 1 - mean_c S(pred_c, target_c). Accepts C x H x W or
/// B x C x H x W; batched input is averaged over samples.
Tensor tversky_dice_loss(const Tensor& pred, const Tensor& target, const TverskyParams& params);

/// Focal-Tversky loss mean_c (1 - S_c)^gamma.
Tensor focal_tversky_loss(const Tensor& pred, const Tensor& target, const TverskyParams& params, double gamma);

/// L_DT + L_FT.
Tensor intra_loss(const Tensor& pred, const Tensor& target, const TverskyParams& params, double gamma);

/// Per-sample L_DT + L_FT for B x C x H x W input -> length-B vector.
Tensor per_sample_intra_loss(const Tensor& pred, const Tensor& target, const TverskyParams& params, double gamma);

enum class PredictionSource { PreviousStage, CurrentStage };

/// One queued prediction: class-probability maps (C x H x W) with the patient
/// and modality that produced them.
struct PredictionEntry {
  Tensor probs;
  std::size_t patient = 0;
  int modality = 0;
  PredictionSource source = PredictionSource::CurrentStage;
};

struct TacConfig {
  TverskyParams tversky;
  double tau = 1.0;
  SimilarityKind similarity = SimilarityKind::Tversky;
};

struct TacResult {
  Tensor loss;              // scalar
  std::size_t terms = 0;    // (anchor, positive) pairs contributing
  bool degenerate = false;  // no anchor had a valid positive
};

/// Contrastive terms with anchors drawn from `anchors` and positives /
/// negatives from `others`. For anchor class map Y_p^c, each Y_q^c in
/// `others` with a different patient and modality is a positive; the negatives
/// are all Y_q^z with q != p (different modality) and z != c. Each
/// (anchor, positive) pair contributes
///   -log(exp(s+/tau) / (exp(s+/tau) + sum_neg exp(s-/tau)))
/// and the result is the mean over pairs.
TacResult tac_loss_directional(const std::vector<PredictionEntry>& anchors, const std::vector<PredictionEntry>& others,
                               const TacConfig& config);

/// Bank-level loss: anchors from both queues, each contrasted with the other
/// queue; mean over all pairs. Zero with `degenerate` set when no anchor has
/// a positive.
TacResult tac_loss(const std::vector<PredictionEntry>& replay_queue, const std::vector<PredictionEntry>& current_queue,
                   const TacConfig& config);

/// omega * tac + intra.
Tensor total_loss(const Tensor& tac, const Tensor& intra, double omega);

}  // namespace rehydil
