#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "rehydil/gradcheck.hpp"
#include "rehydil/losses.hpp"
#include "rehydil/ops.hpp"
#include "test_util.hpp"

using namespace rehydil;
using namespace rehydil::testing;

namespace {

const TverskyParams kExact{0.7, 1.5, 0.0};

// Independent soft Dice: 2<g,u> / (|g| + |u|).
double soft_dice(const std::vector<double>& g, const std::vector<double>& u) {
  double inter = 0.0, sg = 0.0, su = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    inter += g[i] * u[i];
    sg += g[i];
    su += u[i];
  }
  return 2.0 * inter / (sg + su);
}

PredictionEntry entry(std::vector<double> probs, std::size_t classes, std::size_t patient, int modality) {
  const std::size_t pixels = probs.size() / classes;
  return PredictionEntry{Tensor({classes, 1, pixels}, std::move(probs)), patient, modality,
                         PredictionSource::CurrentStage};
}

}  // namespace

TEST(TverskyTest, PerfectOverlapIsOne) {
  Tensor g({6}, {1, 0, 1, 1, 0, 0});
  EXPECT_DOUBLE_EQ(tversky_similarity(g, g, TverskyParams{}).item(), 1.0);
}

TEST(TverskyTest, DisjointMasksAreNearZero) {
  Tensor g({4}, {1, 1, 0, 0});
  Tensor u({4}, {0, 0, 1, 0});
  TverskyParams p{0.7, 1.5, 1e-6};
  EXPECT_NEAR(tversky_similarity(g, u, p).item(), 1e-6 / (0.7 * 2 + 1.5 * 1 + 1e-6), 1e-18);
}

TEST(TverskyTest, HandEvaluatedExample) {
  Tensor g({4}, {1, 1, 0, 0});
  Tensor u({4}, {1, 0, 1, 0});
  EXPECT_NEAR(tversky_similarity(g, u, kExact).item(), 0.3125, 1e-15);
}

TEST(TverskyTest, NotSymmetricWhenPenaltiesDiffer) {
  Tensor g({4}, {1, 1, 1, 0});
  Tensor u({4}, {1, 0, 0, 0});
  EXPECT_NE(tversky_similarity(g, u, kExact).item(), tversky_similarity(u, g, kExact).item());
  TverskyParams sym{0.6, 0.6, 0.0};
  EXPECT_DOUBLE_EQ(tversky_similarity(g, u, sym).item(), tversky_similarity(u, g, sym).item());
}

TEST(TverskyTest, InputErrors) {
  EXPECT_THROW(tversky_similarity(Tensor::ones({3}), Tensor::ones({4}), kExact), ShapeError);
  EXPECT_THROW(tversky_similarity(Tensor({2}, {0.5, 1.2}), Tensor::ones({2}), kExact), DomainError);
  EXPECT_THROW(tversky_similarity(Tensor({2}, {-0.1, 1.0}), Tensor::ones({2}), kExact), DomainError);
}

TEST(TverskyTest, HalfHalfIsSoftDiceAndRangeHolds) {
  std::mt19937_64 rng(31);
  for (int i = 0; i < 100; ++i) {
    Tensor g = random_tensor({64}, rng, 0.0, 1.0);
    Tensor u = random_mask({64}, rng, 0.3);
    const double s = tversky_similarity(g, u, TverskyParams{0.5, 0.5, 0.0}).item();
    EXPECT_NEAR(s, soft_dice(to_vector(g), to_vector(u)), 1e-12);
    const double t = tversky_similarity(g, u, TverskyParams{}).item();
    EXPECT_GE(t, 0.0);
    EXPECT_LE(t, 1.0);
  }
}

TEST(TverskyTest, IncreasingBetaDecreasesSimilarityWithFalseNegatives) {
  std::mt19937_64 rng(41);
  for (int i = 0; i < 100; ++i) {
    Tensor g = random_tensor({32}, rng, 0.0, 1.0);
    Tensor u = random_mask({32}, rng, 0.4);
    double fn = 0.0;
    for (std::size_t k = 0; k < 32; ++k) fn += (1.0 - g.at(k)) * u.at(k);
    if (fn <= 0.0) continue;
    double prev = tversky_similarity(g, u, TverskyParams{0.7, 0.5, 1e-6}).item();
    for (double beta : {0.9, 1.3, 1.5, 1.6, 2.5}) {
      const double s = tversky_similarity(g, u, TverskyParams{0.7, beta, 1e-6}).item();
      EXPECT_LT(s, prev);
      prev = s;
    }
  }
}

TEST(TverskyTest, MatrixAgreesWithPairwiseCalls) {
  std::mt19937_64 rng(5);
  Tensor g = random_tensor({3, 10}, rng, 0.0, 1.0);
  Tensor u = random_tensor({4, 10}, rng, 0.0, 1.0);
  TverskyParams p;
  Tensor m = tversky_similarity_matrix(g, u, p);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double s = tversky_similarity(index_select(g, 0, {i}), index_select(u, 0, {j}), p).item();
      EXPECT_NEAR(m.at(i * 4 + j), s, 1e-14);
    }
}

TEST(IntraLossTest, PerfectAndDisjointPredictions) {
  std::mt19937_64 rng(2);
  Tensor target = random_mask({3, 4, 4}, rng, 0.5);
  TverskyParams p;
  EXPECT_NEAR(tversky_dice_loss(target, target, p).item(), 0.0, 1e-12);
  EXPECT_NEAR(focal_tversky_loss(target, target, p, 1.2).item(), 0.0, 1e-9);
  EXPECT_NEAR(intra_loss(target, target, p, 1.2).item(), 0.0, 1e-9);
  Tensor inverse = 1.0 - target;
  EXPECT_NEAR(tversky_dice_loss(inverse, target, TverskyParams{0.7, 1.5, 1e-12}).item(), 1.0, 1e-9);
}

TEST(IntraLossTest, SingleClassHandValues) {
  Tensor pred({1, 2, 2}, {1, 1, 0, 0});
  Tensor target({1, 2, 2}, {1, 0, 1, 0});
  EXPECT_NEAR(tversky_dice_loss(pred, target, kExact).item(), 0.6875, 1e-15);
  EXPECT_NEAR(focal_tversky_loss(pred, target, kExact, 1.2).item(), 0.6378627530887165, 1e-14);
  EXPECT_NEAR(intra_loss(pred, target, kExact, 1.2).item(), 1.3253627530887164, 1e-14);
}

TEST(IntraLossTest, GammaOneReducesToDice) {
  std::mt19937_64 rng(17);
  Tensor pred = random_tensor({2, 3, 4, 4}, rng, 0.0, 1.0);
  Tensor target = random_mask({2, 3, 4, 4}, rng);
  TverskyParams p;
  const double dt = tversky_dice_loss(pred, target, p).item();
  EXPECT_NEAR(focal_tversky_loss(pred, target, p, 1.0).item(), dt, 1e-15);
  EXPECT_NEAR(intra_loss(pred, target, p, 1.0).item(), 2.0 * dt, 1e-15);
}

TEST(IntraLossTest, FocalBoundedByDiceAndUnitInterval) {
  std::mt19937_64 rng(23);
  for (int i = 0; i < 50; ++i) {
    Tensor pred = random_tensor({3, 4, 4}, rng, 0.0, 1.0);
    Tensor target = random_mask({3, 4, 4}, rng);
    const double dt = tversky_dice_loss(pred, target, TverskyParams{}).item();
    const double ft = focal_tversky_loss(pred, target, TverskyParams{}, 1.2).item();
    EXPECT_GE(dt, 0.0);
    EXPECT_LE(dt, 1.0);
    EXPECT_GE(ft, 0.0);
    EXPECT_LE(ft, dt + 1e-15);
  }
}

TEST(IntraLossTest, Errors) {
  EXPECT_THROW(tversky_dice_loss(Tensor::ones({3, 4, 4}), Tensor::ones({2, 4, 4}), TverskyParams{}), ShapeError);
  EXPECT_THROW(focal_tversky_loss(Tensor::ones({1, 2, 2}), Tensor::ones({1, 2, 2}), TverskyParams{}, 0.0), DomainError);
}

TEST(IntraLossTest, PerSampleLossesAverageToBatchLoss) {
  std::mt19937_64 rng(29);
  Tensor pred = random_tensor({4, 3, 4, 4}, rng, 0.0, 1.0);
  Tensor target = random_mask({4, 3, 4, 4}, rng);
  Tensor per = per_sample_intra_loss(pred, target, TverskyParams{}, 1.2);
  ASSERT_EQ(per.shape(), (Shape{4}));
  double avg = 0.0;
  for (double v : per.data()) avg += v / 4.0;
  EXPECT_NEAR(avg, intra_loss(pred, target, TverskyParams{}, 1.2).item(), 1e-15);
}

TEST(IntraLossTest, GradientsMatchFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(static_cast<unsigned>(seed));
    Tensor target = random_mask({2, 4, 4}, rng);
    Tensor pred = random_tensor({2, 4, 4}, rng, 0.05, 0.95);
    TverskyParams p;
    auto dt = finite_difference_check([&](const Tensor& x) { return tversky_dice_loss(x, target, p); }, pred);
    auto ft = finite_difference_check([&](const Tensor& x) { return focal_tversky_loss(x, target, p, 1.2); }, pred);
    EXPECT_TRUE(dt.passed) << dt.max_relative_error;
    EXPECT_TRUE(ft.passed) << ft.max_relative_error;
    // 8-pixel masks, the minimal case.
    Tensor t8 = random_mask({1, 2, 4}, rng);
    auto small = finite_difference_check([&](const Tensor& x) { return tversky_dice_loss(x, t8, p); },
                                         random_tensor({1, 2, 4}, rng, 0.05, 0.95));
    EXPECT_TRUE(small.passed) << small.max_relative_error;
  }
}

TEST(TacLossTest, OnePositiveOneNegativeScalarOracle) {
  // Anchor class maps [1,0] / [0,1]; the other queue repeats them, so every
  // anchor sees S+ = 1 and S- = 0 (eps = 0).
  TacConfig cfg{kExact, 1.0, SimilarityKind::Tversky};
  std::vector<PredictionEntry> anchors = {entry({1, 0, 0, 1}, 2, 0, 0)};
  std::vector<PredictionEntry> others = {entry({1, 0, 0, 1}, 2, 1, 1)};
  TacResult r = tac_loss_directional(anchors, others, cfg);
  EXPECT_EQ(r.terms, 2u);
  EXPECT_FALSE(r.degenerate);
  EXPECT_NEAR(r.loss.item(), 0.3132616875182228, 1e-14);
}

TEST(TacLossTest, EqualSimilaritiesGiveLogTwo) {
  TacConfig cfg{kExact, 1.0, SimilarityKind::Tversky};
  // Both anchor classes are [1,0] and both other classes [0.5,0.5]: S+ == S-.
  std::vector<PredictionEntry> others = {entry({0.5, 0.5, 0.5, 0.5}, 2, 1, 1)};
  TacResult r = tac_loss_directional({entry({1, 0, 1, 0}, 2, 0, 0)}, others, cfg);
  EXPECT_NEAR(r.loss.item(), 0.6931471805599453, 1e-14);
}

TEST(TacLossTest, NoNegativesGivesZero) {
  TacConfig cfg{TverskyParams{}, 1.0, SimilarityKind::Tversky};
  TacResult r = tac_loss_directional({entry({0.2, 0.9}, 1, 0, 0)}, {entry({0.7, 0.1}, 1, 1, 1)}, cfg);
  EXPECT_EQ(r.terms, 1u);
  EXPECT_NEAR(r.loss.item(), 0.0, 1e-15);
}

TEST(TacLossTest, SamePatientOrModalityIsNotAPair) {
  TacConfig cfg{TverskyParams{}, 1.0, SimilarityKind::Tversky};
  TacResult same_patient = tac_loss({entry({0.2, 0.9, 0.4, 0.4}, 2, 3, 0)}, {entry({0.7, 0.1, 0.3, 0.3}, 2, 3, 1)}, cfg);
  EXPECT_TRUE(same_patient.degenerate);
  EXPECT_EQ(same_patient.loss.item(), 0.0);
  TacResult same_modality = tac_loss({entry({0.2, 0.9, 0.4, 0.4}, 2, 3, 1)}, {entry({0.7, 0.1, 0.3, 0.3}, 2, 4, 1)}, cfg);
  EXPECT_TRUE(same_modality.degenerate);
}

TEST(TacLossTest, InvariantToNegativeOrderAndAnchorDuplication) {
  std::mt19937_64 rng(99);
  auto rand_entry = [&](std::size_t patient, int modality) {
    return PredictionEntry{random_tensor({3, 2, 2}, rng, 0.0, 1.0), patient, modality, PredictionSource::CurrentStage};
  };
  std::vector<PredictionEntry> anchors = {rand_entry(0, 0), rand_entry(1, 0)};
  std::vector<PredictionEntry> others = {rand_entry(2, 1), rand_entry(3, 1), rand_entry(4, 1)};
  TacConfig cfg;
  const double base = tac_loss_directional(anchors, others, cfg).loss.item();
  std::vector<PredictionEntry> reversed(others.rbegin(), others.rend());
  EXPECT_NEAR(tac_loss_directional(anchors, reversed, cfg).loss.item(), base, 1e-14);
  std::vector<PredictionEntry> doubled = anchors;
  doubled.insert(doubled.end(), anchors.begin(), anchors.end());
  EXPECT_NEAR(tac_loss_directional(doubled, others, cfg).loss.item(), base, 1e-14);
}

TEST(TacLossTest, GradientsFlowOnlyIntoTrackedQueue) {
  std::mt19937_64 rng(7);
  Tensor tracked = random_tensor({3, 2, 2}, rng, 0.05, 0.95, true);
  Tensor frozen = random_tensor({3, 2, 2}, rng, 0.05, 0.95);
  TacResult r = tac_loss({PredictionEntry{frozen, 0, 0, PredictionSource::PreviousStage}},
                         {PredictionEntry{tracked, 1, 1, PredictionSource::CurrentStage}}, TacConfig{});
  r.loss.backward();
  EXPECT_TRUE(tracked.has_grad());
  EXPECT_FALSE(frozen.requires_grad());
  EXPECT_FALSE(frozen.has_grad());
}

TEST(TacLossTest, GradientsMatchFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(static_cast<unsigned>(seed) + 100);
    std::vector<PredictionEntry> replay = {
        PredictionEntry{random_tensor({3, 4, 4}, rng, 0.05, 0.95), 0, 0, PredictionSource::PreviousStage},
        PredictionEntry{random_tensor({3, 4, 4}, rng, 0.05, 0.95), 1, 1, PredictionSource::PreviousStage}};
    Tensor current = random_tensor({2, 3, 4, 4}, rng, 0.05, 0.95);
    for (SimilarityKind kind : {SimilarityKind::Tversky, SimilarityKind::Cosine}) {
      TacConfig cfg{TverskyParams{}, 1.0, kind};
      auto f = [&](const Tensor& x) {
        std::vector<PredictionEntry> cur = {
            PredictionEntry{reshape(index_select(x, 0, {0}), {3, 4, 4}), 2, 2, PredictionSource::CurrentStage},
            PredictionEntry{reshape(index_select(x, 0, {1}), {3, 4, 4}), 0, 2, PredictionSource::CurrentStage}};
        return tac_loss(replay, cur, cfg).loss;
      };
      auto report = finite_difference_check(f, current);
      EXPECT_TRUE(report.passed) << to_string(kind) << " " << report.max_relative_error;
    }
  }
}

TEST(TotalLossTest, OmegaWeighting) {
  Tensor tac = Tensor::scalar(0.3), intra = Tensor::scalar(1.3);
  EXPECT_EQ(total_loss(tac, intra, 0.0).item(), 1.3);
  EXPECT_NEAR(total_loss(tac, intra, 1.0).item(), 1.6, 1e-15);
  EXPECT_EQ(total_loss(Tensor::scalar(0.0), Tensor::scalar(0.0), 1.0).item(), 0.0);
}
