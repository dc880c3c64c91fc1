#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "rehydil/eval.hpp"
#include "rehydil/ops.hpp"

using namespace rehydil;
namespace fs = std::filesystem;

namespace {

class EvalTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fs::temp_directory_path() / ("rehydil_eval_" + std::to_string(::getpid())));
    fs::remove_all(*root_);
    DatasetSpec s;
    s.seed = 9;
    s.num_patients = 20;
    s.slices_per_patient = 3;
    s.image_size = 16;
    s.network_depth = 3;
    generate_dataset(s, *root_);
    data_ = new Dataset(Dataset::open(*root_));
    store_ = new SampleStore(*data_);
  }
  static void TearDownTestSuite() {
    delete store_;
    delete data_;
    fs::remove_all(*root_);
    delete root_;
  }
  static ModelConfig model(std::set<std::size_t> cph) {
    ModelConfig c;
    c.depth = 3;
    c.base_channels = 2;
    c.image_size = 16;
    c.cph_stages = std::move(cph);
    c.init_seed = 3;
    return c;
  }
  static fs::path* root_;
  static Dataset* data_;
  static SampleStore* store_;
};

fs::path* EvalTest::root_ = nullptr;
Dataset* EvalTest::data_ = nullptr;
SampleStore* EvalTest::store_ = nullptr;

}  // namespace

TEST(Dsc, WorkedExamplesAndSymmetry) {
  EXPECT_DOUBLE_EQ(dsc({1, 1, 0, 0}, {1, 0, 1, 0}), 0.5);
  EXPECT_DOUBLE_EQ(dsc({0, 0, 0}, {0, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(dsc({1, 0, 0}, {0, 0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(dsc({1, 1, 1}, {1, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(dsc_from_counts(3, 5, 2), 0.5);
  EXPECT_DOUBLE_EQ(dsc_from_counts(4, 6, 3), 0.6);
  std::mt19937_64 rng(4);
  std::bernoulli_distribution coin(0.4);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::uint8_t> a(37), b(37);
    for (auto& v : a) v = coin(rng);
    for (auto& v : b) v = coin(rng);
    const double d = dsc(a, b);
    EXPECT_EQ(d, dsc(b, a));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
  EXPECT_THROW(dsc({1, 0}, {1}), ShapeError);
  EXPECT_THROW(dsc({2}, {1}), DomainError);
  EXPECT_THROW(dsc_from_counts(1, 5, 2), std::invalid_argument);
}

TEST(PairedTTest, MatchesReferenceValues) {
  // Reference values from an independent statistics package.
  TTestResult r = paired_t_test({0.1, -0.2, 0.3, 0.05, 0.15}, {0, 0, 0, 0, 0});
  EXPECT_NEAR(r.t, 0.9810229431759453, 1e-9);
  EXPECT_NEAR(r.p, 0.38212578999575153, 1e-6);
  EXPECT_EQ(r.df, 4u);
  EXPECT_FALSE(r.degenerate);
  r = paired_t_test({0.9, 0.8, 0.85, 0.7}, {0.6, 0.75, 0.5, 0.65});
  EXPECT_NEAR(r.t, 2.342606428329091, 1e-9);
  EXPECT_NEAR(r.p, 0.10098201384666447, 1e-6);
  const TTestResult flipped = paired_t_test({0.6, 0.75, 0.5, 0.65}, {0.9, 0.8, 0.85, 0.7});
  EXPECT_DOUBLE_EQ(flipped.t, -r.t);
  EXPECT_DOUBLE_EQ(flipped.p, r.p);
}

TEST(PairedTTest, DegenerateAndInvalidInput) {
  TTestResult same = paired_t_test({0.3, 0.4}, {0.3, 0.4});
  EXPECT_TRUE(same.degenerate);
  EXPECT_EQ(same.t, 0.0);
  EXPECT_EQ(same.p, 1.0);
  TTestResult shifted = paired_t_test({0.5, 0.75, 1.0}, {0.25, 0.5, 0.75});
  EXPECT_TRUE(shifted.degenerate);
  EXPECT_TRUE(std::isinf(shifted.t) && shifted.t > 0);
  EXPECT_EQ(shifted.p, 0.0);
  TTestResult unit = paired_t_test({2, 3, 4, 5}, {1, 2, 3, 4});
  EXPECT_TRUE(unit.degenerate);
  EXPECT_TRUE(std::isinf(unit.t) && unit.t > 0);
  EXPECT_THROW(paired_t_test({0.1}, {0.2}), std::invalid_argument);
  EXPECT_THROW(paired_t_test({0.1, 0.2}, {0.2}), std::invalid_argument);
}

TEST(Forgetting, BestLaterScoreMinusFinal) {
  ForgettingReport r;
  r.order = {Modality::T1, Modality::T2, Modality::Flair};
  r.dsc = {{{0.8, 0.6, 0.4}},
           {{0.7, 0.65, 0.1}, {0.9, 0.9, 0.9}},
           {{0.5, 0.5, 0.2}, {0.95, 0.8, 0.9}, {0.7, 0.7, 0.7}}};
  const auto f0 = r.forgetting(0);
  EXPECT_NEAR(f0[0], 0.3, 1e-12);
  EXPECT_NEAR(f0[1], 0.15, 1e-12);
  EXPECT_NEAR(f0[2], 0.2, 1e-12);
  const auto f1 = r.forgetting(1);
  EXPECT_NEAR(f1[0], 0.0, 1e-12);
  EXPECT_NEAR(f1[1], 0.1, 1e-12);
  EXPECT_EQ(r.forgetting(2), (std::array<double, 3>{0, 0, 0}));
  EXPECT_THROW(r.forgetting(3), std::out_of_range);
  std::ostringstream out;
  r.write_csv(out);
  const std::string text = out.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "after_stage,modality,WT,TC,ET");
  EXPECT_NE(text.find("\n2,T2,0.90000000000000002,"), std::string::npos);
  EXPECT_NE(text.find("\nforgetting,T1,"), std::string::npos);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1 + 6 + 3);
}

TEST_F(EvalTest, ReportCardinalityAndDeterminism) {
  ModelParams p = ModelParams::init(model({2, 3}));
  const auto subsets = ModalitySubset::nonempty();
  ASSERT_EQ(subsets.size(), 15u);
  DscReport a = evaluate_subsets(p, *store_, subsets, 0.5, 4);
  DscReport b = evaluate_subsets(p, *store_, subsets, 0.5, 4);
  const std::size_t patients = data_->patient_ids(Split::Test).size();
  ASSERT_GT(patients, 0u);
  EXPECT_EQ(a.entries.size(), 15 * 3 * patients);
  std::ostringstream sa, sb;
  a.write_entries_csv(sa);
  b.write_entries_csv(sb);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(a.subsets(), subsets);
  for (const auto& e : a.entries) {
    EXPECT_GE(e.dsc, 0.0);
    EXPECT_LE(e.dsc, 1.0);
  }
  std::ostringstream summary;
  a.write_summary_csv(summary);
  const std::string text = summary.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "subset_mask,subset,WT,TC,ET");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 16);
}

TEST_F(EvalTest, PoolsSlicesPerPatient) {
  // Without hypergraph layers the batch size does not change the predictions,
  // so one slice at a time gives the oracle.
  ModelParams p = ModelParams::init(model({}));
  const ModalitySubset subset(0b1010);
  DscReport report = evaluate_subsets(p, *store_, {subset}, 0.5, 3, Split::Val);
  const std::size_t hw = 256, slices = data_->spec().slices_per_patient;
  for (std::size_t patient : data_->patient_ids(Split::Val)) {
    std::array<std::size_t, 3> pred{}, truth{}, both{};
    for (std::size_t s = 0; s < slices; ++s) {
      Tensor y = forward(store_->composite({{patient, s}}, subset), p);
      const auto m = store_->mask_of(patient, s);
      for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t i = 0; i < hw; ++i) {
          const bool a = y.data()[r * hw + i] >= 0.5, t = m[r * hw + i] == 1.0;
          pred[r] += a;
          truth[r] += t;
          both[r] += a && t;
        }
      }
    }
    const auto got = report.per_patient(Region::WholeTumor, subset);
    for (std::size_t r = 0; r < 3; ++r) {
      const double expected = pred[r] + truth[r] == 0 ? 1.0 : 2.0 * both[r] / static_cast<double>(pred[r] + truth[r]);
      bool found = false;
      for (const auto& e : report.entries) {
        if (e.patient == patient && e.region == static_cast<Region>(r)) {
          EXPECT_DOUBLE_EQ(e.dsc, expected) << "patient " << patient << " region " << r;
          found = true;
        }
      }
      EXPECT_TRUE(found);
    }
    EXPECT_EQ(got.size(), data_->patient_ids(Split::Val).size());
  }
}

TEST_F(EvalTest, AllChannelsIsTheUnzeroedInput) {
  const auto patients = data_->patient_ids(Split::Test);
  std::vector<std::pair<std::size_t, std::size_t>> batch;
  for (std::size_t p : patients) batch.emplace_back(p, 1);
  Tensor all = store_->composite(batch, ModalitySubset::all());
  Tensor t1ce = store_->composite(batch, ModalitySubset::only(Modality::T1ce));
  const std::size_t hw = 256;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = t1ce.data()[(b * 4 + c) * hw + i];
        if (c == static_cast<std::size_t>(channel(Modality::T1ce))) {
          ASSERT_EQ(v, all.data()[(b * 4 + c) * hw + i]);
        } else {
          ASSERT_EQ(v, 0.0);
        }
      }
    }
  }
}

TEST_F(EvalTest, RejectsBadArguments) {
  ModelParams p = ModelParams::init(model({}));
  EXPECT_THROW(evaluate_subsets(p, *store_, {ModalitySubset()}, 0.5, 4), std::invalid_argument);
  EXPECT_THROW(evaluate_subsets(p, *store_, {ModalitySubset::all()}, 0.5, 0), std::invalid_argument);
  DscReport empty;
  EXPECT_THROW(empty.mean(Region::WholeTumor, ModalitySubset::all()), std::out_of_range);
  EXPECT_THROW(forgetting_report({p, p}, {Modality::T1}, *store_, 0.5, 4), std::invalid_argument);
}

TEST_F(EvalTest, UntrainedModelScoresNearTheIndependentPredictionBaseline) {
  // A prediction independent of the truth with positive rate q against a
  // truth rate pi has expected DSC 2 q pi / (q + pi).
  ModelParams p = ModelParams::init(model({2, 3}));
  const ModalitySubset all = ModalitySubset::all();
  DscReport report = evaluate_subsets(p, *store_, {all}, 0.5, 4);
  const std::size_t hw = 256, slices = data_->spec().slices_per_patient;
  const auto patients = data_->patient_ids(Split::Test);
  for (std::size_t r = 0; r < 3; ++r) {
    double baseline = 0.0;
    for (std::size_t patient : patients) {
      double pred = 0, truth = 0;
      for (std::size_t s = 0; s < slices; ++s) {
        Tensor y = forward(store_->composite({{patient, s}}, all), p);
        const auto m = store_->mask_of(patient, s);
        for (std::size_t i = 0; i < hw; ++i) {
          pred += y.data()[r * hw + i] >= 0.5;
          truth += m[r * hw + i];
        }
      }
      const double q = pred / (slices * hw), pi = truth / (slices * hw);
      baseline += (q + pi > 0 ? 2 * q * pi / (q + pi) : 1.0) / static_cast<double>(patients.size());
    }
    EXPECT_NEAR(report.mean(static_cast<Region>(r), all), baseline, 0.1) << "region " << r;
  }
}
