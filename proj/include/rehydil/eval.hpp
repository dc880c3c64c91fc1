#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "rehydil/chsnet.hpp"
#include "rehydil/data_synth.hpp"

namespace rehydil {

/// 2|P and T| / (|P| + |T|); 1 when both masks are empty.
double dsc(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth);
double dsc_from_counts(std::size_t pred, std::size_t truth, std::size_t overlap);

struct DscEntry {
  std::size_t patient = 0;
  Region region = Region::WholeTumor;
  ModalitySubset subset;
  double dsc = 0.0;
};

struct DscReport {
  std::vector<DscEntry> entries;

  std::vector<ModalitySubset> subsets() const;  // in first-seen order
  /// Mean over patients.
  double mean(Region region, ModalitySubset subset) const;
  std::vector<double> per_patient(Region region, ModalitySubset subset) const;  // ascending patient id

  /// subset_mask,subset,region,patient,dsc
  void write_entries_csv(std::ostream& out) const;
  /// subset_mask,subset,WT,TC,ET
  void write_summary_csv(std::ostream& out) const;
};

/// Runs the model on every slice of `split` with the channels outside each
/// subset zeroed, binarizes at `threshold` and pools each patient's slices
/// before the ratio. Batches hold the patients of one slice index.
DscReport evaluate_subsets(const ModelParams& params, const SampleStore& store,
                           const std::vector<ModalitySubset>& subsets, double threshold, std::size_t batch_size,
                           Split split = Split::Test);

struct ForgettingReport {
  std::vector<Modality> order;
  /// dsc[i][j][r]: mean DSC of modality order[j] alone after stage i, for j <= i.
  std::vector<std::vector<std::array<double, kNumRegions>>> dsc;

  /// Best DSC over stages i >= j minus the final DSC.
  std::array<double, kNumRegions> forgetting(std::size_t j) const;
  /// after_stage,modality,WT,TC,ET (one row per stage and seen modality),
  /// then forgetting rows with after_stage = "forgetting".
  void write_csv(std::ostream& out) const;
};

ForgettingReport forgetting_report(const std::vector<ModelParams>& stage_params, const std::vector<Modality>& order,
                                   const SampleStore& store, double threshold, std::size_t batch_size,
                                   Split split = Split::Test);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t df = 0;
  bool degenerate = false;  // differences have zero variance
};

/// Two-tailed paired t-test on a - b.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace rehydil
