#include "rehydil/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>

#include <boost/math/distributions/students_t.hpp>

#include "rehydil/ops.hpp"

namespace rehydil {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Counts {
  std::size_t pred = 0, truth = 0, both = 0;
};

}  // namespace

double dsc_from_counts(std::size_t pred, std::size_t truth, std::size_t overlap) {
  if (overlap > pred || overlap > truth) throw std::invalid_argument("dsc: overlap exceeds a mask size");
  if (pred + truth == 0) return 1.0;
  return 2.0 * static_cast<double>(overlap) / static_cast<double>(pred + truth);
}

double dsc(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
  if (pred.size() != truth.size()) {
    throw ShapeError("dsc", Shape{pred.size()}, Shape{truth.size()});
  }
  std::size_t p = 0, t = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 1 || truth[i] > 1) throw DomainError("dsc", "masks must be binary");
    p += pred[i];
    t += truth[i];
    both += pred[i] & truth[i];
  }
  return dsc_from_counts(p, t, both);
}

std::vector<ModalitySubset> DscReport::subsets() const {
  std::vector<ModalitySubset> out;
  for (const auto& e : entries) {
    if (std::find(out.begin(), out.end(), e.subset) == out.end()) out.push_back(e.subset);
  }
  return out;
}

std::vector<double> DscReport::per_patient(Region region, ModalitySubset subset) const {
  std::vector<std::pair<std::size_t, double>> rows;
  for (const auto& e : entries) {
    if (e.region == region && e.subset == subset) rows.emplace_back(e.patient, e.dsc);
  }
  std::sort(rows.begin(), rows.end());
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(r.second);
  return out;
}

double DscReport::mean(Region region, ModalitySubset subset) const {
  const auto values = per_patient(region, subset);
  if (values.empty()) throw std::out_of_range("no DSC entries for subset " + subset.label());
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

void DscReport::write_entries_csv(std::ostream& out) const {
  out << "subset_mask,subset,region,patient,dsc\n";
  for (const auto& e : entries) {
    out << int(e.subset.bits()) << ',' << e.subset.label() << ',' << to_string(e.region) << ',' << e.patient << ','
        << fmt(e.dsc) << '\n';
  }
}

void DscReport::write_summary_csv(std::ostream& out) const {
  out << "subset_mask,subset,WT,TC,ET\n";
  for (ModalitySubset s : subsets()) {
    out << int(s.bits()) << ',' << s.label();
    for (std::size_t r = 0; r < kNumRegions; ++r) out << ',' << fmt(mean(static_cast<Region>(r), s));
    out << '\n';
  }
}

DscReport evaluate_subsets(const ModelParams& params, const SampleStore& store,
                           const std::vector<ModalitySubset>& subsets, double threshold, std::size_t batch_size,
                           Split split) {
  const Dataset& data = store.dataset();
  const std::vector<std::size_t> patients = data.patient_ids(split);
  if (patients.empty()) throw std::invalid_argument("evaluate_subsets: the " + to_string(split) + " split is empty");
  if (batch_size == 0) throw std::invalid_argument("evaluate_subsets: batch size must be positive");
  const std::size_t slices = data.spec().slices_per_patient;
  const std::size_t hw = store.image_size() * store.image_size();

  NoGradGuard no_grad;
  DscReport report;
  for (ModalitySubset subset : subsets) {
    if (subset.empty()) throw std::invalid_argument("evaluate_subsets: empty modality subset");
    std::map<std::size_t, std::array<Counts, kNumRegions>> pooled;
    for (std::size_t slice = 0; slice < slices; ++slice) {
      for (std::size_t start = 0; start < patients.size(); start += batch_size) {
        std::vector<std::pair<std::size_t, std::size_t>> chunk;
        for (std::size_t k = start; k < std::min(patients.size(), start + batch_size); ++k) {
          chunk.emplace_back(patients[k], slice);
        }
        ForwardInfo info;
        Tensor pred = forward(store.composite(chunk, subset), params, &info);
        auto p = pred.data();
        for (std::size_t b = 0; b < chunk.size(); ++b) {
          const std::vector<double> truth = store.mask_of(chunk[b].first, slice);
          auto& counts = pooled[chunk[b].first];
          for (std::size_t r = 0; r < kNumRegions; ++r) {
            for (std::size_t i = 0; i < hw; ++i) {
              const bool yp = p[(b * kNumRegions + r) * hw + i] >= threshold;
              const bool yt = truth[r * hw + i] == 1.0;
              counts[r].pred += yp;
              counts[r].truth += yt;
              counts[r].both += yp && yt;
            }
          }
        }
      }
    }
    for (std::size_t patient : patients) {
      for (std::size_t r = 0; r < kNumRegions; ++r) {
        const Counts& c = pooled[patient][r];
        report.entries.push_back({patient, static_cast<Region>(r), subset, dsc_from_counts(c.pred, c.truth, c.both)});
      }
    }
  }
  return report;
}

std::array<double, kNumRegions> ForgettingReport::forgetting(std::size_t j) const {
  if (j >= order.size()) throw std::out_of_range("forgetting: modality index out of range");
  std::array<double, kNumRegions> out{};
  for (std::size_t r = 0; r < kNumRegions; ++r) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = j; i < dsc.size(); ++i) best = std::max(best, dsc[i][j][r]);
    out[r] = best - dsc.back()[j][r];
  }
  return out;
}

void ForgettingReport::write_csv(std::ostream& out) const {
  out << "after_stage,modality,WT,TC,ET\n";
  for (std::size_t i = 0; i < dsc.size(); ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      out << i + 1 << ',' << to_string(order[j]);
      for (double v : dsc[i][j]) out << ',' << fmt(v);
      out << '\n';
    }
  }
  for (std::size_t j = 0; j < dsc.size(); ++j) {
    out << "forgetting," << to_string(order[j]);
    for (double v : forgetting(j)) out << ',' << fmt(v);
    out << '\n';
  }
}

ForgettingReport forgetting_report(const std::vector<ModelParams>& stage_params, const std::vector<Modality>& order,
                                   const SampleStore& store, double threshold, std::size_t batch_size, Split split) {
  if (stage_params.size() > order.size()) throw std::invalid_argument("forgetting_report: more stages than modalities");
  ForgettingReport report;
  report.order.assign(order.begin(), order.begin() + static_cast<long>(stage_params.size()));
  for (std::size_t i = 0; i < stage_params.size(); ++i) {
    std::vector<ModalitySubset> seen;
    for (std::size_t j = 0; j <= i; ++j) seen.push_back(ModalitySubset::only(order[j]));
    DscReport r = evaluate_subsets(stage_params[i], store, seen, threshold, batch_size, split);
    std::vector<std::array<double, kNumRegions>> row;
    for (ModalitySubset s : seen) {
      std::array<double, kNumRegions> v{};
      for (std::size_t c = 0; c < kNumRegions; ++c) v[c] = r.mean(static_cast<Region>(c), s);
      row.push_back(v);
    }
    report.dsc.push_back(std::move(row));
  }
  return report;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_t_test: samples must be paired");
  if (a.size() < 2) throw std::invalid_argument("paired_t_test: need at least two pairs");
  const std::size_t n = a.size();
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  TTestResult out;
  out.df = n - 1;
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) {
    out.degenerate = true;
    if (mean == 0.0) {
      out.t = 0.0;
      out.p = 1.0;
    } else {
      out.t = std::copysign(std::numeric_limits<double>::infinity(), mean);
      out.p = 0.0;
    }
    return out;
  }
  out.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t dist(static_cast<double>(out.df));
  out.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t)));
  return out;
}

}  // namespace rehydil
