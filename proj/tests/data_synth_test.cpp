#include <cmath>
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "rehydil/data_synth.hpp"
#include "rehydil/serialize.hpp"
#include "test_util.hpp"

using namespace rehydil;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("rehydil_data_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

DatasetSpec small_spec() {
  DatasetSpec s;
  s.seed = 11;
  s.num_patients = 10;
  s.slices_per_patient = 6;
  s.image_size = 16;
  s.network_depth = 3;
  return s;
}

std::map<std::string, std::string> checksums(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file()) out[fs::relative(entry.path(), root).string()] = sha256_file(entry.path());
  }
  return out;
}

class DataSynthTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch_dir("suite"));
    generate_dataset(small_spec(), *root_);
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
  }
  static fs::path* root_;
};

fs::path* DataSynthTest::root_ = nullptr;

}  // namespace

TEST(DataSynthSpec, DefaultSplitIs32_4_4) {
  const fs::path root = scratch_dir("default");
  generate_dataset(DatasetSpec{}, root);
  Dataset d = Dataset::open(root);
  EXPECT_EQ(d.patient_ids(Split::Train).size(), 32u);
  EXPECT_EQ(d.patient_ids(Split::Val).size(), 4u);
  EXPECT_EQ(d.patient_ids(Split::Test).size(), 4u);
  EXPECT_EQ(d.samples().size(), 40u * 16u * 4u);
  fs::remove_all(root);
}

TEST(DataSynthSpec, RejectsInvalidSpecs) {
  DatasetSpec s = small_spec();
  s.image_size = 18;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.split_ratios = {0.5, 0.1, 0.1};
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(DataSynthSpec, UnwritablePathThrows) {
  const fs::path blocker = scratch_dir("blocker");
  std::ofstream(blocker) << "file";
  EXPECT_THROW(generate_dataset(small_spec(), blocker / "sub"), std::exception);
  fs::remove_all(blocker);
}

TEST(DataSynthSpec, SameSeedIsByteIdentical) {
  const fs::path a = scratch_dir("a"), b = scratch_dir("b"), c = scratch_dir("c");
  generate_dataset(small_spec(), a);
  generate_dataset(small_spec(), b);
  DatasetSpec other = small_spec();
  other.seed = 12;
  generate_dataset(other, c);
  EXPECT_EQ(checksums(a), checksums(b));
  EXPECT_NE(checksums(a), checksums(c));
  for (const auto& p : {a, b, c}) fs::remove_all(p);
}

TEST_F(DataSynthTest, SplitsArePatientDisjoint) {
  Dataset d = Dataset::open(*root_);
  std::map<std::size_t, std::set<Split>> seen;
  for (const auto& r : d.samples()) seen[r.patient_id].insert(r.split);
  EXPECT_EQ(seen.size(), 10u);
  for (const auto& [pid, splits] : seen) EXPECT_EQ(splits.size(), 1u) << "patient " << pid;
  EXPECT_EQ(d.patient_ids(Split::Train).size(), 8u);
  EXPECT_EQ(d.patient_ids(Split::Val).size(), 1u);
  EXPECT_EQ(d.patient_ids(Split::Test).size(), 1u);
}

TEST_F(DataSynthTest, MasksAreNestedAndBinary) {
  Dataset d = Dataset::open(*root_);
  const std::size_t hw = 16 * 16;
  std::size_t tumour_pixels = 0;
  for (const auto& r : d.samples()) {
    LoadedSample s = d.load_sample(r.sample_id);
    auto m = s.masks.data();
    for (std::size_t i = 0; i < hw; ++i) {
      for (std::size_t c = 0; c < 3; ++c) ASSERT_TRUE(m[c * hw + i] == 0.0 || m[c * hw + i] == 1.0);
      ASSERT_LE(m[2 * hw + i], m[hw + i]);
      ASSERT_LE(m[hw + i], m[i]);
      tumour_pixels += static_cast<std::size_t>(m[i]);
    }
  }
  EXPECT_GT(tumour_pixels, 0u);
}

TEST_F(DataSynthTest, LoadSamplePopulatesOnlyItsChannel) {
  Dataset d = Dataset::open(*root_);
  for (std::size_t id = 0; id < d.samples().size(); id += 7) {
    const SampleRecord& r = d.record(id);
    LoadedSample s = d.load_sample(id);
    ASSERT_EQ(s.image.shape(), (Shape{4, 16, 16}));
    EXPECT_EQ(s.modality, r.modality);
    EXPECT_EQ(s.patient_id, r.patient_id);
    auto img = s.image.data();
    for (std::size_t c = 0; c < 4; ++c) {
      double mass = 0.0;
      for (std::size_t i = 0; i < 256; ++i) mass += img[c * 256 + i];
      if (static_cast<int>(c) == channel(r.modality)) {
        EXPECT_GT(mass, 0.0);
      } else {
        EXPECT_EQ(mass, 0.0);
      }
    }
    for (double v : img) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
}

TEST_F(DataSynthTest, MaskCountsMatchManifest) {
  Dataset d = Dataset::open(*root_);
  for (const auto& r : d.samples()) {
    Tensor masks = load_tensor((*root_ / r.mask_path).string());
    for (std::size_t c = 0; c < 3; ++c) {
      std::size_t count = 0;
      for (std::size_t i = 0; i < 256; ++i) count += masks.data()[c * 256 + i] == 1.0 ? 1 : 0;
      ASSERT_EQ(count, r.mask_counts[c]) << "sample " << r.sample_id << " region " << c;
    }
  }
}

TEST_F(DataSynthTest, WriteThenLoadIsBitIdentical) {
  Dataset d = Dataset::open(*root_);
  const SampleRecord& r = d.record(13);
  const PatientRecord& p = d.patients().at(r.patient_id);
  const std::uint64_t noise_seed = d.spec().seed * 0x9E3779B97F4A7C15ULL + r.sample_id;
  SliceRendering fresh = render_slice(p, r.slice, 6, 16, r.modality, d.spec().noise_sigma, noise_seed);
  LoadedSample s = d.load_sample(r.sample_id);
  auto img = s.image.data();
  for (std::size_t i = 0; i < 256; ++i) ASSERT_EQ(img[channel(r.modality) * 256 + i], fresh.image[i]);
  EXPECT_EQ(rehydil::testing::to_vector(s.masks), fresh.masks);
}

TEST_F(DataSynthTest, ChecksumMismatchAndMissingFilesThrow) {
  const fs::path copy = scratch_dir("tamper");
  fs::copy(*root_, copy, fs::copy_options::recursive);
  Dataset d = Dataset::open(copy);
  const SampleRecord& r = d.record(3);
  {
    std::fstream f(copy / r.image_path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x7f');
  }
  EXPECT_THROW(d.load_sample(3), std::runtime_error);
  fs::remove(copy / d.record(5).mask_path);
  EXPECT_THROW(d.load_sample(5), std::runtime_error);
  EXPECT_THROW(d.load_sample(100000), std::out_of_range);
  fs::remove_all(copy);
}

TEST_F(DataSynthTest, ContrastSignatureFavoursDesignedRegion) {
  // Region mean minus tissue mean, measured on generated images.
  Dataset d = Dataset::open(*root_);
  const std::size_t hw = 256;
  std::vector<std::vector<std::size_t>> orderings;
  for (const auto& prof : contrast_profiles()) {
    double tissue_sum = 0.0;
    std::size_t tissue_n = 0;
    std::array<double, 3> region_sum{};
    std::array<std::size_t, 3> region_n{};
    for (const auto& r : d.samples()) {
      if (r.modality != prof.modality) continue;
      LoadedSample s = d.load_sample(r.sample_id);
      auto img = s.image.data();
      auto m = s.masks.data();
      const std::size_t off = static_cast<std::size_t>(channel(r.modality)) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = img[off + i];
        if (m[i] == 0.0) {
          // Tissue only: pixels inside the brain outline render above zero.
          if (v > 0.1) {
            tissue_sum += v;
            ++tissue_n;
          }
          continue;
        }
        for (std::size_t c = 0; c < 3; ++c) {
          if (m[c * hw + i] == 1.0) {
            region_sum[c] += v;
            ++region_n[c];
          }
        }
      }
    }
    const double tissue = tissue_sum / static_cast<double>(tissue_n);
    std::array<double, 3> gap{};
    for (std::size_t c = 0; c < 3; ++c) gap[c] = std::abs(region_sum[c] / static_cast<double>(region_n[c]) - tissue);
    std::vector<std::size_t> order = {0, 1, 2};
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return gap[a] > gap[b]; });
    EXPECT_EQ(order.front(), static_cast<std::size_t>(prof.designed_region))
        << to_string(prof.modality) << " gaps " << gap[0] << ' ' << gap[1] << ' ' << gap[2];
    orderings.push_back(order);
  }
  std::set<std::vector<std::size_t>> distinct(orderings.begin(), orderings.end());
  EXPECT_EQ(distinct.size(), orderings.size());
}

TEST(ZeroModalities, IdentityAndZeroingAndIdempotence) {
  std::mt19937_64 rng(5);
  Tensor x = rehydil::testing::random_tensor({4, 3, 3}, rng, 0.1, 1.0);
  EXPECT_EQ(rehydil::testing::to_vector(zero_modalities(x, ModalitySubset::all())), rehydil::testing::to_vector(x));
  Tensor flair = zero_modalities(x, ModalitySubset::only(Modality::Flair));
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 9; ++i) {
      const double v = flair.data()[c * 9 + i];
      if (c == 2) {
        EXPECT_EQ(v, x.data()[c * 9 + i]);
      } else {
        EXPECT_EQ(v, 0.0);
      }
    }
  }
  const ModalitySubset s(0b1010);
  EXPECT_EQ(rehydil::testing::to_vector(zero_modalities(zero_modalities(x, s), s)), rehydil::testing::to_vector(zero_modalities(x, s)));
  EXPECT_THROW(zero_modalities(x, ModalitySubset()), std::invalid_argument);
  EXPECT_THROW(zero_modalities(Tensor::zeros({3, 2, 2}), ModalitySubset::all()), ShapeError);
}

TEST(ZeroModalities, BatchedInput) {
  std::mt19937_64 rng(6);
  Tensor x = rehydil::testing::random_tensor({2, 4, 2, 2}, rng, 0.1, 1.0);
  Tensor y = zero_modalities(x, ModalitySubset::only(Modality::T1));
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t k = (b * 4 + c) * 4 + i;
        EXPECT_EQ(y.data()[k], c == 0 ? x.data()[k] : 0.0);
      }
    }
  }
}

TEST(ModalitySubsetTest, FifteenNonemptySubsetsWithLabels) {
  auto subsets = ModalitySubset::nonempty();
  ASSERT_EQ(subsets.size(), 15u);
  EXPECT_EQ(subsets.front().label(), "T1");
  EXPECT_EQ(subsets.back().label(), "T1+T2+FLAIR+T1CE");
  EXPECT_EQ(ModalitySubset(0b0101).label(), "T1+FLAIR");
  EXPECT_EQ(ModalitySubset::all().size(), 4u);
  EXPECT_EQ(modality_from_string("T1CE"), Modality::T1ce);
  EXPECT_THROW(modality_from_string("DWI"), std::invalid_argument);
}

TEST(Standardize, ZeroMeanUnitVariance) {
  const std::vector<double> out = standardize_slice({1.0, 2.0, 3.0, 6.0});
  // mean 3, population variance (4 + 1 + 0 + 9) / 4 = 3.5
  const double sd = std::sqrt(3.5);
  const std::vector<double> expected = {-2.0 / sd, -1.0 / sd, 0.0, 3.0 / sd};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out[i], expected[i], 1e-15);
  EXPECT_EQ(standardize_slice({0.4, 0.4, 0.4}), std::vector<double>(3, 0.0));
  EXPECT_TRUE(standardize_slice({}).empty());
}

TEST_F(DataSynthTest, SampleStoreCompositeMatchesZeroedLoads) {
  Dataset d = Dataset::open(*root_);
  SampleStore store(d);
  const std::size_t patient = d.patient_ids(Split::Test).front();
  Tensor comp = store.composite({{patient, 2}}, ModalitySubset::all());
  Tensor partial = store.composite({{patient, 2}}, ModalitySubset(0b0110));
  for (Modality m : kAllModalities) {
    LoadedSample s = d.load_sample(d.sample_id(patient, 2, m));
    const auto off = static_cast<long>(channel(m)) * 256;
    const std::vector<double> expected =
        standardize_slice({s.image.data().begin() + off, s.image.data().begin() + off + 256});
    for (std::size_t i = 0; i < 256; ++i) {
      const std::size_t k = static_cast<std::size_t>(off) + i;
      ASSERT_EQ(comp.data()[k], expected[i]);
      ASSERT_EQ(partial.data()[k], ModalitySubset(0b0110).contains(m) ? expected[i] : 0.0);
    }
  }
  Tensor batch = store.images({d.sample_id(patient, 1, Modality::T2)});
  Tensor loaded = d.load_sample(d.sample_id(patient, 1, Modality::T2)).image;
  const std::vector<double> t2 = standardize_slice({loaded.data().begin() + 256, loaded.data().begin() + 512});
  for (std::size_t i = 0; i < batch.numel(); ++i) {
    ASSERT_EQ(batch.data()[i], i / 256 == 1 ? t2[i - 256] : 0.0);
  }
  EXPECT_EQ(rehydil::testing::to_vector(store.masks({d.sample_id(patient, 1, Modality::T2)})),
            store.mask_of(patient, 1));
}
