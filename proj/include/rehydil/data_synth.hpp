#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rehydil/tensor.hpp"

namespace rehydil {

/// Modality roles. The enumerator value is the input channel index.
enum class Modality : int { T1 = 0, T2 = 1, Flair = 2, T1ce = 3 };

inline constexpr std::size_t kNumModalities = 4;
inline constexpr std::size_t kNumRegions = 3;
inline constexpr std::array<Modality, kNumModalities> kAllModalities = {Modality::T1, Modality::T2, Modality::Flair,
                                                                        Modality::T1ce};

/// Nested region classes, outermost first: ET within TC within WT.
enum class Region : int { WholeTumor = 0, TumorCore = 1, Enhancing = 2 };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& name);
std::string to_string(Region r);
inline int channel(Modality m) { return static_cast<int>(m); }

/// Set of available modalities as a 4-bit mask (bit i = channel i).
class ModalitySubset {
 public:
  constexpr ModalitySubset() = default;
  constexpr explicit ModalitySubset(std::uint8_t bits) : bits_(bits & 0xF) {}
  static ModalitySubset all() { return ModalitySubset(0xF); }
  static ModalitySubset only(Modality m) { return ModalitySubset(static_cast<std::uint8_t>(1u << channel(m))); }
  /// The 15 non-empty subsets in ascending mask order.
  static std::vector<ModalitySubset> nonempty();

  constexpr std::uint8_t bits() const { return bits_; }
  constexpr bool empty() const { return bits_ == 0; }
  bool contains(Modality m) const { return (bits_ >> channel(m)) & 1u; }
  std::size_t size() const;
  /// e.g. "T1+FLAIR".
  std::string label() const;
  bool operator==(const ModalitySubset&) const = default;

 private:
  std::uint8_t bits_ = 0;
};

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& name);

struct Ellipse {
  double cx = 0, cy = 0;  // pixels
  double rx = 0, ry = 0;  // pixels at the widest slice
  double angle = 0;       // radians
};

struct PatientRecord {
  std::size_t patient_id = 0;
  Split split = Split::Train;
  Ellipse brain;
  std::array<Ellipse, kNumRegions> regions;  // WT, TC, ET
  double z_center = 0.5;                     // fraction of the slice stack
  double z_radius = 0.4;
  double gain = 1.0;                         // per-patient intensity scale
};

/// Per-modality mean intensities: tissue, then the WT-only, TC-only and ET
/// compartments. Each modality exposes one region best.
struct ContrastProfile {
  Modality modality;
  Region designed_region;
  double tissue, edema, core, enhancing;
};

const std::array<ContrastProfile, kNumModalities>& contrast_profiles();

struct DatasetSpec {
  std::uint64_t seed = 1;
  std::size_t num_patients = 40;
  std::size_t slices_per_patient = 16;
  std::size_t image_size = 32;
  std::array<double, 3> split_ratios = {0.8, 0.1, 0.1};
  double noise_sigma = 0.05;
  /// Images must be divisible by 2^(depth-1) for the network.
  std::size_t network_depth = 5;

  void validate() const;
};

struct SampleRecord {
  std::size_t sample_id = 0;
  std::size_t patient_id = 0;
  Modality modality = Modality::T1;
  std::size_t slice = 0;
  Split split = Split::Train;
  std::string image_path;  // relative to the dataset root
  std::string mask_path;
  std::array<std::size_t, kNumRegions> mask_counts{};
  std::string image_sha256;
  std::string mask_sha256;
};

struct LoadedSample {
  Tensor image;  // M x H x W, only the sample's modality channel populated
  Tensor masks;  // 3 x H x W binary
  std::size_t patient_id = 0;
  Modality modality = Modality::T1;
};

/// Renders the three nested masks and one modality image for a patient slice
/// (no file I/O). Exposed for tests and tools.
struct SliceRendering {
  std::vector<double> masks;  // 3 x H x W
  std::vector<double> image;  // H x W
};
SliceRendering render_slice(const PatientRecord& patient, std::size_t slice, std::size_t slices, std::size_t size,
                            Modality modality, double noise_sigma, std::uint64_t noise_seed);

/// Writes the dataset directory (manifest.json, images/, masks/). Same spec ->
/// byte-identical files.
void generate_dataset(const DatasetSpec& spec, const std::filesystem::path& root);

std::string sha256_file(const std::filesystem::path& path);

class Dataset {
 public:
  static Dataset open(const std::filesystem::path& root);

  const std::filesystem::path& root() const { return root_; }
  const DatasetSpec& spec() const { return spec_; }
  const std::vector<PatientRecord>& patients() const { return patients_; }
  const std::vector<SampleRecord>& samples() const { return samples_; }
  const SampleRecord& record(std::size_t sample_id) const;
  std::size_t image_size() const { return spec_.image_size; }

  /// Reads and checksum-verifies one sample.
  LoadedSample load_sample(std::size_t sample_id) const;

  std::vector<std::size_t> sample_ids(Split split, std::optional<Modality> modality = std::nullopt) const;
  std::vector<std::size_t> patient_ids(Split split) const;
  /// Sample id of (patient, slice, modality).
  std::size_t sample_id(std::size_t patient, std::size_t slice, Modality modality) const;

 private:
  std::filesystem::path root_;
  DatasetSpec spec_;
  std::vector<PatientRecord> patients_;
  std::vector<SampleRecord> samples_;
};

/// Zeroes every channel of an M x H x W (or B x M x H x W) image whose modality
/// is not in `available`.
Tensor zero_modalities(const Tensor& image, ModalitySubset available);

/// All samples of a dataset held in memory, keyed by sample id.
/// Zero-mean, unit-variance copy of one slice (all zeros if the slice is
/// constant).
std::vector<double> standardize_slice(const std::vector<double>& pixels);

/// In-memory model inputs for a dataset. Slices are standardized on load, so
/// a missing modality (all zeros) stays distinguishable from an observed one.
class SampleStore {
 public:
  explicit SampleStore(const Dataset& dataset);

  const Dataset& dataset() const { return *dataset_; }
  std::size_t size() const { return images_.size(); }
  std::size_t image_size() const { return size_; }
  std::size_t patient_of(std::size_t sample_id) const { return dataset_->record(sample_id).patient_id; }
  Modality modality_of(std::size_t sample_id) const { return dataset_->record(sample_id).modality; }

  /// B x M x H x W batch; each sample populates only its own modality channel.
  Tensor images(const std::vector<std::size_t>& sample_ids) const;
  /// B x 3 x H x W masks.
  Tensor masks(const std::vector<std::size_t>& sample_ids) const;
  /// B x M x H x W multi-modality batch for (patient, slice) pairs, channels
  /// outside `available` zeroed.
  Tensor composite(const std::vector<std::pair<std::size_t, std::size_t>>& patient_slices,
                   ModalitySubset available) const;
  std::vector<double> mask_of(std::size_t patient, std::size_t slice) const;

 private:
  const Dataset* dataset_;
  std::size_t size_;
  std::vector<std::vector<double>> images_;  // H x W per sample id
  std::vector<std::vector<double>> masks_;   // 3 x H x W per sample id
};

}  // namespace rehydil
