#include "rehydil/data_synth.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "rehydil/serialize.hpp"

namespace rehydil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

const std::array<const char*, kNumModalities> kModalityNames = {"T1", "T2", "FLAIR", "T1CE"};
const std::array<const char*, kNumRegions> kRegionNames = {"WT", "TC", "ET"};

bool inside(const Ellipse& e, double scale, double x, double y) {
  if (scale <= 0.0) return false;
  const double c = std::cos(e.angle), s = std::sin(e.angle);
  const double dx = x - e.cx, dy = y - e.cy;
  const double u = (c * dx + s * dy) / (e.rx * scale);
  const double v = (-s * dx + c * dy) / (e.ry * scale);
  return u * u + v * v <= 1.0;
}

double slice_scale(const PatientRecord& p, std::size_t slice, std::size_t slices) {
  const double z = (static_cast<double>(slice) + 0.5) / static_cast<double>(slices);
  const double t = (z - p.z_center) / p.z_radius;
  return t >= 1.0 || t <= -1.0 ? 0.0 : std::sqrt(1.0 - t * t);
}

PatientRecord sample_patient(std::size_t id, std::size_t size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const double n = static_cast<double>(size);
  PatientRecord p;
  p.patient_id = id;
  p.brain = {n / 2 + range(-0.03, 0.03) * n, n / 2 + range(-0.03, 0.03) * n, range(0.40, 0.46) * n,
             range(0.36, 0.44) * n, range(-0.3, 0.3)};
  Ellipse wt{n / 2 + range(-0.12, 0.12) * n, n / 2 + range(-0.12, 0.12) * n, range(0.16, 0.26) * n,
             range(0.14, 0.24) * n, range(0.0, std::numbers::pi)};
  Ellipse tc{wt.cx + range(-0.2, 0.2) * wt.rx * 0.4, wt.cy + range(-0.2, 0.2) * wt.ry * 0.4, wt.rx * range(0.5, 0.7),
             wt.ry * range(0.5, 0.7), wt.angle + range(-0.5, 0.5)};
  Ellipse et{tc.cx + range(-0.2, 0.2) * tc.rx * 0.4, tc.cy + range(-0.2, 0.2) * tc.ry * 0.4, tc.rx * range(0.45, 0.65),
             tc.ry * range(0.45, 0.65), tc.angle + range(-0.5, 0.5)};
  p.regions = {wt, tc, et};
  p.z_center = range(0.4, 0.6);
  p.z_radius = range(0.38, 0.5);
  p.gain = range(0.95, 1.05);
  return p;
}

json ellipse_json(const Ellipse& e) { return json::array({e.cx, e.cy, e.rx, e.ry, e.angle}); }

Ellipse ellipse_from(const json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>(),
          j.at(4).get<double>()};
}

void write_file(const fs::path& path, const Tensor& t) {
  save_tensor(path.string(), t);
}

}  // namespace

std::string to_string(Modality m) { return kModalityNames.at(static_cast<std::size_t>(m)); }

Modality modality_from_string(const std::string& name) {
  for (std::size_t i = 0; i < kNumModalities; ++i) {
    if (name == kModalityNames[i]) return static_cast<Modality>(i);
  }
  throw std::invalid_argument("unknown modality '" + name + "' (expected T1, T2, FLAIR or T1CE)");
}

std::string to_string(Region r) { return kRegionNames.at(static_cast<std::size_t>(r)); }

std::vector<ModalitySubset> ModalitySubset::nonempty() {
  std::vector<ModalitySubset> out;
  for (std::uint8_t b = 1; b < 16; ++b) out.emplace_back(b);
  return out;
}

std::size_t ModalitySubset::size() const {
  std::size_t n = 0;
  for (Modality m : kAllModalities) n += contains(m) ? 1 : 0;
  return n;
}

std::string ModalitySubset::label() const {
  std::string out;
  for (Modality m : kAllModalities) {
    if (!contains(m)) continue;
    if (!out.empty()) out += '+';
    out += to_string(m);
  }
  return out.empty() ? "none" : out;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + name + "'");
}

const std::array<ContrastProfile, kNumModalities>& contrast_profiles() {
  // tissue, edema (WT only), core (TC only), enhancing (ET)
  static const std::array<ContrastProfile, kNumModalities> profiles = {{
      {Modality::T1, Region::WholeTumor, 0.25, 0.52, 0.50, 0.48},
      {Modality::T2, Region::TumorCore, 0.25, 0.35, 0.80, 0.78},
      {Modality::Flair, Region::WholeTumor, 0.20, 0.80, 0.70, 0.72},
      {Modality::T1ce, Region::Enhancing, 0.25, 0.25, 0.30, 0.90},
  }};
  return profiles;
}

void DatasetSpec::validate() const {
  if (num_patients < 3) throw std::invalid_argument("dataset needs at least 3 patients");
  if (slices_per_patient == 0) throw std::invalid_argument("slices_per_patient must be positive");
  const std::size_t unit = std::size_t{1} << (network_depth - 1);
  if (image_size == 0 || image_size % unit != 0) {
    throw std::invalid_argument("image_size " + std::to_string(image_size) + " not divisible by " + std::to_string(unit));
  }
  double total = 0.0;
  for (double r : split_ratios) {
    if (r < 0.0) throw std::invalid_argument("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");
  if (noise_sigma < 0.0) throw std::invalid_argument("noise_sigma must be non-negative");
}

SliceRendering render_slice(const PatientRecord& patient, std::size_t slice, std::size_t slices, std::size_t size,
                            Modality modality, double noise_sigma, std::uint64_t noise_seed) {
  const double scale = slice_scale(patient, slice, slices);
  // The brain outline shrinks less than the tumour across slices.
  const double brain_scale = 0.75 + 0.25 * std::sqrt(std::max(0.0, 1.0 - std::pow((static_cast<double>(slice) + 0.5) /
                                                                                   static_cast<double>(slices) * 2.0 - 1.0, 2.0)));
  const ContrastProfile& prof = contrast_profiles().at(static_cast<std::size_t>(modality));
  const std::size_t hw = size * size;
  SliceRendering out{std::vector<double>(kNumRegions * hw, 0.0), std::vector<double>(hw, 0.0)};
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, noise_sigma);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const std::size_t i = y * size + x;
      const bool wt = inside(patient.regions[0], scale, px, py);
      const bool tc = wt && inside(patient.regions[1], scale, px, py);
      const bool et = tc && inside(patient.regions[2], scale, px, py);
      out.masks[i] = wt ? 1.0 : 0.0;
      out.masks[hw + i] = tc ? 1.0 : 0.0;
      out.masks[2 * hw + i] = et ? 1.0 : 0.0;
      double value = 0.0;
      if (et) {
        value = prof.enhancing;
      } else if (tc) {
        value = prof.core;
      } else if (wt) {
        value = prof.edema;
      } else if (inside(patient.brain, brain_scale, px, py)) {
        value = prof.tissue;
      }
      const double n = noise_sigma > 0.0 ? noise(rng) : 0.0;
      out.image[i] = std::clamp(value * patient.gain + n, 0.0, 1.0);
    }
  }
  return out;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::array<char, 1 << 14> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest.data(), &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

void generate_dataset(const DatasetSpec& spec, const fs::path& root) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "masks", ec);
  if (ec || !fs::is_directory(root / "images")) throw std::runtime_error("cannot create dataset directory " + root.string());

  std::mt19937_64 rng(spec.seed);
  std::vector<PatientRecord> patients;
  for (std::size_t p = 0; p < spec.num_patients; ++p) patients.push_back(sample_patient(p, spec.image_size, rng));

  // Patient-level split: shuffle ids, then cut by ratio.
  std::vector<std::size_t> order(spec.num_patients);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<double>(spec.num_patients);
  const auto n_train = static_cast<std::size_t>(std::llround(spec.split_ratios[0] * n));
  const auto n_val = static_cast<std::size_t>(std::llround(spec.split_ratios[1] * n));
  for (std::size_t i = 0; i < order.size(); ++i) {
    patients[order[i]].split = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
  }

  json manifest;
  manifest["version"] = kManifestVersion;
  manifest["seed"] = spec.seed;
  manifest["num_patients"] = spec.num_patients;
  manifest["slices_per_patient"] = spec.slices_per_patient;
  manifest["image_size"] = spec.image_size;
  manifest["split_ratios"] = spec.split_ratios;
  manifest["noise_sigma"] = spec.noise_sigma;
  manifest["network_depth"] = spec.network_depth;
  manifest["image_shape"] = {1, spec.image_size, spec.image_size};
  manifest["mask_shape"] = {kNumRegions, spec.image_size, spec.image_size};
  json modalities = json::array();
  for (const auto& prof : contrast_profiles()) {
    modalities.push_back({{"id", channel(prof.modality)},
                          {"name", to_string(prof.modality)},
                          {"designed_region", to_string(prof.designed_region)},
                          {"intensities", {prof.tissue, prof.edema, prof.core, prof.enhancing}}});
  }
  manifest["modalities"] = modalities;
  json jp = json::array();
  for (const auto& p : patients) {
    jp.push_back({{"patient_id", p.patient_id},
                  {"split", to_string(p.split)},
                  {"brain", ellipse_json(p.brain)},
                  {"wt", ellipse_json(p.regions[0])},
                  {"tc", ellipse_json(p.regions[1])},
                  {"et", ellipse_json(p.regions[2])},
                  {"z_center", p.z_center},
                  {"z_radius", p.z_radius},
                  {"gain", p.gain}});
  }
  manifest["patients"] = jp;

  const std::size_t size = spec.image_size;
  json samples = json::array();
  for (const auto& p : patients) {
    for (std::size_t s = 0; s < spec.slices_per_patient; ++s) {
      std::ostringstream mask_name;
      mask_name << "masks/p" << std::setw(3) << std::setfill('0') << p.patient_id << "_s" << std::setw(2) << s << ".bin";
      std::string mask_sha;
      std::array<std::size_t, kNumRegions> counts{};
      for (Modality m : kAllModalities) {
        const std::size_t id = (p.patient_id * spec.slices_per_patient + s) * kNumModalities + channel(m);
        const std::uint64_t noise_seed = spec.seed * 0x9E3779B97F4A7C15ULL + id;
        SliceRendering r = render_slice(p, s, spec.slices_per_patient, size, m, spec.noise_sigma, noise_seed);
        if (m == Modality::T1) {
          for (std::size_t c = 0; c < kNumRegions; ++c) {
            counts[c] = static_cast<std::size_t>(
                std::count(r.masks.begin() + static_cast<long>(c * size * size),
                           r.masks.begin() + static_cast<long>((c + 1) * size * size), 1.0));
          }
          write_file(root / mask_name.str(), Tensor({kNumRegions, size, size}, r.masks));
          mask_sha = sha256_file(root / mask_name.str());
        }
        std::ostringstream image_name;
        image_name << "images/p" << std::setw(3) << std::setfill('0') << p.patient_id << "_s" << std::setw(2) << s << "_"
                   << to_string(m) << ".bin";
        write_file(root / image_name.str(), Tensor({1, size, size}, r.image));
        samples.push_back({{"sample_id", id},
                           {"patient_id", p.patient_id},
                           {"modality_id", channel(m)},
                           {"slice", s},
                           {"split", to_string(p.split)},
                           {"image", image_name.str()},
                           {"mask", mask_name.str()},
                           {"mask_counts", counts},
                           {"image_sha256", sha256_file(root / image_name.str())},
                           {"mask_sha256", mask_sha}});
      }
    }
  }
  manifest["samples"] = samples;
  std::ofstream out(root / "manifest.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest in " + root.string());
  out << manifest.dump(1) << '\n';
}

Dataset Dataset::open(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + root.string());
  json m = json::parse(in);
  if (m.at("version").get<int>() != kManifestVersion) throw std::runtime_error("unsupported dataset version");
  Dataset d;
  d.root_ = root;
  d.spec_.seed = m.at("seed").get<std::uint64_t>();
  d.spec_.num_patients = m.at("num_patients").get<std::size_t>();
  d.spec_.slices_per_patient = m.at("slices_per_patient").get<std::size_t>();
  d.spec_.image_size = m.at("image_size").get<std::size_t>();
  d.spec_.split_ratios = m.at("split_ratios").get<std::array<double, 3>>();
  d.spec_.noise_sigma = m.at("noise_sigma").get<double>();
  d.spec_.network_depth = m.at("network_depth").get<std::size_t>();
  for (const auto& jp : m.at("patients")) {
    PatientRecord p;
    p.patient_id = jp.at("patient_id").get<std::size_t>();
    p.split = split_from_string(jp.at("split").get<std::string>());
    p.brain = ellipse_from(jp.at("brain"));
    p.regions = {ellipse_from(jp.at("wt")), ellipse_from(jp.at("tc")), ellipse_from(jp.at("et"))};
    p.z_center = jp.at("z_center").get<double>();
    p.z_radius = jp.at("z_radius").get<double>();
    p.gain = jp.at("gain").get<double>();
    d.patients_.push_back(p);
  }
  for (const auto& js : m.at("samples")) {
    SampleRecord r;
    r.sample_id = js.at("sample_id").get<std::size_t>();
    r.patient_id = js.at("patient_id").get<std::size_t>();
    r.modality = static_cast<Modality>(js.at("modality_id").get<int>());
    r.slice = js.at("slice").get<std::size_t>();
    r.split = split_from_string(js.at("split").get<std::string>());
    r.image_path = js.at("image").get<std::string>();
    r.mask_path = js.at("mask").get<std::string>();
    r.mask_counts = js.at("mask_counts").get<std::array<std::size_t, kNumRegions>>();
    r.image_sha256 = js.at("image_sha256").get<std::string>();
    r.mask_sha256 = js.at("mask_sha256").get<std::string>();
    if (r.sample_id != d.samples_.size()) throw std::runtime_error("manifest samples are not in id order");
    d.samples_.push_back(std::move(r));
  }
  return d;
}

const SampleRecord& Dataset::record(std::size_t sample_id) const {
  if (sample_id >= samples_.size()) throw std::out_of_range("unknown sample id " + std::to_string(sample_id));
  return samples_[sample_id];
}

LoadedSample Dataset::load_sample(std::size_t sample_id) const {
  const SampleRecord& r = record(sample_id);
  const fs::path image_path = root_ / r.image_path, mask_path = root_ / r.mask_path;
  if (!fs::exists(image_path) || !fs::exists(mask_path)) {
    throw std::runtime_error("missing files for sample " + std::to_string(sample_id));
  }
  if (sha256_file(image_path) != r.image_sha256) throw std::runtime_error("checksum mismatch: " + r.image_path);
  if (sha256_file(mask_path) != r.mask_sha256) throw std::runtime_error("checksum mismatch: " + r.mask_path);
  Tensor image = load_tensor(image_path.string());
  Tensor masks = load_tensor(mask_path.string());
  const std::size_t n = spec_.image_size;
  if (image.shape() != Shape{1, n, n} || masks.shape() != Shape{kNumRegions, n, n}) {
    throw std::runtime_error("sample " + std::to_string(sample_id) + " does not match manifest shapes");
  }
  std::vector<double> full(kNumModalities * n * n, 0.0);
  std::copy(image.data().begin(), image.data().end(), full.begin() + static_cast<long>(channel(r.modality) * n * n));
  return {Tensor({kNumModalities, n, n}, std::move(full)), masks, r.patient_id, r.modality};
}

std::vector<std::size_t> Dataset::sample_ids(Split split, std::optional<Modality> modality) const {
  std::vector<std::size_t> out;
  for (const auto& r : samples_) {
    if (r.split == split && (!modality || r.modality == *modality)) out.push_back(r.sample_id);
  }
  return out;
}

std::vector<std::size_t> Dataset::patient_ids(Split split) const {
  std::vector<std::size_t> out;
  for (const auto& p : patients_) {
    if (p.split == split) out.push_back(p.patient_id);
  }
  return out;
}

std::size_t Dataset::sample_id(std::size_t patient, std::size_t slice, Modality modality) const {
  return (patient * spec_.slices_per_patient + slice) * kNumModalities + static_cast<std::size_t>(channel(modality));
}

Tensor zero_modalities(const Tensor& image, ModalitySubset available) {
  if (available.empty()) throw std::invalid_argument("zero_modalities: the available subset is empty");
  const bool batched = image.rank() == 4;
  if (!(batched || image.rank() == 3) || image.dim(batched ? 1 : 0) != kNumModalities) {
    throw ShapeError("zero_modalities", "expected M x H x W or B x M x H x W with M = 4, got " +
                                            shape_to_string(image.shape()));
  }
  Tensor out = image.detach();
  auto data = out.mutable_data();
  const std::size_t batch = batched ? image.dim(0) : 1;
  const std::size_t plane = image.dim(image.rank() - 1) * image.dim(image.rank() - 2);
  for (std::size_t b = 0; b < batch; ++b) {
    for (Modality m : kAllModalities) {
      if (available.contains(m)) continue;
      auto begin = data.begin() + static_cast<long>((b * kNumModalities + channel(m)) * plane);
      std::fill(begin, begin + static_cast<long>(plane), 0.0);
    }
  }
  return out;
}

std::vector<double> standardize_slice(const std::vector<double>& pixels) {
  std::vector<double> out(pixels.size(), 0.0);
  if (std::all_of(pixels.begin(), pixels.end(), [&](double v) { return v == pixels.front(); })) return out;
  const double n = static_cast<double>(pixels.size());
  double mean = 0.0;
  for (double v : pixels) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : pixels) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = (pixels[i] - mean) / sd;
  return out;
}

SampleStore::SampleStore(const Dataset& dataset) : dataset_(&dataset), size_(dataset.image_size()) {
  const std::size_t hw = size_ * size_;
  images_.resize(dataset.samples().size());
  masks_.resize(dataset.samples().size());
  for (const auto& r : dataset.samples()) {
    LoadedSample s = dataset.load_sample(r.sample_id);
    auto img = s.image.data();
    images_[r.sample_id] = standardize_slice({img.begin() + static_cast<long>(channel(r.modality) * hw),
                                              img.begin() + static_cast<long>((channel(r.modality) + 1) * hw)});
    masks_[r.sample_id].assign(s.masks.data().begin(), s.masks.data().end());
  }
}

Tensor SampleStore::images(const std::vector<std::size_t>& sample_ids) const {
  const std::size_t hw = size_ * size_;
  std::vector<double> out(sample_ids.size() * kNumModalities * hw, 0.0);
  for (std::size_t b = 0; b < sample_ids.size(); ++b) {
    const std::size_t id = sample_ids[b];
    const int ch = channel(modality_of(id));
    std::copy(images_.at(id).begin(), images_.at(id).end(),
              out.begin() + static_cast<long>((b * kNumModalities + static_cast<std::size_t>(ch)) * hw));
  }
  return Tensor({sample_ids.size(), kNumModalities, size_, size_}, std::move(out));
}

Tensor SampleStore::masks(const std::vector<std::size_t>& sample_ids) const {
  const std::size_t chw = kNumRegions * size_ * size_;
  std::vector<double> out(sample_ids.size() * chw);
  for (std::size_t b = 0; b < sample_ids.size(); ++b) {
    std::copy(masks_.at(sample_ids[b]).begin(), masks_.at(sample_ids[b]).end(), out.begin() + static_cast<long>(b * chw));
  }
  return Tensor({sample_ids.size(), kNumRegions, size_, size_}, std::move(out));
}

Tensor SampleStore::composite(const std::vector<std::pair<std::size_t, std::size_t>>& patient_slices,
                              ModalitySubset available) const {
  if (available.empty()) throw std::invalid_argument("composite: the available subset is empty");
  const std::size_t hw = size_ * size_;
  std::vector<double> out(patient_slices.size() * kNumModalities * hw, 0.0);
  for (std::size_t b = 0; b < patient_slices.size(); ++b) {
    for (Modality m : kAllModalities) {
      if (!available.contains(m)) continue;
      const auto& img = images_.at(dataset_->sample_id(patient_slices[b].first, patient_slices[b].second, m));
      std::copy(img.begin(), img.end(),
                out.begin() + static_cast<long>((b * kNumModalities + static_cast<std::size_t>(channel(m))) * hw));
    }
  }
  return Tensor({patient_slices.size(), kNumModalities, size_, size_}, std::move(out));
}

std::vector<double> SampleStore::mask_of(std::size_t patient, std::size_t slice) const {
  return masks_.at(dataset_->sample_id(patient, slice, Modality::T1));
}

}  // namespace rehydil
