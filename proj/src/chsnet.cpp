#include "rehydil/chsnet.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <mutex>
#include <random>
#include <sstream>

#include <json.hpp>

#include "rehydil/hypergraph.hpp"
#include "rehydil/ops.hpp"
#include "rehydil/serialize.hpp"

namespace rehydil {

using nlohmann::json;

namespace {

constexpr const char* kCheckpointMagic = "REHYDIL-CHECKPOINT 1";

std::string enc(std::size_t d) { return "enc" + std::to_string(d + 1); }
std::string dec(std::size_t d) { return "dec" + std::to_string(d + 1); }

Tensor he_uniform(const Shape& shape, std::mt19937_64& rng) {
  const std::size_t fan_in = shape[1] * shape[2] * shape[3];
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor(shape, std::move(data), true);
}

Tensor double_conv(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  const bool norm = p.config().instance_norm;
  auto conv = [&](const Tensor& in, const std::string& name) {
    Tensor y = conv2d(in, p.get(prefix + name + ".weight"), p.get(prefix + name + ".bias"), Padding::Replicate);
    return relu(norm ? instance_norm(y) : y);
  };
  return conv(conv(x, ".conv1"), ".conv2");
}

Tensor cross_patient_hypergraph(const Tensor& features, const ModelParams& p, const std::string& prefix) {
  VertexSet vertices = flatten_features(features);
  // A lone vertex (one image, 1 x 1 map) has no neighbour; its edge is itself.
  Hypergraph graph = vertices.size() == 1 ? Hypergraph(1, {{0}}) : build_hypergraph(vertices);
  // One learned weight per grid position, shared by every image in the batch.
  const std::size_t hw = vertices.height * vertices.width;
  std::vector<std::size_t> slot(vertices.size());
  for (std::size_t v = 0; v < slot.size(); ++v) slot[v] = v % hw;
  Tensor weights = gather(p.get(prefix + ".cph.edge_weight"), slot);
  Tensor propagated = hgnn_propagate(graph, vertices, weights);
  return fuse(propagated, vertices, features, p.get(prefix + ".cph.fuse.weight"), p.get(prefix + ".cph.fuse.bias"));
}

void warn_single_image_once() {
  static std::once_flag flag;
  std::call_once(flag, [] {
    std::cerr << "warning: cross-patient hypergraph layer received a batch of one image; "
                 "hyperedges only link positions within that image\n";
  });
}

}  // namespace

void ModelConfig::validate() const {
  if (depth < 1) throw std::invalid_argument("depth must be at least 1");
  if (base_channels < 1 || num_classes < 1 || num_modalities < 1) {
    throw std::invalid_argument("channel counts must be positive");
  }
  for (std::size_t s : cph_stages) {
    if (s < 1 || s > depth) {
      throw std::invalid_argument("cph stage " + std::to_string(s) + " outside 1.." + std::to_string(depth));
    }
  }
  const std::size_t unit = std::size_t{1} << (depth - 1);
  if (image_size == 0 || image_size % unit != 0) {
    throw std::invalid_argument("image size " + std::to_string(image_size) + " not divisible by " + std::to_string(unit));
  }
}

std::set<std::size_t> parse_stage_set(const std::string& text) {
  std::set<std::size_t> out;
  if (text.empty() || text == "none") return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    const unsigned long v = std::stoul(item, &pos);
    if (pos != item.size()) throw std::invalid_argument("bad stage list '" + text + "'");
    out.insert(v);
  }
  return out;
}

std::string format_stage_set(const std::set<std::size_t>& stages) {
  if (stages.empty()) return "none";
  std::string out;
  for (std::size_t s : stages) out += (out.empty() ? "" : ",") + std::to_string(s);
  return out;
}

std::vector<std::pair<std::string, Shape>> ModelParams::layout(const ModelConfig& c) {
  c.validate();
  std::vector<std::pair<std::string, Shape>> out;
  auto conv = [&](const std::string& name, std::size_t cout, std::size_t cin, std::size_t k) {
    out.emplace_back(name + ".weight", Shape{cout, cin, k, k});
    out.emplace_back(name + ".bias", Shape{cout});
  };
  for (std::size_t d = 0; d < c.depth; ++d) {
    const std::size_t cin = d == 0 ? c.num_modalities : c.channels(d - 1);
    conv(enc(d) + ".conv1", c.channels(d), cin, 3);
    conv(enc(d) + ".conv2", c.channels(d), c.channels(d), 3);
    if (c.has_cph(d)) {
      const std::size_t side = c.image_size >> d;
      out.emplace_back(enc(d) + ".cph.edge_weight", Shape{side * side});
      conv(enc(d) + ".cph.fuse", c.channels(d), 2 * c.channels(d), 1);
    }
  }
  for (std::size_t d = c.depth - 1; d-- > 0;) {
    conv(dec(d) + ".conv1", c.channels(d), c.channels(d) + c.channels(d + 1), 3);
    conv(dec(d) + ".conv2", c.channels(d), c.channels(d), 3);
  }
  conv("head", c.num_classes, c.channels(0), 1);
  return out;
}

ModelParams ModelParams::init(const ModelConfig& config) {
  ModelParams p;
  p.config_ = config;
  std::mt19937_64 rng(config.init_seed);
  for (auto& [name, shape] : layout(config)) {
    Tensor value;
    if (shape.size() == 4) {
      value = he_uniform(shape, rng);
    } else if (name.ends_with(".edge_weight")) {
      value = Tensor::ones(shape, true);
    } else {
      value = Tensor::zeros(shape, true);
    }
    p.entries_.push_back({name, value});
  }
  return p;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) out.push_back(e.value);
  return out;
}

const Tensor& ModelParams::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.value;
  }
  throw std::out_of_range("no parameter named " + name);
}

bool ModelParams::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

std::size_t ModelParams::num_parameters() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void ModelParams::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

void ModelParams::replace(const std::string& name, const Tensor& value) {
  for (auto& e : entries_) {
    if (e.name != name) continue;
    if (e.value.shape() != value.shape()) throw ShapeError("ModelParams::replace", e.value.shape(), value.shape());
    e.value = value;
    return;
  }
  throw std::out_of_range("no parameter named " + name);
}

ModelParams load_stage_weights(const ModelParams& previous, const ModelConfig& expected) {
  if (!(previous.config() == expected)) {
    throw std::invalid_argument("load_stage_weights: previous stage configuration differs from the expected one");
  }
  ModelParams out;
  out.config_ = previous.config_;
  for (const auto& e : previous.entries_) {
    Tensor copy = e.value.clone();
    copy.set_requires_grad(true);
    out.entries_.push_back({e.name, copy});
  }
  return out;
}

Tensor forward(const Tensor& x, const ModelParams& params, ForwardInfo* info) {
  const ModelConfig& c = params.config();
  if (x.rank() != 4 || x.dim(1) != c.num_modalities) {
    throw ShapeError("forward", "expected B x " + std::to_string(c.num_modalities) + " x H x W input, got " +
                                    shape_to_string(x.shape()));
  }
  if (x.dim(0) == 0) throw ShapeError("forward", "empty batch");
  if (x.dim(2) != c.image_size || x.dim(3) != c.image_size) {
    const std::size_t unit = std::size_t{1} << (c.depth - 1);
    if (x.dim(2) % unit != 0 || x.dim(3) % unit != 0) {
      throw ShapeError("forward", "spatial size " + shape_to_string(x.shape()) + " not divisible by " + std::to_string(unit));
    }
    throw ShapeError("forward", "spatial size must be " + std::to_string(c.image_size) + ", got " +
                                    shape_to_string(x.shape()));
  }
  if (!c.cph_stages.empty() && x.dim(0) < 2) {
    if (info) {
      info->degenerate_hypergraph = true;
    } else {
      warn_single_image_once();
    }
  }

  std::vector<Tensor> skips;
  Tensor h = x;
  for (std::size_t d = 0; d < c.depth; ++d) {
    if (d > 0) h = max_pool2x2(h);
    h = double_conv(h, params, enc(d));
    if (c.has_cph(d)) h = cross_patient_hypergraph(h, params, enc(d));
    skips.push_back(h);
  }
  for (std::size_t d = c.depth - 1; d-- > 0;) {
    h = concat({skips[d], upsample_nearest2x(h)}, 1);
    h = double_conv(h, params, dec(d));
  }
  return sigmoid(conv2d(h, params.get("head.weight"), params.get("head.bias"), Padding::Valid));
}

std::string config_to_json(const ModelConfig& c) {
  json j{{"depth", c.depth},
         {"base_channels", c.base_channels},
         {"num_classes", c.num_classes},
         {"num_modalities", c.num_modalities},
         {"cph_stages", std::vector<std::size_t>(c.cph_stages.begin(), c.cph_stages.end())},
         {"image_size", c.image_size},
         {"instance_norm", c.instance_norm},
         {"init_seed", c.init_seed}};
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig c;
  c.depth = j.at("depth").get<std::size_t>();
  c.base_channels = j.at("base_channels").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.num_modalities = j.at("num_modalities").get<std::size_t>();
  const auto stages = j.at("cph_stages").get<std::vector<std::size_t>>();
  c.cph_stages = {stages.begin(), stages.end()};
  c.image_size = j.at("image_size").get<std::size_t>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  c.instance_norm = j.at("instance_norm").get<bool>();
  c.validate();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  json manifest;
  manifest["config"] = json::parse(config_to_json(params.config()));
  json tensors = json::array();
  for (const auto& e : params.entries()) tensors.push_back({{"name", e.name}, {"shape", e.value.shape()}});
  manifest["tensors"] = tensors;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << kCheckpointMagic << '\n' << manifest.dump() << '\n';
  for (const auto& e : params.entries()) write_tensor(out, e.value);
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string magic, manifest_line;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw std::runtime_error(path.string() + " is not a checkpoint");
  std::getline(in, manifest_line);
  json manifest = json::parse(manifest_line);
  ModelParams p;
  p.config_ = config_from_json(manifest.at("config").dump());
  const auto expected = ModelParams::layout(p.config_);
  const auto& listed = manifest.at("tensors");
  if (listed.size() != expected.size()) throw std::runtime_error("checkpoint tensor list does not match its config");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const std::string name = listed[i].at("name").get<std::string>();
    const Shape shape = listed[i].at("shape").get<Shape>();
    Tensor t = read_tensor(in);
    if (name != expected[i].first || shape != expected[i].second || t.shape() != shape) {
      throw std::runtime_error("checkpoint entry " + name + " does not match its config");
    }
    t.set_requires_grad(true);
    p.entries_.push_back({name, t});
  }
  return p;
}

}  // namespace rehydil
