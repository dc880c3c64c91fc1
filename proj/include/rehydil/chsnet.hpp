#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rehydil/tensor.hpp"

namespace rehydil {

struct ModelConfig {
  std::size_t depth = 5;
  std::size_t base_channels = 8;
  std::size_t num_classes = 3;
  std::size_t num_modalities = 4;
  std::set<std::size_t> cph_stages = {4, 5};  // 1-based encoder stages
  /// Input height and width. Edge weights are learned per spatial position, so
  /// the parameter layout depends on it.
  std::size_t image_size = 32;
  /// Instance normalization between each 3x3 conv and its relu.
  bool instance_norm = true;
  std::uint64_t init_seed = 1;

  void validate() const;
  std::size_t channels(std::size_t stage) const { return base_channels << stage; }  // 0-based stage
  bool has_cph(std::size_t stage) const { return cph_stages.count(stage + 1) > 0; }
  bool operator==(const ModelConfig&) const = default;
};

/// "4,5" -> {4, 5}; "" or "none" -> {}.
std::set<std::size_t> parse_stage_set(const std::string& text);
std::string format_stage_set(const std::set<std::size_t>& stages);

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Every trainable tensor of the network, in a fixed order.
class ModelParams {
 public:
  ModelParams() = default;
  /// He-uniform kernels, zero biases, unit edge weights.
  static ModelParams init(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t num_parameters() const;
  void zero_grad();
  /// Swaps in a tensor of the same shape for `name`; other entries stay shared.
  void replace(const std::string& name, const Tensor& value);

  /// Names and shapes a configuration produces, without allocating values.
  static std::vector<std::pair<std::string, Shape>> layout(const ModelConfig& config);

 private:
  friend ModelParams load_checkpoint(const std::filesystem::path& path);
  friend ModelParams load_stage_weights(const ModelParams& previous, const ModelConfig& expected);
  ModelConfig config_;
  std::vector<NamedTensor> entries_;
};

/// Deep copy of `previous` for the next stage. Throws if its configuration
/// differs from `expected`.
ModelParams load_stage_weights(const ModelParams& previous, const ModelConfig& expected);

struct ForwardInfo {
  bool degenerate_hypergraph = false;  // CPH ran on a single image
};

/// B x M x H x W -> B x num_classes x H x W independent sigmoid maps. With
/// `info` null a single-image CPH batch prints a warning to stderr once.
Tensor forward(const Tensor& x, const ModelParams& params, ForwardInfo* info = nullptr);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

}  // namespace rehydil
