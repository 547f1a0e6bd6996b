#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "filtergraft/tensor.hpp"

namespace fg {

enum class BlockKind { standard_ds, gated_ds };

std::string to_string(BlockKind kind);
BlockKind block_kind_from_string(const std::string& s);

struct StageSpec {
  int num_blocks = 1;
  int channels = 1;
  int dw_kernel = 7;

  bool operator==(const StageSpec&) const = default;
};

struct InputSize {
  int height = 32;
  int width = 32;
  int channels = 3;

  bool operator==(const InputSize&) const = default;
};

// Declarative description of a depthwise-separable network.
//
// standard_ds blocks: 7x7 depthwise -> layer norm -> 1x1 expand (4x) -> GELU
// -> 1x1 project, with a residual connection.
// gated_ds blocks: layer norm -> 1x1 proj_in (C -> 2C) -> split into halves
// (a, b) -> a * depthwise(b) -> 1x1 proj_out, with a residual connection.
// Both carry one depthwise layer and two pointwise layers per block.
struct ArchSpec {
  std::string name;
  BlockKind block_kind = BlockKind::standard_ds;
  int stem_patch = 4;
  int stem_channels = 48;
  std::vector<StageSpec> stages;
  int num_classes = 10;
  InputSize input;

  bool operator==(const ArchSpec&) const = default;

  // Throws Error(invalid_spec) naming the offending field.
  void validate() const;

  int depthwise_layer_count() const;
  ArchSpec with_classes(int classes) const;
};

inline constexpr int kExpansionRatio = 4;

nlohmann::json to_json(const ArchSpec& spec);
ArchSpec arch_from_json(const nlohmann::json& j);
ArchSpec load_arch_file(const std::filesystem::path& path);

// Built-in specs: mini_convnext, mini_gated, mini_convnext_wide,
// mini_convnext_half, ci_convnext, ci_gated.
std::optional<ArchSpec> builtin_arch(const std::string& name);

// Resolves a name against <config_root>/arch/<name>.json first, then the
// built-in table.
ArchSpec resolve_arch(const std::string& name_or_path, const std::filesystem::path& config_root);

enum class LayerKind { depthwise, pointwise };

struct LayerEntry {
  int layer_id = 0;  // index within its kind, canonical order
  LayerKind kind = LayerKind::depthwise;
  Shape shape;       // (C, kh, kw) or (C_out, C_in)
  std::string weight;
  std::string bias;
  int stage = 0;
  int block = 0;
};

// Ordered parameter map; insertion order is the canonical order.
class ParamMap {
 public:
  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }

  bool operator==(const ParamMap& other) const {
    return names_ == other.names_ && values_ == other.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct ModelHandle {
  ArchSpec spec;
  std::uint64_t seed = 0;
  ParamMap params;
  std::vector<LayerEntry> layer_index;  // depthwise entries first, then pointwise
};

// Version of build_model's initialization; part of every run identity.
inline constexpr int kInitScheme = 2;

// Pure function of (spec, seed). Each parameter draws from its own stream
// keyed by name, so changing the head size leaves every other tensor intact.
// Weights are truncated normal with std 1/sqrt(fan_in); biases zero.
ModelHandle build_model(const ArchSpec& spec, std::uint64_t seed);

// Re-initializes the classifier head for a different class count.
void reset_head(ModelHandle& model, int num_classes);

struct DepthwiseLayerInfo {
  int layer_id;
  int channels;
  int kernel_size;
  bool operator==(const DepthwiseLayerInfo&) const = default;
};

struct PointwiseLayerInfo {
  int layer_id;
  int in_channels;
  int out_channels;
  bool operator==(const PointwiseLayerInfo&) const = default;
};

std::vector<DepthwiseLayerInfo> depthwise_layers(const ModelHandle& model);
std::vector<PointwiseLayerInfo> pointwise_layers(const ModelHandle& model);
std::vector<const LayerEntry*> layer_entries(const ModelHandle& model, LayerKind kind);

struct FilterInventory {
  std::int64_t total_dw_filters = 0;
  std::vector<DepthwiseLayerInfo> per_layer;
};

FilterInventory filter_inventory(const ArchSpec& spec);

// Combined digest over every parameter name and value.
std::string params_digest(const ParamMap& params);

}  // namespace fg
