#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "filtergraft/archzoo.hpp"
#include "filtergraft/tensor.hpp"

namespace fg {

struct Provenance {
  std::string arch_name;
  std::string dataset_name;
  std::string run_id;
  std::string extraction_time;  // ISO-8601 UTC

  // Stable reference used by transfer plans and run records.
  std::string key() const { return arch_name + "/" + dataset_name + "/" + run_id; }
};

struct BankEntry {
  int layer_id = 0;
  Tensor kernels;  // (C, kh, kw) for depthwise, (C_out, C_in) for pointwise
  Tensor bias;     // (C) or (C_out)

  bool operator==(const BankEntry&) const = default;
};

// Immutable after extraction.
struct FilterBank {
  LayerKind kind = LayerKind::depthwise;
  Provenance provenance;
  std::vector<BankEntry> entries;

  void validate() const;
  std::int64_t kernel_count() const;
};

// Extraction copies weights and biases bit-exactly. Empty provenance fields
// are filled from the model (arch name) or with placeholders.
FilterBank extract_depthwise(const ModelHandle& model, Provenance provenance = {});
FilterBank extract_pointwise(const ModelHandle& model, Provenance provenance = {});

// All per-channel depthwise kernels in canonical order (layer, then channel).
struct FlatStack {
  struct Boundary {
    int layer_id;
    std::int64_t start;
    std::int64_t count;
    bool operator==(const Boundary&) const = default;
  };
  std::int64_t kh = 0, kw = 0;
  std::vector<float> kernels;  // size() * kh * kw values
  std::vector<float> biases;   // one per kernel
  std::vector<Boundary> boundaries;

  std::int64_t size() const { return static_cast<std::int64_t>(biases.size()); }
  const float* kernel(std::int64_t i) const { return kernels.data() + i * kh * kw; }
  // (layer_id, channel) of slot i.
  std::pair<int, int> origin(std::int64_t i) const;
};

FlatStack flatten_stack(const FilterBank& bank);

enum class TransferMode { layerwise, stack, shuffle, repeat_first_k, pointwise_layerwise };

std::string to_string(TransferMode mode);
TransferMode transfer_mode_from_string(const std::string& s);

struct TransferPlan {
  TransferMode mode = TransferMode::layerwise;
  std::optional<int> depth_n;  // nullopt = ALL remaining layers
  int first_layer = 0;         // first target layer to fill (reverse protocols)
  int k = 3;                   // repeat_first_k only
  bool freeze = true;
  std::optional<std::uint64_t> rng_seed;  // shuffle only
  std::string source_bank_ref;
  bool allow_resize = false;  // bilinear kernel resampling; off by default

  void validate() const;
};

nlohmann::json to_json(const TransferPlan& plan);
TransferPlan plan_from_json(const nlohmann::json& j);

struct FreezeMask {
  std::set<std::string> frozen_param_names;
  std::map<std::string, std::string> checksum_before;

  bool empty() const { return frozen_param_names.empty(); }
  bool contains(const std::string& name) const { return frozen_param_names.count(name) != 0; }
};

// target (layer, channel) <- source (layer, channel)
struct ProvenanceLink {
  int target_layer;
  int target_channel;
  int source_layer;
  int source_channel;
  bool operator==(const ProvenanceLink&) const = default;
};

struct TransplantResult {
  ModelHandle model;
  FreezeMask mask;
  std::vector<ProvenanceLink> provenance_map;
  std::int64_t consumed = 0;  // source kernels (or matrices) read
  bool resized = false;
};

TransplantResult transplant(const ModelHandle& target, const FilterBank& bank, const TransferPlan& plan);

// Builds a mask over the named parameters using their current digests.
FreezeMask make_mask(const ModelHandle& model, const std::vector<std::string>& names);

struct FreezeReport {
  struct Item {
    std::string name;
    std::string expected;
    std::string actual;
    bool equal;
  };
  std::vector<Item> items;
  bool pass = true;

  std::vector<std::string> differing() const;
};

FreezeReport verify_frozen(const FreezeMask& mask, const ModelHandle& model);

// Bank files: .npz layout with one float32 array per layer named by the
// zero-padded layer id, biases under "<id>.bias", and JSON metadata under the
// reserved "__meta__" key.
inline constexpr const char* kBankMetaKey = "__meta__";
void save_bank(const FilterBank& bank, const std::filesystem::path& path);
FilterBank load_bank(const std::filesystem::path& path);

// Checkpoints: <dir>/params.npz (every parameter by name) + <dir>/model.json.
void save_checkpoint(const ModelHandle& model, const std::filesystem::path& dir, const nlohmann::json& extra = {});
ModelHandle load_checkpoint(const std::filesystem::path& dir);
nlohmann::json checkpoint_meta(const std::filesystem::path& dir);

std::string utc_now_iso8601();

}  // namespace fg
