#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "filtergraft/archzoo.hpp"
#include "filtergraft/reportkit.hpp"
#include "filtergraft/surgery.hpp"
#include "filtergraft/trainer.hpp"

namespace fg {

enum class ExperimentKind { selffer, anb, reverse_anb, matrix, ablation, cross_arch, cross_domain_arch };

std::string to_string(ExperimentKind k);
ExperimentKind experiment_kind_from_string(const std::string& s);

struct Endpoint {
  std::string arch;     // built-in name or configs/arch/<name>.json
  std::string dataset;  // "<name>" or "<name>:<partition>"
  bool operator==(const Endpoint&) const = default;
};

struct ExperimentSpec {
  std::string tag;
  ExperimentKind kind = ExperimentKind::selffer;
  std::optional<Endpoint> source;
  Endpoint target;
  std::vector<std::string> datasets;  // matrix only
  std::vector<int> depths;            // anb / reverse_anb
  LayerKind transfer_kind = LayerKind::depthwise;
  std::vector<TransferPlan> plans;  // ablation and cross-arch templates
  int replicates = 1;
  std::uint64_t seed = 0;  // model seed; replicate r uses derive_seed(seed, r) for r > 0
  TrainConfig train;
  std::string train_ref;  // name of the train config this spec was resolved from

  void validate() const;
};

// Keys: tag, kind, source{arch,dataset}, target{arch,dataset}, datasets,
// depths, transfer_kind, plans, replicates, seed, train (config name, path or
// inline object), train_overrides.
ExperimentSpec experiment_from_json(const nlohmann::json& j, const std::filesystem::path& config_root);
ExperimentSpec load_experiment(const std::filesystem::path& path, const std::filesystem::path& config_root);
nlohmann::json to_json(const ExperimentSpec& spec);

struct ProtocolResult {
  std::vector<RunRecord> records;  // every run the experiment references, in creation order
  nlohmann::json manifest;
  int trained = 0;  // runs actually trained during this call
  int failed = 0;   // failed records referenced
};

// Runs experiments sequentially in-process against a result store. Each run is
// identified by the digest of (role, arch spec, dataset, model seed, train
// config, plan, source run); a digest already in the store is reused, never
// retrained. Base models are checkpointed under <store>/<run_id>/ and source
// banks are extracted only from completed base runs.
class Orchestrator {
 public:
  Orchestrator(ResultStore& store, std::filesystem::path data_root, std::filesystem::path config_root);

  void set_log(std::function<void(const std::string&)> log) { log_ = std::move(log); }
  // Digest check after every epoch (slow-test mode).
  void set_verify_each_epoch(bool v) { verify_each_epoch_ = v; }
  // Test hook forwarded to the trainer of transfer runs.
  void set_after_step(std::function<void(ModelHandle&, std::int64_t)> f) { after_step_ = std::move(f); }

  ProtocolResult run(const ExperimentSpec& spec);

  // Building blocks, exposed for tests and the CLI.
  RunRecord ensure_base(const std::string& arch, const std::string& dataset, std::uint64_t seed,
                        const TrainConfig& cfg);
  FilterBank source_bank(const RunRecord& base, LayerKind kind);
  RunRecord ensure_transfer(const std::string& role, const std::string& arch, const std::string& dataset,
                            std::uint64_t seed, const TrainConfig& cfg, const RunRecord& source_base,
                            LayerKind kind, const TransferPlan& plan, const RunRecord& baseline);

  int trained() const { return trained_; }

 private:
  const DatasetHandle& dataset(const std::string& ref);
  ArchSpec arch_for(const std::string& arch, const DatasetHandle& data);

  ResultStore& store_;
  std::filesystem::path data_root_;
  std::filesystem::path config_root_;
  std::function<void(const std::string&)> log_;
  std::function<void(ModelHandle&, std::int64_t)> after_step_;
  bool verify_each_epoch_ = false;
  int trained_ = 0;
  std::vector<std::pair<std::string, std::unique_ptr<DatasetHandle>>> datasets_;
};

// Transfer plan with depth_n normalized against the target's layer count, so
// "first 12 of 12" and "ALL" share one identity.
TransferPlan canonical_plan(const TransferPlan& plan, int total_layers);

}  // namespace fg
