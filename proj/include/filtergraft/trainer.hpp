#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "filtergraft/archzoo.hpp"
#include "filtergraft/datahub.hpp"
#include "filtergraft/surgery.hpp"

namespace fg {

enum class OptimizerKind { adamw, sgd_momentum };

struct TrainConfig {
  int epochs = 50;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double lr = 3e-3;
  double weight_decay = 0.05;
  int batch = 256;
  int warmup_epochs = 5;
  std::uint64_t seed = 0;
  double label_smoothing = 0.1;
  double momentum = 0.9;  // sgd_momentum only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  AugmentPolicy augment = AugmentPolicy::crop_flip;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
// Resolves <config_root>/train/<name>.json, or a path to a JSON file.
TrainConfig load_train_config(const std::string& name_or_path, const std::filesystem::path& config_root);
std::string config_digest(const TrainConfig& c);

struct EpochStat {
  int epoch = 0;
  double train_loss = 0.0;
  double test_acc = 0.0;
  bool operator==(const EpochStat&) const = default;
};

struct PlanSummary {
  std::string transfer_kind;  // "depthwise" | "pointwise"
  std::string mode;
  std::optional<int> depth_n;
  int first_layer = 0;
  int k = 3;
  bool freeze = true;
  std::optional<std::uint64_t> rng_seed;
  std::string source;  // source bank provenance key
  bool operator==(const PlanSummary&) const = default;
};

PlanSummary summarize(const TransferPlan& plan, LayerKind kind, const Provenance& source);

inline constexpr int kRecordSchemaVersion = 1;

struct RunRecord {
  int schema_version = kRecordSchemaVersion;
  std::string run_id;
  std::string role;  // base, selffer, anb, bnb, reverse, reverse_control, matrix, ablation, cross_arch, ...
  std::string arch;
  std::string dataset;
  std::uint64_t model_seed = 0;
  std::optional<PlanSummary> plan;
  std::string config_digest;        // identity of the whole run (arch, data, seed, plan, train config)
  std::string train_config_digest;  // TrainConfig alone
  TrainConfig config;
  std::vector<EpochStat> per_epoch;
  double final_acc = 0.0;
  std::optional<std::string> baseline_ref;
  std::optional<double> retention;
  bool frozen_verified = false;
  std::int64_t frozen_params = 0;
  std::string status = "completed";  // completed | failed
  std::string error;
  std::string params_digest;  // final parameters
  double wall_seconds = 0.0;
  std::string created_at;
  nlohmann::json extra = nlohmann::json::object();

  bool completed() const { return status == "completed"; }
  // Checks the record invariants; throws invalid-spec.
  void validate() const;
};

nlohmann::json to_json(const RunRecord& r);
RunRecord record_from_json(const nlohmann::json& j);

// acc_transfer / acc_base; zero-baseline error when acc_base <= 0.
double retention(double acc_transfer, double acc_base);

// Top-1 accuracy over the whole split, no augmentation.
double evaluate(const ModelHandle& model, const DatasetHandle& data, const Split& split, int batch = 256);

struct TrainOptions {
  const FreezeMask* mask = nullptr;
  bool verify_each_epoch = false;  // digest check after every epoch
  std::function<void(const std::string&)> log;
  // Test hook: runs after every optimizer step with mutable access to the model.
  std::function<void(ModelHandle&, std::int64_t step)> after_step;
};

// Trains in place. The classifier head is re-initialized when its class count
// differs from the dataset's. A non-finite loss ends the run with
// status "failed" (error "nan-loss"). A changed frozen parameter raises
// mask-violation. The returned record has no run_id; the caller assigns
// identity fields.
RunRecord train(ModelHandle& model, const DatasetHandle& data, const TrainConfig& config,
                const TrainOptions& options = {});

// Learning rate at optimizer step `step` (0-based) of `total` with linear
// warmup over `warmup` steps, then cosine decay to zero.
double scheduled_lr(double base_lr, std::int64_t step, std::int64_t total, std::int64_t warmup);

}  // namespace fg
