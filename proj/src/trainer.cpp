#include "filtergraft/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

#include "filtergraft/digest.hpp"
#include "filtergraft/error.hpp"
#include "filtergraft/fsutil.hpp"
#include "filtergraft/nn.hpp"
#include "filtergraft/rng.hpp"

using nlohmann::json;

namespace fg {

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorKind::invalid_spec, "train config: " + m); };
  if (epochs < 1) bad("epochs must be >= 1");
  if (!(lr > 0.0)) bad("lr must be > 0");
  if (weight_decay < 0.0) bad("weight_decay must be >= 0");
  if (batch < 1) bad("batch must be >= 1");
  if (warmup_epochs < 0) bad("warmup_epochs must be >= 0");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) bad("label_smoothing must be in [0, 1)");
  if (momentum < 0.0 || momentum >= 1.0) bad("momentum must be in [0, 1)");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) bad("betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) bad("adam_eps must be > 0");
}

namespace {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgd_momentum"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adamw") return OptimizerKind::adamw;
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  throw Error(ErrorKind::invalid_spec, "unknown optimizer '" + s + "'");
}

std::string to_string(AugmentPolicy a) { return a == AugmentPolicy::none ? "none" : "crop_flip"; }

AugmentPolicy augment_from_string(const std::string& s) {
  if (s == "none") return AugmentPolicy::none;
  if (s == "crop_flip") return AugmentPolicy::crop_flip;
  throw Error(ErrorKind::invalid_spec, "unknown augment policy '" + s + "'");
}

}  // namespace

json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"optimizer", to_string(c.optimizer)},
              {"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"batch", c.batch},
              {"warmup_epochs", c.warmup_epochs},
              {"seed", c.seed},
              {"label_smoothing", c.label_smoothing},
              {"momentum", c.momentum},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"augment", to_string(c.augment)}};
}

TrainConfig train_config_from_json(const json& j) {
  static const std::set<std::string> known = {"epochs", "optimizer", "lr", "weight_decay", "batch",
                                              "warmup_epochs", "seed", "label_smoothing", "momentum", "beta1",
                                              "beta2", "adam_eps", "augment", "name", "description"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw Error(ErrorKind::invalid_spec, "train config: unknown key '" + key + "'");
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j["optimizer"].get<std::string>());
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch = j.value("batch", c.batch);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.seed = j.value("seed", c.seed);
  c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
  c.momentum = j.value("momentum", c.momentum);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  if (j.contains("augment")) c.augment = augment_from_string(j["augment"].get<std::string>());
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& name_or_path, const std::filesystem::path& config_root) {
  std::filesystem::path p = name_or_path;
  if (!std::filesystem::exists(p)) p = config_root / "train" / (name_or_path + ".json");
  if (!std::filesystem::exists(p)) throw Error(ErrorKind::invalid_spec, "no train config '" + name_or_path + "'");
  return train_config_from_json(json::parse(read_text_file(p)));
}

std::string config_digest(const TrainConfig& c) { return sha256_hex(to_json(c).dump()); }

PlanSummary summarize(const TransferPlan& plan, LayerKind kind, const Provenance& source) {
  PlanSummary s;
  s.transfer_kind = kind == LayerKind::depthwise ? "depthwise" : "pointwise";
  s.mode = to_string(plan.mode);
  s.depth_n = plan.depth_n;
  s.first_layer = plan.first_layer;
  s.k = plan.k;
  s.freeze = plan.freeze;
  s.rng_seed = plan.rng_seed;
  s.source = source.key();
  return s;
}

namespace {

json to_json(const PlanSummary& p) {
  return json{{"transfer_kind", p.transfer_kind},
              {"mode", p.mode},
              {"depth_n", p.depth_n ? json(*p.depth_n) : json("ALL")},
              {"first_layer", p.first_layer},
              {"k", p.k},
              {"freeze", p.freeze},
              {"rng_seed", p.rng_seed ? json(*p.rng_seed) : json(nullptr)},
              {"source", p.source}};
}

PlanSummary plan_summary_from_json(const json& j) {
  PlanSummary p;
  p.transfer_kind = j.at("transfer_kind").get<std::string>();
  p.mode = j.at("mode").get<std::string>();
  if (!j.at("depth_n").is_string()) p.depth_n = j["depth_n"].get<int>();
  p.first_layer = j.at("first_layer").get<int>();
  p.k = j.at("k").get<int>();
  p.freeze = j.at("freeze").get<bool>();
  if (!j.at("rng_seed").is_null()) p.rng_seed = j["rng_seed"].get<std::uint64_t>();
  p.source = j.at("source").get<std::string>();
  return p;
}

}  // namespace

void RunRecord::validate() const {
  auto bad = [this](const std::string& m) { throw Error(ErrorKind::invalid_spec, "run record " + run_id + ": " + m); };
  if (run_id.empty()) bad("empty run_id");
  if (config_digest.empty()) bad("empty config_digest");
  if (!(final_acc >= 0.0 && final_acc <= 1.0)) bad("final_acc outside [0, 1]");
  if (completed() && per_epoch.empty()) bad("completed run without epochs");
  if (!per_epoch.empty() && per_epoch.back().test_acc != final_acc) bad("final_acc differs from last epoch");
  if (baseline_ref.has_value() != retention.has_value()) bad("retention present iff baseline_ref present");
  if (status != "completed" && status != "failed") bad("unknown status '" + status + "'");
}

json to_json(const RunRecord& r) {
  json epochs = json::array();
  for (const auto& e : r.per_epoch)
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"test_acc", e.test_acc}});
  return json{{"schema_version", r.schema_version},
              {"run_id", r.run_id},
              {"role", r.role},
              {"arch", r.arch},
              {"dataset", r.dataset},
              {"model_seed", r.model_seed},
              {"plan_summary", r.plan ? to_json(*r.plan) : json(nullptr)},
              {"config_digest", r.config_digest},
              {"train_config_digest", r.train_config_digest},
              {"config", to_json(r.config)},
              {"per_epoch", epochs},
              {"final_acc", r.final_acc},
              {"baseline_ref", r.baseline_ref ? json(*r.baseline_ref) : json(nullptr)},
              {"retention", r.retention ? json(*r.retention) : json(nullptr)},
              {"frozen_verified", r.frozen_verified},
              {"frozen_params", r.frozen_params},
              {"status", r.status},
              {"error", r.error},
              {"params_digest", r.params_digest},
              {"wall_seconds", r.wall_seconds},
              {"created_at", r.created_at},
              {"extra", r.extra}};
}

RunRecord record_from_json(const json& j) {
  RunRecord r;
  r.schema_version = j.at("schema_version").get<int>();
  if (r.schema_version != kRecordSchemaVersion)
    throw Error(ErrorKind::format_error, "unsupported record schema_version " + std::to_string(r.schema_version));
  r.run_id = j.at("run_id").get<std::string>();
  r.role = j.at("role").get<std::string>();
  r.arch = j.at("arch").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.model_seed = j.at("model_seed").get<std::uint64_t>();
  if (!j.at("plan_summary").is_null()) r.plan = plan_summary_from_json(j["plan_summary"]);
  r.config_digest = j.at("config_digest").get<std::string>();
  r.train_config_digest = j.at("train_config_digest").get<std::string>();
  r.config = train_config_from_json(j.at("config"));
  for (const auto& e : j.at("per_epoch"))
    r.per_epoch.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(), e.at("test_acc").get<double>()});
  r.final_acc = j.at("final_acc").get<double>();
  if (!j.at("baseline_ref").is_null()) r.baseline_ref = j["baseline_ref"].get<std::string>();
  if (!j.at("retention").is_null()) r.retention = j["retention"].get<double>();
  r.frozen_verified = j.at("frozen_verified").get<bool>();
  r.frozen_params = j.at("frozen_params").get<std::int64_t>();
  r.status = j.at("status").get<std::string>();
  r.error = j.at("error").get<std::string>();
  r.params_digest = j.at("params_digest").get<std::string>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.created_at = j.at("created_at").get<std::string>();
  r.extra = j.value("extra", json::object());
  return r;
}

double retention(double acc_transfer, double acc_base) {
  if (!(acc_base > 0.0)) throw Error(ErrorKind::zero_baseline, "baseline accuracy must be > 0");
  // Accuracies are decimal fractions; rounding the quotient to 15 significant
  // digits drops binary representation noise (0.70 / 0.80 gives 0.875, not
  // 0.87499999999999989).
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.15g", acc_transfer / acc_base);
  return std::strtod(buf, nullptr);
}

double evaluate(const ModelHandle& model, const DatasetHandle& data, const Split& split, int batch) {
  if (split.size() == 0) return 0.0;
  nn::Network net(model);
  BatchIterator it(data, split, batch, AugmentPolicy::none, false, 0);
  Batch b;
  std::int64_t correct = 0;
  while (it.next(b)) {
    const Tensor logits = net.forward(b.images, false);
    const std::int64_t k = logits.dim(1);
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      const float* row = logits.ptr() + static_cast<std::int64_t>(i) * k;
      const auto best = std::max_element(row, row + k) - row;
      if (best == b.labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

double scheduled_lr(double base_lr, std::int64_t step, std::int64_t total, std::int64_t warmup) {
  if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const std::int64_t span = std::max<std::int64_t>(1, total - warmup);
  const double t = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

RunRecord train(ModelHandle& model, const DatasetHandle& data, const TrainConfig& config,
                const TrainOptions& options) {
  config.validate();
  const auto t_start = std::chrono::steady_clock::now();
  auto log = [&](const std::string& m) {
    if (options.log) options.log(m);
  };

  const auto& in = model.spec.input;
  if (data.train.height != in.height || data.train.width != in.width || data.train.channels != in.channels) {
    throw Error(ErrorKind::shape_mismatch, "dataset " + data.spec.name + " images are " +
                                               std::to_string(data.train.height) + "x" +
                                               std::to_string(data.train.width) + "x" +
                                               std::to_string(data.train.channels) + ", " + model.spec.name +
                                               " expects " + std::to_string(in.height) + "x" +
                                               std::to_string(in.width) + "x" + std::to_string(in.channels));
  }
  if (model.spec.num_classes != data.num_classes()) reset_head(model, data.num_classes());

  const FreezeMask empty_mask;
  const FreezeMask& mask = options.mask ? *options.mask : empty_mask;
  for (const auto& name : mask.frozen_param_names)
    if (!model.params.contains(name)) throw Error(ErrorKind::unknown_parameter, "frozen parameter '" + name + "'");

  const std::size_t np = model.params.size();
  std::vector<bool> trainable(np), decay(np);
  std::int64_t frozen_count = 0;
  for (std::size_t i = 0; i < np; ++i) {
    const auto& name = model.params.names()[i];
    trainable[i] = !mask.contains(name);
    decay[i] = trainable[i] && model.params.value(i).rank() >= 2;
    if (!trainable[i]) ++frozen_count;
  }

  RunRecord rec;
  rec.arch = model.spec.name;
  rec.dataset = data.spec.name;
  rec.model_seed = model.seed;
  rec.config = config;
  rec.train_config_digest = config_digest(config);
  rec.frozen_params = frozen_count;
  rec.created_at = utc_now_iso8601();

  std::vector<Tensor> m1, m2;
  for (std::size_t i = 0; i < np; ++i) {
    const auto& shape = model.params.value(i).shape;
    m1.emplace_back(trainable[i] ? shape : Shape{0});
    m2.emplace_back(trainable[i] && config.optimizer == OptimizerKind::adamw ? shape : Shape{0});
  }
  std::vector<Tensor> grads = nn::zero_grads(model);

  Loaders loaders = make_loaders(data, config.batch, config.augment, derive_seed(config.seed, "loader"));
  const std::int64_t spe = loaders.train.batches_per_epoch();
  const std::int64_t total = spe * config.epochs;
  const std::int64_t warmup = std::min<std::int64_t>(spe * config.warmup_epochs, total - 1);

  nn::Network net(model);
  std::int64_t step = 0;
  bool failed = false;
  for (int epoch = 0; epoch < config.epochs && !failed; ++epoch) {
    loaders.train.begin_epoch(epoch);
    Batch b;
    double loss_sum = 0.0;
    std::int64_t seen = 0;
    while (loaders.train.next(b)) {
      for (auto& g : grads) std::fill(g.data.begin(), g.data.end(), 0.0f);
      const Tensor logits = net.forward(b.images, true);
      Tensor dlogits;
      const double loss = nn::cross_entropy(logits, b.labels, config.label_smoothing, &dlogits);
      if (!std::isfinite(loss)) {
        failed = true;
        rec.status = "failed";
        rec.error = "nan-loss: non-finite loss at epoch " + std::to_string(epoch + 1) + " step " +
                    std::to_string(step);
        log(rec.error);
        break;
      }
      net.backward(dlogits, grads, trainable);
      const double lr = scheduled_lr(config.lr, step, total, warmup);
      ++step;
      if (config.optimizer == OptimizerKind::adamw) {
        const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
        const auto b1 = static_cast<float>(config.beta1), b2 = static_cast<float>(config.beta2);
        const auto step_size = static_cast<float>(lr / bc1);
        const auto inv_bc2 = static_cast<float>(1.0 / bc2);
        const auto eps = static_cast<float>(config.adam_eps);
        for (std::size_t i = 0; i < np; ++i) {
          if (!trainable[i]) continue;
          auto& p = model.params.value(i).data;
          const auto& g = grads[i].data;
          auto& m = m1[i].data;
          auto& v = m2[i].data;
          const float shrink = decay[i] ? static_cast<float>(1.0 - lr * config.weight_decay) : 1.0f;
          for (std::size_t t = 0; t < p.size(); ++t) {
            m[t] = b1 * m[t] + (1.0f - b1) * g[t];
            v[t] = b2 * v[t] + (1.0f - b2) * g[t] * g[t];
            p[t] = p[t] * shrink - step_size * m[t] / (std::sqrt(v[t] * inv_bc2) + eps);
          }
        }
      } else {
        const auto mu = static_cast<float>(config.momentum);
        const auto lrf = static_cast<float>(lr);
        const auto wd = static_cast<float>(config.weight_decay);
        for (std::size_t i = 0; i < np; ++i) {
          if (!trainable[i]) continue;
          auto& p = model.params.value(i).data;
          const auto& g = grads[i].data;
          auto& buf = m1[i].data;
          for (std::size_t t = 0; t < p.size(); ++t) {
            const float gt = g[t] + (decay[i] ? wd * p[t] : 0.0f);
            buf[t] = mu * buf[t] + gt;
            p[t] -= lrf * buf[t];
          }
        }
      }
      if (options.after_step) options.after_step(model, step);
      loss_sum += loss * static_cast<double>(b.labels.size());
      seen += static_cast<std::int64_t>(b.labels.size());
    }
    if (failed) break;
    if (options.verify_each_epoch && !mask.empty()) {
      const FreezeReport rep = verify_frozen(mask, model);
      if (!rep.pass) {
        std::string names;
        for (const auto& n : rep.differing()) names += " " + n;
        throw Error(ErrorKind::mask_violation, "after epoch " + std::to_string(epoch + 1) + ":" + names);
      }
    }
    const double acc = evaluate(model, data, data.test, std::max(config.batch, 256));
    rec.per_epoch.push_back({epoch + 1, loss_sum / static_cast<double>(std::max<std::int64_t>(seen, 1)), acc});
    std::ostringstream os;
    os.precision(4);
    os << rec.arch << " on " << rec.dataset << " epoch " << epoch + 1 << "/" << config.epochs << " loss "
       << rec.per_epoch.back().train_loss << " acc " << acc;
    log(os.str());
  }

  const FreezeReport rep = verify_frozen(mask, model);
  if (!rep.pass) {
    std::string names;
    for (const auto& n : rep.differing()) names += " " + n;
    throw Error(ErrorKind::mask_violation, "frozen parameters changed:" + names);
  }
  rec.frozen_verified = true;
  rec.final_acc = rec.per_epoch.empty() ? 0.0 : rec.per_epoch.back().test_acc;
  rec.params_digest = params_digest(model.params);
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return rec;
}

}  // namespace fg
