#include "filtergraft/protocols.hpp"

#include <algorithm>
#include <set>

#include "filtergraft/datahub.hpp"
#include "filtergraft/digest.hpp"
#include "filtergraft/error.hpp"
#include "filtergraft/fsutil.hpp"
#include "filtergraft/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fg {

std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::selffer: return "selffer";
    case ExperimentKind::anb: return "anb";
    case ExperimentKind::reverse_anb: return "reverse_anb";
    case ExperimentKind::matrix: return "matrix";
    case ExperimentKind::ablation: return "ablation";
    case ExperimentKind::cross_arch: return "cross_arch";
    case ExperimentKind::cross_domain_arch: return "cross_domain_arch";
  }
  return "selffer";
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
  for (auto k : {ExperimentKind::selffer, ExperimentKind::anb, ExperimentKind::reverse_anb, ExperimentKind::matrix,
                 ExperimentKind::ablation, ExperimentKind::cross_arch, ExperimentKind::cross_domain_arch}) {
    if (to_string(k) == s) return k;
  }
  if (s == "reverse") return ExperimentKind::reverse_anb;
  if (s == "crossarch") return ExperimentKind::cross_arch;
  throw Error(ErrorKind::invalid_spec, "unknown experiment kind '" + s + "'");
}

namespace {

bool needs_source(ExperimentKind k) {
  return k == ExperimentKind::anb || k == ExperimentKind::reverse_anb || k == ExperimentKind::ablation ||
         k == ExperimentKind::cross_arch || k == ExperimentKind::cross_domain_arch;
}

TransferPlan plan_of(TransferMode mode, std::optional<int> depth = std::nullopt, int first = 0) {
  TransferPlan p;
  p.mode = mode;
  p.depth_n = depth;
  p.first_layer = first;
  return p;
}

std::vector<TransferPlan> default_ablation_plans() {
  TransferPlan shuffle = plan_of(TransferMode::shuffle);
  shuffle.rng_seed = 0;
  TransferPlan repeat = plan_of(TransferMode::repeat_first_k);
  repeat.k = 3;
  return {plan_of(TransferMode::layerwise), shuffle, repeat};
}

std::string ablation_label(const TransferPlan& p) {
  switch (p.mode) {
    case TransferMode::layerwise:
    case TransferMode::pointwise_layerwise: return "transferred";
    case TransferMode::shuffle: return "shuffle";
    case TransferMode::repeat_first_k: return "repeat_first_" + std::to_string(p.k);
    case TransferMode::stack: return "stack";
  }
  return "transferred";
}

Endpoint endpoint_from_json(const json& j) {
  return Endpoint{j.at("arch").get<std::string>(), j.at("dataset").get<std::string>()};
}

json to_json(const Endpoint& e) { return json{{"arch", e.arch}, {"dataset", e.dataset}}; }

}  // namespace

void ExperimentSpec::validate() const {
  auto bad = [this](const std::string& m) { throw Error(ErrorKind::invalid_spec, "experiment '" + tag + "': " + m); };
  if (tag.empty()) bad("tag is required");
  for (char c : tag)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) bad("tag has '" + std::string(1, c) + "'");
  if (replicates < 1) bad("replicates must be >= 1");
  if ((kind == ExperimentKind::anb || kind == ExperimentKind::reverse_anb) && depths.empty())
    bad("depths must be nonempty");
  for (int d : depths)
    if (d < 0) bad("depths must be >= 0");
  if (kind == ExperimentKind::anb)
    for (int d : depths)
      if (d < 1) bad("anb depths start at 1");
  if (needs_source(kind) && !source) bad("source is required for " + to_string(kind));
  if (kind == ExperimentKind::matrix) {
    if (datasets.size() < 2) bad("matrix needs >= 2 datasets");
    if (std::set<std::string>(datasets.begin(), datasets.end()).size() != datasets.size()) bad("duplicate datasets");
  } else if (target.arch.empty() || target.dataset.empty()) {
    bad("target arch and dataset are required");
  }
  if ((kind == ExperimentKind::anb || kind == ExperimentKind::reverse_anb || kind == ExperimentKind::ablation) &&
      source && source->arch != target.arch) {
    bad("layerwise protocols need the same architecture on both sides");
  }
  for (const auto& p : plans) p.validate();
  train.validate();
}

ExperimentSpec experiment_from_json(const json& j, const fs::path& config_root) {
  static const std::set<std::string> known = {"tag", "kind", "source", "target", "arch", "datasets", "depths",
                                              "transfer_kind", "plans", "replicates", "seed", "train",
                                              "train_overrides", "description", "train_ref"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw Error(ErrorKind::invalid_spec, "experiment: unknown key '" + key + "'");
  ExperimentSpec s;
  s.tag = j.at("tag").get<std::string>();
  s.kind = experiment_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("source") && !j["source"].is_null()) s.source = endpoint_from_json(j["source"]);
  if (j.contains("target")) s.target = endpoint_from_json(j["target"]);
  if (j.contains("arch")) s.target.arch = j["arch"].get<std::string>();
  s.datasets = j.value("datasets", std::vector<std::string>{});
  s.depths = j.value("depths", std::vector<int>{});
  const std::string tk = j.value("transfer_kind", "depthwise");
  if (tk != "depthwise" && tk != "pointwise") throw Error(ErrorKind::invalid_spec, "transfer_kind '" + tk + "'");
  s.transfer_kind = tk == "pointwise" ? LayerKind::pointwise : LayerKind::depthwise;
  if (j.contains("plans"))
    for (const auto& p : j["plans"]) s.plans.push_back(plan_from_json(p));
  s.replicates = j.value("replicates", 1);
  s.seed = j.value("seed", std::uint64_t{0});
  json train_j;
  const json train = j.value("train", json("default"));
  if (train.is_string()) {
    s.train_ref = train.get<std::string>();
    train_j = to_json(load_train_config(s.train_ref, config_root));
  } else {
    s.train_ref = "inline";
    train_j = to_json(train_config_from_json(train));
  }
  if (j.contains("train_overrides"))
    for (const auto& [k, v] : j["train_overrides"].items()) train_j[k] = v;
  s.train = train_config_from_json(train_j);
  s.validate();
  return s;
}

ExperimentSpec load_experiment(const fs::path& path, const fs::path& config_root) {
  return experiment_from_json(json::parse(read_text_file(path)), config_root);
}

json to_json(const ExperimentSpec& s) {
  json plans = json::array();
  for (const auto& p : s.plans) plans.push_back(to_json(p));
  return json{{"tag", s.tag},
              {"kind", to_string(s.kind)},
              {"source", s.source ? to_json(*s.source) : json(nullptr)},
              {"target", to_json(s.target)},
              {"datasets", s.datasets},
              {"depths", s.depths},
              {"transfer_kind", s.transfer_kind == LayerKind::depthwise ? "depthwise" : "pointwise"},
              {"plans", plans},
              {"replicates", s.replicates},
              {"seed", s.seed},
              {"train", to_json(s.train)},
              {"train_ref", s.train_ref}};
}

TransferPlan canonical_plan(const TransferPlan& plan, int total_layers) {
  TransferPlan p = plan;
  p.source_bank_ref.clear();
  if (p.depth_n && p.first_layer + *p.depth_n == total_layers) p.depth_n.reset();
  if (p.mode != TransferMode::shuffle) p.rng_seed.reset();
  if (p.mode != TransferMode::repeat_first_k) p.k = 3;
  return p;
}

// --- orchestrator ---------------------------------------------------------------------

Orchestrator::Orchestrator(ResultStore& store, fs::path data_root, fs::path config_root)
    : store_(store), data_root_(std::move(data_root)), config_root_(std::move(config_root)) {}

const DatasetHandle& Orchestrator::dataset(const std::string& ref) {
  for (const auto& [name, h] : datasets_)
    if (name == ref) return *h;
  if (log_) log_("loading dataset " + ref);
  datasets_.emplace_back(ref, std::make_unique<DatasetHandle>(load_dataset_ref(ref, data_root_, config_root_)));
  return *datasets_.back().second;
}

ArchSpec Orchestrator::arch_for(const std::string& arch, const DatasetHandle& data) {
  ArchSpec spec = resolve_arch(arch, config_root_).with_classes(data.num_classes());
  spec.validate();
  return spec;
}

namespace {

std::string identity_digest(json identity) {
  identity["init_scheme"] = kInitScheme;
  return sha256_hex(identity.dump());
}

}  // namespace

RunRecord Orchestrator::ensure_base(const std::string& arch, const std::string& dataset_ref, std::uint64_t seed,
                                    const TrainConfig& cfg) {
  const DatasetHandle& data = dataset(dataset_ref);
  const ArchSpec spec = arch_for(arch, data);
  const json identity = {{"role", "base"},          {"arch", to_json(spec)}, {"dataset", dataset_ref},
                         {"data", data.content_digest}, {"seed", seed},     {"train", to_json(cfg)}};
  const std::string digest = identity_digest(identity);
  if (auto existing = store_.find_by_digest(digest)) {
    if (log_) log_("reuse base " + existing->run_id + " (" + spec.name + " on " + dataset_ref + ")");
    return *existing;
  }
  if (log_) log_("train base " + spec.name + " on " + dataset_ref + " seed " + std::to_string(seed));
  ModelHandle model = build_model(spec, seed);
  TrainOptions opts;
  opts.log = log_;
  RunRecord rec = train(model, data, cfg, opts);
  ++trained_;
  rec.role = "base";
  rec.dataset = dataset_ref;
  rec.config_digest = digest;
  rec.run_id = run_id_for_digest(digest);
  if (rec.completed()) save_checkpoint(model, store_.run_dir(rec.run_id), json{{"run_id", rec.run_id}});
  store_.append(rec);
  return rec;
}

FilterBank Orchestrator::source_bank(const RunRecord& base, LayerKind kind) {
  if (!base.completed())
    throw Error(ErrorKind::invalid_argument, "run " + base.run_id + " failed; no filters can be extracted from it");
  const fs::path dir = store_.run_dir(base.run_id);
  const fs::path bank_path = dir / (kind == LayerKind::depthwise ? "depthwise.fgb" : "pointwise.fgb");
  if (fs::exists(bank_path)) return load_bank(bank_path);
  if (!fs::exists(dir / "model.json"))
    throw Error(ErrorKind::io_failure, "checkpoint for run " + base.run_id + " missing under " + dir.string());
  const ModelHandle model = load_checkpoint(dir);
  if (params_digest(model.params) != base.params_digest)
    throw Error(ErrorKind::digest_mismatch, "checkpoint of run " + base.run_id + " does not match its record");
  Provenance prov{model.spec.name, base.dataset, base.run_id, utc_now_iso8601()};
  FilterBank bank = kind == LayerKind::depthwise ? extract_depthwise(model, prov) : extract_pointwise(model, prov);
  save_bank(bank, bank_path);
  return load_bank(bank_path);
}

RunRecord Orchestrator::ensure_transfer(const std::string& role, const std::string& arch,
                                        const std::string& dataset_ref, std::uint64_t seed, const TrainConfig& cfg,
                                        const RunRecord& source_base, LayerKind kind, const TransferPlan& plan_in,
                                        const RunRecord& baseline) {
  const DatasetHandle& data = dataset(dataset_ref);
  const ArchSpec spec = arch_for(arch, data);
  ModelHandle model = build_model(spec, seed);
  const int total = static_cast<int>(kind == LayerKind::depthwise ? depthwise_layers(model).size()
                                                                  : pointwise_layers(model).size());
  TransferPlan plan = canonical_plan(plan_in, total);
  const json identity = {{"role", "transfer"},
                         {"arch", to_json(spec)},
                         {"dataset", dataset_ref},
                         {"data", data.content_digest},
                         {"seed", seed},
                         {"train", to_json(cfg)},
                         {"transfer_kind", kind == LayerKind::depthwise ? "depthwise" : "pointwise"},
                         {"plan", to_json(plan)},
                         {"source_run", source_base.run_id}};
  const std::string digest = identity_digest(identity);
  if (auto existing = store_.find_by_digest(digest)) {
    if (log_) log_("reuse " + role + " " + existing->run_id);
    return *existing;
  }
  const FilterBank bank = source_bank(source_base, kind);
  plan.source_bank_ref = bank.provenance.key();
  TransplantResult tr = transplant(model, bank, plan);
  if (log_) {
    log_("train " + role + " " + spec.name + " on " + dataset_ref + " from " + bank.provenance.key() + " (" +
         to_string(plan.mode) + ", depth " + (plan.depth_n ? std::to_string(*plan.depth_n) : std::string("ALL")) +
         ", first " + std::to_string(plan.first_layer) + ")");
  }
  TrainOptions opts;
  opts.log = log_;
  opts.mask = &tr.mask;
  opts.verify_each_epoch = verify_each_epoch_;
  opts.after_step = after_step_;
  RunRecord rec = train(tr.model, data, cfg, opts);
  ++trained_;
  rec.role = "transfer";
  rec.dataset = dataset_ref;
  rec.config_digest = digest;
  rec.run_id = run_id_for_digest(digest);
  rec.plan = summarize(plan, kind, bank.provenance);
  if (baseline.completed() && baseline.final_acc > 0.0) {
    rec.baseline_ref = baseline.run_id;
    rec.retention = retention(rec.final_acc, baseline.final_acc);
  }
  rec.extra = json{{"source_run", source_base.run_id},
                   {"source_arch", source_base.arch},
                   {"source_dataset", source_base.dataset},
                   {"consumed", tr.consumed},
                   {"resized", tr.resized},
                   {"first_purpose", role}};
  if (rec.completed()) save_checkpoint(tr.model, store_.run_dir(rec.run_id), json{{"run_id", rec.run_id}});
  store_.append(rec);
  return rec;
}

ProtocolResult Orchestrator::run(const ExperimentSpec& spec) {
  spec.validate();
  ProtocolResult out;
  const int trained_before = trained_;
  std::set<std::string> seen;
  auto keep = [&](const RunRecord& r) {
    if (seen.insert(r.run_id).second) {
      out.records.push_back(r);
      if (!r.completed()) ++out.failed;
    }
    return r;
  };
  json manifest = {{"tag", spec.tag}, {"kind", to_string(spec.kind)}, {"spec", to_json(spec)}};
  const LayerKind kind = spec.transfer_kind;
  const TransferMode all_mode = kind == LayerKind::depthwise ? TransferMode::layerwise : TransferMode::pointwise_layerwise;

  for (int r = 0; r < spec.replicates; ++r) {
    const std::uint64_t seed = r == 0 ? spec.seed : derive_seed(spec.seed, static_cast<std::uint64_t>(r));
    TrainConfig cfg = spec.train;
    if (r > 0) cfg.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(r));
    const Endpoint& tgt = spec.target;

    switch (spec.kind) {
      case ExperimentKind::selffer: {
        const RunRecord base = keep(ensure_base(tgt.arch, tgt.dataset, seed, cfg));
        const RunRecord self = keep(ensure_transfer("selffer", tgt.arch, tgt.dataset, seed, cfg, base, kind,
                                                    plan_of(all_mode), base));
        manifest["runs"]["base"].push_back(base.run_id);
        manifest["runs"]["selffer"].push_back(self.run_id);
        break;
      }
      case ExperimentKind::anb:
      case ExperimentKind::reverse_anb: {
        const bool reverse = spec.kind == ExperimentKind::reverse_anb;
        const RunRecord base_a = keep(ensure_base(spec.source->arch, spec.source->dataset, seed, cfg));
        const RunRecord base_b = keep(ensure_base(tgt.arch, tgt.dataset, seed, cfg));
        manifest["bases"]["source"].push_back(base_a.run_id);
        manifest["bases"]["target"].push_back(base_b.run_id);
        const std::string a_name = reverse ? "AnB_reverse" : "AnB", b_name = reverse ? "BnB_reverse" : "BnB";
        for (int n : spec.depths) {
          const TransferPlan plan = reverse ? plan_of(all_mode, std::nullopt, n) : plan_of(all_mode, n);
          const RunRecord anb = keep(ensure_transfer(a_name, tgt.arch, tgt.dataset, seed, cfg, base_a, kind, plan, base_b));
          const RunRecord bnb = keep(ensure_transfer(b_name, tgt.arch, tgt.dataset, seed, cfg, base_b, kind, plan, base_b));
          manifest["series"][a_name].push_back({{"depth", n}, {"run_id", anb.run_id}, {"replicate", r}});
          manifest["series"][b_name].push_back({{"depth", n}, {"run_id", bnb.run_id}, {"replicate", r}});
        }
        break;
      }
      case ExperimentKind::matrix: {
        std::map<std::string, RunRecord> bases;
        for (const auto& ds : spec.datasets) {
          bases.emplace(ds, keep(ensure_base(tgt.arch, ds, seed, cfg)));
          manifest["bases"].push_back({{"dataset", ds}, {"run_id", bases.at(ds).run_id}, {"replicate", r}});
          manifest["train_sizes"][ds] = dataset(ds).train.size();
        }
        for (const auto& t : spec.datasets) {
          for (const auto& s : spec.datasets) {
            const RunRecord cell = keep(ensure_transfer("matrix", tgt.arch, t, seed, cfg, bases.at(s), kind,
                                                        plan_of(all_mode), bases.at(t)));
            manifest["cells"].push_back({{"source", s}, {"target", t}, {"run_id", cell.run_id}, {"replicate", r}});
          }
        }
        manifest["datasets"] = spec.datasets;
        manifest["transfer_kind"] = kind == LayerKind::depthwise ? "depthwise" : "pointwise";
        break;
      }
      case ExperimentKind::ablation: {
        const RunRecord base_a = keep(ensure_base(spec.source->arch, spec.source->dataset, seed, cfg));
        const RunRecord base_b = keep(ensure_base(tgt.arch, tgt.dataset, seed, cfg));
        const RunRecord self = keep(ensure_transfer("selffer", tgt.arch, tgt.dataset, seed, cfg, base_b, kind,
                                                    plan_of(all_mode), base_b));
        manifest["runs"]["source_base"].push_back(base_a.run_id);
        manifest["runs"]["base"].push_back(base_b.run_id);
        manifest["runs"]["selffer"].push_back(self.run_id);
        const auto plans = spec.plans.empty() ? default_ablation_plans() : spec.plans;
        for (const auto& p : plans) {
          const std::string label = ablation_label(p);
          const RunRecord rec = keep(ensure_transfer(label, tgt.arch, tgt.dataset, seed, cfg, base_a, kind, p, base_b));
          manifest["runs"][label].push_back(rec.run_id);
        }
        break;
      }
      case ExperimentKind::cross_arch:
      case ExperimentKind::cross_domain_arch: {
        const RunRecord base_s = keep(ensure_base(spec.source->arch, spec.source->dataset, seed, cfg));
        const RunRecord base_t = keep(ensure_base(tgt.arch, tgt.dataset, seed, cfg));
        const RunRecord self_t = keep(ensure_transfer("selffer", tgt.arch, tgt.dataset, seed, cfg, base_t, kind,
                                                      plan_of(all_mode), base_t));
        manifest["runs"]["source_base"].push_back(base_s.run_id);
        manifest["runs"]["target_base"].push_back(base_t.run_id);
        manifest["runs"]["target_selffer"].push_back(self_t.run_id);
        const auto plans = spec.plans.empty() ? std::vector<TransferPlan>{plan_of(TransferMode::stack)} : spec.plans;
        for (const auto& p : plans) {
          const RunRecord rec =
              keep(ensure_transfer(to_string(spec.kind), tgt.arch, tgt.dataset, seed, cfg, base_s, kind, p, base_t));
          manifest["runs"]["transfer"].push_back(rec.run_id);
        }
        break;
      }
    }
  }
  json ids = json::array();
  for (const auto& r : out.records) ids.push_back(r.run_id);
  manifest["records"] = ids;
  store_.write_manifest(spec.tag, manifest);
  out.manifest = manifest;
  out.trained = trained_ - trained_before;
  return out;
}

}  // namespace fg
