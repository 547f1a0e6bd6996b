#include <chrono>
#include <cstdio>
#include <ctime>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "filtergraft/datahub.hpp"
#include "filtergraft/error.hpp"
#include "filtergraft/fsutil.hpp"
#include "filtergraft/paths.hpp"
#include "filtergraft/protocols.hpp"
#include "filtergraft/reportkit.hpp"
#include "filtergraft/surgery.hpp"
#include "filtergraft/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void log_line(const std::string& msg) {
  const std::time_t now = std::time(nullptr);
  char ts[16];
  std::strftime(ts, sizeof ts, "%H:%M:%S", std::localtime(&now));
  std::cerr << "[" << ts << "] " << msg << std::endl;
}

fg::LayerKind kind_from(const std::string& s) {
  if (s == "depthwise") return fg::LayerKind::depthwise;
  if (s == "pointwise") return fg::LayerKind::pointwise;
  throw fg::Error(fg::ErrorKind::invalid_argument, "kind must be depthwise or pointwise, got '" + s + "'");
}

fg::LayerSelector selector_from(const std::string& s) {
  if (s == "first") return fg::LayerSelector::first;
  if (s == "middle") return fg::LayerSelector::middle;
  if (s == "last") return fg::LayerSelector::last;
  throw fg::Error(fg::ErrorKind::invalid_argument, "layer must be first, middle or last");
}

bool kind_matches(const std::string& cli, fg::ExperimentKind k) {
  using K = fg::ExperimentKind;
  if (cli == "reverse") return k == K::reverse_anb;
  if (cli == "crossarch") return k == K::cross_arch || k == K::cross_domain_arch;
  return cli == fg::to_string(k);
}

// Source banks named by a tag's manifest: every completed base run it references.
std::vector<fg::RunRecord> manifest_bases(const fg::ResultStore& store, const std::string& tag) {
  const json m = store.read_manifest(tag);
  std::vector<fg::RunRecord> out;
  for (const auto& id : m.value("records", json::array())) {
    auto rec = store.find(id.get<std::string>());
    if (rec && rec->role == "base" && rec->completed()) out.push_back(*rec);
  }
  return out;
}

fg::FilterBank bank_for(const fg::ResultStore& store, const fg::RunRecord& rec, fg::LayerKind kind) {
  const fs::path dir = store.run_dir(rec.run_id);
  const fs::path cached = dir / (kind == fg::LayerKind::depthwise ? "depthwise.fgb" : "pointwise.fgb");
  if (fs::exists(cached)) return fg::load_bank(cached);
  const fg::ModelHandle model = fg::load_checkpoint(dir);
  fg::Provenance prov{model.spec.name, rec.dataset, rec.run_id, fg::utc_now_iso8601()};
  return kind == fg::LayerKind::depthwise ? fg::extract_depthwise(model, prov) : fg::extract_pointwise(model, prov);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"filtergraft: depthwise filter transfer experiments"};
  app.require_subcommand(1);
  std::string config_root = fg::default_config_root().string();
  std::string data_root = fg::default_data_root().string();
  app.add_option("--configs", config_root, "Config tree (arch/, train/, splits/, experiments/)");
  app.add_option("--data", data_root, "Dataset cache root");

  // extract
  auto* extract = app.add_subcommand("extract", "Extract a filter bank from a checkpoint");
  std::string ckpt, bank_kind = "depthwise", bank_out;
  extract->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
  extract->add_option("--kind", bank_kind, "depthwise or pointwise");
  extract->add_option("--out", bank_out, "Output bank file")->required();

  // verify-backend
  auto* verify = app.add_subcommand("verify-backend", "Compare backend convolutions with the reference");
  int cases = 100;
  std::uint64_t verify_seed = 0;
  verify->add_option("--cases", cases);
  verify->add_option("--seed", verify_seed);

  // data
  auto* data = app.add_subcommand("data", "Dataset cache");
  data->require_subcommand(1);
  auto* fetch = data->add_subcommand("fetch", "Fetch or generate a dataset and verify it");
  auto* split = data->add_subcommand("split", "Show the semantic split of a dataset");
  auto* list = data->add_subcommand("list", "List registered datasets");
  std::string ds_name;
  fetch->add_option("name", ds_name)->required();
  split->add_option("name", ds_name)->required();

  // run
  auto* run = app.add_subcommand("run", "Run an experiment spec");
  std::string run_kind, spec_path, store_dir = "runs";
  int replicates = 0;
  bool verify_each_epoch = false;
  run->add_option("kind", run_kind)
      ->required()
      ->check(CLI::IsMember({"selffer", "anb", "reverse", "matrix", "ablation", "crossarch"}));
  run->add_option("--spec", spec_path, "Experiment spec file or name under configs/experiments/")->required();
  run->add_option("--store", store_dir, "Result store directory");
  run->add_option("--replicates", replicates, "Override the spec's replicate count");
  run->add_flag("--verify-each-epoch", verify_each_epoch, "Check frozen digests after every epoch");

  // report
  auto* report = app.add_subcommand("report", "Render artifacts from a result store");
  std::string report_kind, tag, out_dir = "out", metric = "retention", layer = "all", kind_opt = "depthwise";
  std::vector<std::string> bank_files;
  int rows = 4, cols = 8, k = 8;
  std::uint64_t report_seed = 0;
  bool no_normalize = false, require_complete = false;
  report->add_option("what", report_kind)->required()->check(CLI::IsMember({"matrix", "curve", "grid", "cluster"}));
  report->add_option("--store", store_dir);
  report->add_option("--tag", tag);
  report->add_option("--out", out_dir);
  report->add_option("--metric", metric, "curve: accuracy or retention");
  report->add_option("--layer", layer, "grid: first, middle, last or all");
  report->add_option("--rows", rows);
  report->add_option("--cols", cols);
  report->add_option("--k", k, "cluster count");
  report->add_option("--seed", report_seed);
  report->add_option("--bank", bank_files, "grid/cluster: bank files instead of a tag");
  report->add_option("--kind", kind_opt, "matrix banks: depthwise or pointwise");
  report->add_flag("--no-normalize", no_normalize);
  report->add_flag("--complete", require_complete, "matrix: fail when cells are missing");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*extract) {
      const fg::ModelHandle model = fg::load_checkpoint(ckpt);
      const json meta = fg::checkpoint_meta(ckpt);
      fg::Provenance prov{model.spec.name, meta.value("dataset", "unknown"), meta.value("run_id", fs::path(ckpt).filename().string()),
                          fg::utc_now_iso8601()};
      const auto kind = kind_from(bank_kind);
      const fg::FilterBank bank =
          kind == fg::LayerKind::depthwise ? fg::extract_depthwise(model, prov) : fg::extract_pointwise(model, prov);
      fg::save_bank(bank, bank_out);
      std::cout << bank_out << ": " << bank.entries.size() << " layers, " << bank.kernel_count() << " kernels\n";
      return 0;
    }
    if (*verify) {
      const auto r = fg::verify_backend(cases, verify_seed);
      std::cout << r.summary() << (r.pass() ? " PASS" : " FAIL") << "\n";
      return r.pass() ? 0 : 1;
    }
    if (*data) {
      if (*list) {
        for (const auto& s : fg::dataset_registry())
          std::cout << s.name << "  classes=" << s.num_classes << " train=" << s.train_size << " test=" << s.test_size
                    << " size=" << s.image_size << " source=" << s.source << "\n";
        return 0;
      }
      if (*fetch) {
        const auto h = fg::load_dataset(ds_name, data_root);
        std::cout << h.spec.name << ": train=" << h.train.size() << " test=" << h.test.size()
                  << " digest=" << h.content_digest << "\n";
        return 0;
      }
      const auto table = fg::load_split_table(ds_name, config_root);
      const auto [a, b] = fg::semantic_split(ds_name, data_root, config_root);
      for (const auto* h : {&a, &b}) {
        std::cout << h->spec.name << ": classes=" << h->num_classes() << " train=" << h->train.size()
                  << " test=" << h->test.size() << "\n  ";
        for (const auto& c : h->spec.class_names) std::cout << c << " ";
        std::cout << "\n";
      }
      return 0;
    }
    if (*run) {
      fs::path path = spec_path;
      if (!fs::exists(path)) path = fs::path(config_root) / "experiments" / (spec_path + ".json");
      fg::ExperimentSpec spec = fg::load_experiment(path, config_root);
      if (!kind_matches(run_kind, spec.kind))
        throw fg::Error(fg::ErrorKind::invalid_spec,
                        "spec kind '" + fg::to_string(spec.kind) + "' does not match command '" + run_kind + "'");
      if (replicates > 0) spec.replicates = replicates;
      fg::ResultStore store(store_dir);
      fg::Orchestrator orch(store, data_root, config_root);
      orch.set_log(log_line);
      orch.set_verify_each_epoch(verify_each_epoch);
      const auto result = orch.run(spec);
      for (const auto& r : result.records) {
        std::printf("%-16s %-10s %-28s acc=%.4f", r.run_id.c_str(), r.role.c_str(), r.dataset.c_str(), r.final_acc);
        if (r.retention) std::printf(" retention=%.4f", *r.retention);
        std::printf(" %s\n", r.completed() ? "" : ("FAILED " + r.error).c_str());
      }
      std::printf("%zu records, %d trained, %d failed\n", result.records.size(), result.trained, result.failed);
      return result.failed > 0 ? 2 : 0;
    }
    if (*report) {
      fg::ResultStore store(store_dir);
      fs::create_directories(out_dir);
      const fs::path out = out_dir;
      if (report_kind == "matrix") {
        const auto table = fg::matrix_table(store, tag, require_complete);
        const std::string text = table.render_text();
        fg::write_text_file_atomic(out / (tag + "_matrix.txt"), text);
        fg::write_text_file_atomic(out / (tag + "_matrix.json"), table.to_json().dump(2));
        std::cout << text;
        return 0;
      }
      if (report_kind == "curve") {
        if (metric != "accuracy" && metric != "retention")
          throw fg::Error(fg::ErrorKind::invalid_argument, "metric must be accuracy or retention");
        const auto m = metric == "accuracy" ? fg::CurveMetric::accuracy : fg::CurveMetric::retention;
        const auto data = fg::curve_plot(store, tag, m, out / (tag + "_" + metric));
        for (const auto& s : data.series) {
          std::cout << s.name << ":";
          for (const auto& [n, v] : s.points) std::printf(" n=%d:%.4f", n, v);
          std::cout << "\n";
        }
        return 0;
      }
      std::vector<std::pair<std::string, fg::FilterBank>> banks;
      for (const auto& f : bank_files) banks.emplace_back(fs::path(f).stem().string(), fg::load_bank(f));
      if (bank_files.empty()) {
        if (tag.empty()) throw fg::Error(fg::ErrorKind::invalid_argument, "--tag or --bank is required");
        for (const auto& rec : manifest_bases(store, tag))
          banks.emplace_back(rec.run_id, bank_for(store, rec, fg::LayerKind::depthwise));
        if (banks.empty()) throw fg::Error(fg::ErrorKind::no_records, "no completed base runs for tag '" + tag + "'");
      }
      if (report_kind == "grid") {
        const std::vector<std::string> layers =
            layer == "all" ? std::vector<std::string>{"first", "middle", "last"} : std::vector<std::string>{layer};
        for (const auto& [name, bank] : banks) {
          for (const auto& l : layers) {
            const int id = fg::select_layer(bank, selector_from(l));
            const fs::path png = out / (name + "_" + l + ".png");
            fg::filter_grid(bank, id, rows, cols, !no_normalize, report_seed, png);
            std::cout << png.string() << " (layer " << id << ")\n";
          }
        }
        return 0;
      }
      std::vector<fg::FilterBank> only;
      for (auto& [_, b] : banks) only.push_back(b);
      const auto rep = fg::cluster_filters(only, k, report_seed);
      json j = rep.to_json();
      json names = json::array();
      for (const auto& [name, _] : banks) names.push_back(name);
      j["banks"] = names;
      const fs::path path = out / ((tag.empty() ? std::string("banks") : tag) + "_clusters.json");
      fg::write_text_file_atomic(path, j.dump(2));
      std::printf("k=%d kernels=%zu excluded=%zu inertia=%.4f -> %s\n", rep.k, rep.kernels.size(), rep.excluded.size(),
                  rep.inertia, path.string().c_str());
      for (const auto& [l, counts] : rep.per_layer_histogram) {
        std::printf("layer %2d:", l);
        for (int c : counts) std::printf(" %4d", c);
        std::printf("\n");
      }
      return 0;
    }
  } catch (const fg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
