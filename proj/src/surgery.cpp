#include "filtergraft/surgery.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <numeric>

#include "filtergraft/archive.hpp"
#include "filtergraft/digest.hpp"
#include "filtergraft/error.hpp"
#include "filtergraft/rng.hpp"

namespace fg {

std::string utc_now_iso8601() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// --- banks ---------------------------------------------------------------------

void FilterBank::validate() const {
  if (provenance.arch_name.empty() || provenance.dataset_name.empty() || provenance.run_id.empty() ||
      provenance.extraction_time.empty()) {
    throw Error(ErrorKind::invalid_argument, "filter bank provenance fields must be nonempty");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (i > 0 && e.layer_id <= entries[i - 1].layer_id) {
      throw Error(ErrorKind::invalid_argument, "filter bank entries out of canonical order");
    }
    const std::size_t want_rank = kind == LayerKind::depthwise ? 3 : 2;
    if (e.kernels.rank() != want_rank) {
      throw Error(ErrorKind::shape_mismatch, "bank entry " + std::to_string(e.layer_id) + " has shape " +
                                                 shape_str(e.kernels.shape));
    }
    if (e.bias.size() != 0 && e.bias.size() != e.kernels.dim(0)) {
      throw Error(ErrorKind::shape_mismatch, "bank entry " + std::to_string(e.layer_id) + " bias length");
    }
  }
}

std::int64_t FilterBank::kernel_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries) n += e.kernels.dim(0);
  return n;
}

namespace {

FilterBank extract(const ModelHandle& model, LayerKind kind, Provenance prov) {
  if (prov.arch_name.empty()) prov.arch_name = model.spec.name;
  if (prov.dataset_name.empty()) prov.dataset_name = "none";
  if (prov.run_id.empty()) prov.run_id = "seed-" + std::to_string(model.seed);
  if (prov.extraction_time.empty()) prov.extraction_time = utc_now_iso8601();
  FilterBank bank;
  bank.kind = kind;
  bank.provenance = std::move(prov);
  for (const auto* e : layer_entries(model, kind)) {
    bank.entries.push_back({e->layer_id, model.params.at(e->weight), model.params.at(e->bias)});
  }
  return bank;
}

}  // namespace

FilterBank extract_depthwise(const ModelHandle& model, Provenance provenance) {
  return extract(model, LayerKind::depthwise, std::move(provenance));
}

FilterBank extract_pointwise(const ModelHandle& model, Provenance provenance) {
  return extract(model, LayerKind::pointwise, std::move(provenance));
}

std::pair<int, int> FlatStack::origin(std::int64_t i) const {
  for (const auto& b : boundaries) {
    if (i >= b.start && i < b.start + b.count) return {b.layer_id, static_cast<int>(i - b.start)};
  }
  throw Error(ErrorKind::invalid_argument, "stack index " + std::to_string(i) + " out of range");
}

FlatStack flatten_stack(const FilterBank& bank) {
  if (bank.kind != LayerKind::depthwise) {
    throw Error(ErrorKind::invalid_argument, "flatten_stack requires a depthwise bank");
  }
  FlatStack fs;
  for (const auto& e : bank.entries) {
    const std::int64_t c = e.kernels.dim(0), kh = e.kernels.dim(1), kw = e.kernels.dim(2);
    if (fs.boundaries.empty()) {
      fs.kh = kh;
      fs.kw = kw;
    } else if (kh != fs.kh || kw != fs.kw) {
      throw Error(ErrorKind::heterogeneous_kernel_size,
                  "layer " + std::to_string(e.layer_id) + " has " + std::to_string(kh) + "x" + std::to_string(kw) +
                      " kernels, stack holds " + std::to_string(fs.kh) + "x" + std::to_string(fs.kw));
    }
    fs.boundaries.push_back({e.layer_id, fs.size(), c});
    fs.kernels.insert(fs.kernels.end(), e.kernels.data.begin(), e.kernels.data.end());
    if (e.bias.size() == c) {
      fs.biases.insert(fs.biases.end(), e.bias.data.begin(), e.bias.data.end());
    } else {
      fs.biases.insert(fs.biases.end(), static_cast<std::size_t>(c), 0.0f);
    }
  }
  return fs;
}

// --- plans ---------------------------------------------------------------------

std::string to_string(TransferMode mode) {
  switch (mode) {
    case TransferMode::layerwise: return "layerwise";
    case TransferMode::stack: return "stack";
    case TransferMode::shuffle: return "shuffle";
    case TransferMode::repeat_first_k: return "repeat_first_k";
    case TransferMode::pointwise_layerwise: return "pointwise_layerwise";
  }
  return "unknown";
}

TransferMode transfer_mode_from_string(const std::string& s) {
  for (auto m : {TransferMode::layerwise, TransferMode::stack, TransferMode::shuffle, TransferMode::repeat_first_k,
                 TransferMode::pointwise_layerwise}) {
    if (to_string(m) == s) return m;
  }
  throw Error(ErrorKind::invalid_argument, "unknown transfer mode '" + s + "'");
}

void TransferPlan::validate() const {
  if (depth_n && *depth_n < 0) throw Error(ErrorKind::invalid_argument, "depth_n must be >= 0");
  if (first_layer < 0) throw Error(ErrorKind::invalid_argument, "first_layer must be >= 0");
  if (mode == TransferMode::repeat_first_k && k < 1) {
    throw Error(ErrorKind::invalid_argument, "repeat_first_k requires k >= 1");
  }
  if ((mode == TransferMode::shuffle) != rng_seed.has_value()) {
    throw Error(ErrorKind::invalid_argument, "rng_seed must be set exactly when mode is shuffle");
  }
}

nlohmann::json to_json(const TransferPlan& plan) {
  nlohmann::json j = {{"mode", to_string(plan.mode)},
                      {"depth_n", plan.depth_n ? nlohmann::json(*plan.depth_n) : nlohmann::json("ALL")},
                      {"first_layer", plan.first_layer},
                      {"freeze", plan.freeze},
                      {"source_bank_ref", plan.source_bank_ref}};
  if (plan.mode == TransferMode::repeat_first_k) j["k"] = plan.k;
  if (plan.rng_seed) j["rng_seed"] = *plan.rng_seed;
  if (plan.allow_resize) j["allow_resize"] = true;
  return j;
}

TransferPlan plan_from_json(const nlohmann::json& j) {
  TransferPlan p;
  p.mode = transfer_mode_from_string(j.at("mode").get<std::string>());
  if (j.contains("depth_n") && !j["depth_n"].is_string()) p.depth_n = j["depth_n"].get<int>();
  p.first_layer = j.value("first_layer", 0);
  p.k = j.value("k", 3);
  p.freeze = j.value("freeze", true);
  if (j.contains("rng_seed")) p.rng_seed = j["rng_seed"].get<std::uint64_t>();
  p.source_bank_ref = j.value("source_bank_ref", std::string());
  p.allow_resize = j.value("allow_resize", false);
  p.validate();
  return p;
}

// --- transplant ------------------------------------------------------------------

namespace {

// Bilinear resampling with aligned corners.
void resize_kernel(const float* src, std::int64_t sh, std::int64_t sw, float* dst, std::int64_t th,
                   std::int64_t tw) {
  for (std::int64_t y = 0; y < th; ++y) {
    const double fy = th > 1 ? static_cast<double>(y) * (sh - 1) / (th - 1) : (sh - 1) / 2.0;
    const auto y0 = static_cast<std::int64_t>(std::floor(fy));
    const std::int64_t y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (std::int64_t x = 0; x < tw; ++x) {
      const double fx = tw > 1 ? static_cast<double>(x) * (sw - 1) / (tw - 1) : (sw - 1) / 2.0;
      const auto x0 = static_cast<std::int64_t>(std::floor(fx));
      const std::int64_t x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      const double v = (1 - wy) * ((1 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1]) +
                       wy * ((1 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1]);
      dst[y * tw + x] = static_cast<float>(v);
    }
  }
}

struct FillRange {
  int begin;
  int end;
};

FillRange fill_range(const TransferPlan& plan, int total, const char* what) {
  if (plan.first_layer > total) {
    throw Error(ErrorKind::invalid_argument, "first_layer " + std::to_string(plan.first_layer) + " exceeds " +
                                                 std::to_string(total) + " target " + what + " layers");
  }
  const int n = plan.depth_n.value_or(total - plan.first_layer);
  if (plan.first_layer + n > total) {
    throw Error(ErrorKind::invalid_argument, "depth_n " + std::to_string(n) + " exceeds " + std::to_string(total) +
                                                 " target " + what + " layers");
  }
  return {plan.first_layer, plan.first_layer + n};
}

const BankEntry& source_entry(const FilterBank& bank, int layer_id) {
  for (const auto& e : bank.entries)
    if (e.layer_id == layer_id) return e;
  throw Error(ErrorKind::layer_shape_mismatch, "source bank has no layer " + std::to_string(layer_id));
}

}  // namespace

TransplantResult transplant(const ModelHandle& target, const FilterBank& bank, const TransferPlan& plan) {
  plan.validate();
  bank.validate();
  TransplantResult out;
  out.model = target;
  auto& P = out.model.params;
  std::vector<std::string> filled;

  if (plan.mode == TransferMode::pointwise_layerwise) {
    if (bank.kind != LayerKind::pointwise) {
      throw Error(ErrorKind::invalid_argument, "pointwise_layerwise requires a pointwise bank");
    }
    const auto entries = layer_entries(out.model, LayerKind::pointwise);
    const auto range = fill_range(plan, static_cast<int>(entries.size()), "pointwise");
    for (int i = range.begin; i < range.end; ++i) {
      const LayerEntry& te = *entries[i];
      const BankEntry& src = source_entry(bank, i);
      if (src.kernels.shape != te.shape) {
        throw Error(ErrorKind::layer_shape_mismatch, "pointwise layer " + std::to_string(i) + ": source " +
                                                         shape_str(src.kernels.shape) + " vs target " +
                                                         shape_str(te.shape));
      }
      P.at(te.weight) = src.kernels;
      P.at(te.bias) = src.bias;
      for (int row = 0; row < te.shape[0]; ++row) out.provenance_map.push_back({i, row, i, row});
      filled.push_back(te.weight);
      filled.push_back(te.bias);
      ++out.consumed;
    }
  } else {
    if (bank.kind != LayerKind::depthwise) {
      throw Error(ErrorKind::invalid_argument, to_string(plan.mode) + " requires a depthwise bank");
    }
    const auto entries = layer_entries(out.model, LayerKind::depthwise);
    const auto range = fill_range(plan, static_cast<int>(entries.size()), "depthwise");

    auto check_kernel = [&](std::int64_t sh, std::int64_t sw, const LayerEntry& te) {
      if (sh == te.shape[1] && sw == te.shape[2]) return false;
      if (!plan.allow_resize) {
        throw Error(ErrorKind::kernel_size_mismatch,
                    "source " + std::to_string(sh) + "x" + std::to_string(sw) + " vs target layer " +
                        std::to_string(te.layer_id) + " " + std::to_string(te.shape[1]) + "x" +
                        std::to_string(te.shape[2]));
      }
      return true;
    };

    // Writes one source kernel (sh x sw) into target channel c of layer te.
    auto put = [&](const LayerEntry& te, int c, const float* k, std::int64_t sh, std::int64_t sw, float bias) {
      Tensor& w = P.at(te.weight);
      const std::int64_t th = te.shape[1], tw = te.shape[2];
      float* dst = w.ptr() + c * th * tw;
      if (sh == th && sw == tw) {
        std::copy_n(k, th * tw, dst);
      } else {
        resize_kernel(k, sh, sw, dst, th, tw);
        out.resized = true;
      }
      P.at(te.bias).data[c] = bias;
    };

    if (plan.mode == TransferMode::layerwise) {
      for (int i = range.begin; i < range.end; ++i) {
        const LayerEntry& te = *entries[i];
        const BankEntry& src = source_entry(bank, i);
        const std::int64_t sh = src.kernels.dim(1), sw = src.kernels.dim(2);
        check_kernel(sh, sw, te);
        if (src.kernels.dim(0) != te.shape[0]) {
          throw Error(ErrorKind::layer_shape_mismatch, "depthwise layer " + std::to_string(i) + ": source has " +
                                                           std::to_string(src.kernels.dim(0)) +
                                                           " channels, target " + std::to_string(te.shape[0]));
        }
        for (int c = 0; c < te.shape[0]; ++c) {
          const float b = src.bias.size() ? src.bias.data[c] : 0.0f;
          put(te, c, src.kernels.ptr() + c * sh * sw, sh, sw, b);
          out.provenance_map.push_back({i, c, i, c});
          ++out.consumed;
        }
        filled.push_back(te.weight);
        filled.push_back(te.bias);
      }
    } else {
      FlatStack fs;
      if (plan.mode == TransferMode::repeat_first_k) {
        if (plan.k > static_cast<int>(bank.entries.size())) {
          throw Error(ErrorKind::invalid_argument, "k = " + std::to_string(plan.k) + " exceeds " +
                                                       std::to_string(bank.entries.size()) + " source layers");
        }
        FilterBank head = bank;
        head.entries.resize(static_cast<std::size_t>(plan.k));
        fs = flatten_stack(head);
      } else {
        fs = flatten_stack(bank);
      }
      std::int64_t demand = 0;
      for (int i = range.begin; i < range.end; ++i) demand += entries[i]->shape[0];
      const std::int64_t supply = fs.size();
      if (plan.mode != TransferMode::repeat_first_k && supply < demand) {
        throw Error(ErrorKind::insufficient_stack,
                    "supply " + std::to_string(supply) + " kernels < demand " + std::to_string(demand));
      }
      if (supply == 0 && demand > 0) throw Error(ErrorKind::insufficient_stack, "empty source stack");
      std::vector<std::size_t> order;
      if (plan.mode == TransferMode::shuffle) {
        order = permutation(static_cast<std::size_t>(supply), *plan.rng_seed);
      } else {
        order.resize(static_cast<std::size_t>(supply));
        std::iota(order.begin(), order.end(), std::size_t{0});
      }
      std::int64_t cursor = 0;
      for (int i = range.begin; i < range.end; ++i) {
        const LayerEntry& te = *entries[i];
        check_kernel(fs.kh, fs.kw, te);
        for (int c = 0; c < te.shape[0]; ++c) {
          const auto slot = static_cast<std::int64_t>(order[static_cast<std::size_t>(cursor % supply)]);
          put(te, c, fs.kernel(slot), fs.kh, fs.kw, fs.biases[slot]);
          const auto [sl, sc] = fs.origin(slot);
          out.provenance_map.push_back({i, c, sl, sc});
          ++cursor;
        }
        filled.push_back(te.weight);
        filled.push_back(te.bias);
      }
      out.consumed = std::min(cursor, supply);
    }
  }

  if (plan.freeze) out.mask = make_mask(out.model, filled);
  return out;
}

FreezeMask make_mask(const ModelHandle& model, const std::vector<std::string>& names) {
  FreezeMask mask;
  for (const auto& n : names) {
    mask.frozen_param_names.insert(n);
    mask.checksum_before[n] = tensor_digest(model.params.at(n));
  }
  return mask;
}

std::vector<std::string> FreezeReport::differing() const {
  std::vector<std::string> out;
  for (const auto& i : items)
    if (!i.equal) out.push_back(i.name);
  return out;
}

FreezeReport verify_frozen(const FreezeMask& mask, const ModelHandle& model) {
  FreezeReport r;
  for (const auto& name : mask.frozen_param_names) {
    if (!model.params.contains(name)) throw Error(ErrorKind::unknown_parameter, name);
    const auto it = mask.checksum_before.find(name);
    if (it == mask.checksum_before.end()) throw Error(ErrorKind::unknown_parameter, "no checksum for " + name);
    const std::string actual = tensor_digest(model.params.at(name));
    const bool eq = actual == it->second;
    r.items.push_back({name, it->second, actual, eq});
    r.pass = r.pass && eq;
  }
  return r;
}

// --- files -------------------------------------------------------------------------

namespace {

std::string layer_key(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", id);
  return buf;
}

}  // namespace

void save_bank(const FilterBank& bank, const std::filesystem::path& path) {
  bank.validate();
  std::vector<archive::NamedArray> arrays;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& e : bank.entries) {
    const std::string key = layer_key(e.layer_id);
    arrays.push_back(archive::from_tensor(key, e.kernels));
    arrays.push_back(archive::from_tensor(key + ".bias", e.bias));
    layers.push_back({{"layer_id", e.layer_id},
                      {"name", key},
                      {"shape", e.kernels.shape},
                      {"digest", tensor_digest(e.kernels)},
                      {"bias_digest", tensor_digest(e.bias)}});
  }
  const nlohmann::json meta = {{"format", "filtergraft-bank"},
                               {"version", 1},
                               {"kind", bank.kind == LayerKind::depthwise ? "depthwise" : "pointwise"},
                               {"provenance",
                                {{"arch_name", bank.provenance.arch_name},
                                 {"dataset_name", bank.provenance.dataset_name},
                                 {"run_id", bank.provenance.run_id},
                                 {"extraction_time", bank.provenance.extraction_time}}},
                               {"layers", layers}};
  arrays.push_back(archive::from_text(kBankMetaKey, meta.dump()));
  archive::write_npz(path, arrays);
}

FilterBank load_bank(const std::filesystem::path& path) {
  const auto arrays = archive::read_npz(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(archive::to_text(archive::find(arrays, kBankMetaKey)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format_error, path.string() + ": bad metadata: " + e.what());
  }
  FilterBank bank;
  bank.kind = meta.at("kind") == "depthwise" ? LayerKind::depthwise : LayerKind::pointwise;
  const auto& p = meta.at("provenance");
  bank.provenance = {p.at("arch_name"), p.at("dataset_name"), p.at("run_id"), p.at("extraction_time")};
  for (const auto& l : meta.at("layers")) {
    const std::string key = l.at("name");
    BankEntry e;
    e.layer_id = l.at("layer_id");
    e.kernels = archive::to_tensor(archive::find(arrays, key));
    e.bias = archive::to_tensor(archive::find(arrays, key + ".bias"));
    if (tensor_digest(e.kernels) != l.at("digest").get<std::string>() ||
        tensor_digest(e.bias) != l.at("bias_digest").get<std::string>()) {
      throw Error(ErrorKind::digest_mismatch, path.string() + ": layer " + key);
    }
    bank.entries.push_back(std::move(e));
  }
  bank.validate();
  return bank;
}

void save_checkpoint(const ModelHandle& model, const std::filesystem::path& dir, const nlohmann::json& extra) {
  std::filesystem::create_directories(dir);
  std::vector<archive::NamedArray> arrays;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    arrays.push_back(archive::from_tensor(model.params.names()[i], model.params.value(i)));
  }
  archive::write_npz(dir / "params.npz", arrays);
  nlohmann::json meta = {{"spec", to_json(model.spec)},
                         {"seed", model.seed},
                         {"params_digest", params_digest(model.params)}};
  if (!extra.is_null()) meta["run"] = extra;
  std::ofstream f(dir / "model.json");
  f << meta.dump(2) << '\n';
  if (!f) throw Error(ErrorKind::io_failure, "cannot write " + (dir / "model.json").string());
}

nlohmann::json checkpoint_meta(const std::filesystem::path& dir) {
  std::ifstream f(dir / "model.json");
  if (!f) throw Error(ErrorKind::io_failure, "no checkpoint at " + dir.string());
  return nlohmann::json::parse(f);
}

ModelHandle load_checkpoint(const std::filesystem::path& dir) {
  const auto meta = checkpoint_meta(dir);
  ModelHandle m = build_model(arch_from_json(meta.at("spec")), meta.at("seed").get<std::uint64_t>());
  const auto arrays = archive::read_npz(dir / "params.npz");
  for (const auto& a : arrays) {
    Tensor t = archive::to_tensor(a);
    Tensor& dst = m.params.at(a.name);
    if (dst.shape != t.shape) {
      throw Error(ErrorKind::shape_mismatch, "checkpoint parameter " + a.name + " " + shape_str(t.shape));
    }
    dst = std::move(t);
  }
  if (params_digest(m.params) != meta.at("params_digest").get<std::string>()) {
    throw Error(ErrorKind::digest_mismatch, "checkpoint " + dir.string());
  }
  return m;
}

}  // namespace fg
