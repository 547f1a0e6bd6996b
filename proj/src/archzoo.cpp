#include "filtergraft/archzoo.hpp"

#include <cmath>
#include <fstream>

#include "filtergraft/digest.hpp"
#include "filtergraft/error.hpp"
#include "filtergraft/rng.hpp"

namespace fg {

std::string to_string(BlockKind kind) {
  return kind == BlockKind::standard_ds ? "standard_ds" : "gated_ds";
}

BlockKind block_kind_from_string(const std::string& s) {
  if (s == "standard_ds") return BlockKind::standard_ds;
  if (s == "gated_ds") return BlockKind::gated_ds;
  throw Error(ErrorKind::invalid_spec, "block_kind: unknown value '" + s + "'");
}

void ArchSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw Error(ErrorKind::invalid_spec, field + ": " + why);
  };
  if (name.empty()) fail("name", "must be nonempty");
  if (stages.empty()) fail("stages", "must be nonempty");
  if (stem_patch < 1) fail("stem.patch", "must be >= 1");
  if (stem_channels < 1) fail("stem.channels", "must be > 0");
  if (num_classes < 1) fail("num_classes", "must be >= 1");
  if (input.height < 1 || input.width < 1 || input.channels < 1) fail("input", "dimensions must be positive");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    const std::string at = "stages[" + std::to_string(i) + "]";
    if (st.num_blocks < 1) fail(at + ".blocks", "must be >= 1");
    if (st.channels <= 0) fail(at + ".channels", "must be > 0");
    if (st.dw_kernel < 3 || st.dw_kernel % 2 == 0) fail(at + ".dw_kernel", "must be odd and >= 3");
  }
  // Stem patchify followed by a 2x2 stride-2 downsample per later stage.
  const int reduction = stem_patch << (stages.size() - 1);
  if (input.height % reduction != 0 || input.width % reduction != 0) {
    fail("input", "height and width must be divisible by stem.patch * 2^(stages-1) = " + std::to_string(reduction));
  }
}

int ArchSpec::depthwise_layer_count() const {
  int n = 0;
  for (const auto& s : stages) n += s.num_blocks;
  return n;
}

ArchSpec ArchSpec::with_classes(int classes) const {
  ArchSpec out = *this;
  out.num_classes = classes;
  return out;
}

nlohmann::json to_json(const ArchSpec& spec) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : spec.stages) {
    stages.push_back({{"blocks", s.num_blocks}, {"channels", s.channels}, {"dw_kernel", s.dw_kernel}});
  }
  return {{"name", spec.name},
          {"block_kind", to_string(spec.block_kind)},
          {"stem", {{"patch", spec.stem_patch}, {"channels", spec.stem_channels}}},
          {"stages", stages},
          {"num_classes", spec.num_classes},
          {"input", {{"H", spec.input.height}, {"W", spec.input.width}, {"C", spec.input.channels}}}};
}

ArchSpec arch_from_json(const nlohmann::json& j) {
  ArchSpec spec;
  try {
    spec.name = j.at("name").get<std::string>();
    spec.block_kind = block_kind_from_string(j.value("block_kind", std::string("standard_ds")));
    spec.stem_patch = j.at("stem").at("patch").get<int>();
    spec.stem_channels = j.at("stem").at("channels").get<int>();
    const int default_kernel = j.value("dw_kernel", 7);
    for (const auto& s : j.at("stages")) {
      StageSpec st;
      st.num_blocks = s.at("blocks").get<int>();
      st.channels = s.at("channels").get<int>();
      st.dw_kernel = s.value("dw_kernel", default_kernel);
      spec.stages.push_back(st);
    }
    spec.num_classes = j.value("num_classes", 10);
    if (j.contains("input")) {
      const auto& in = j.at("input");
      spec.input = {in.at("H").get<int>(), in.at("W").get<int>(), in.at("C").get<int>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::invalid_spec, std::string("arch config: ") + e.what());
  }
  spec.validate();
  return spec;
}

ArchSpec load_arch_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io_failure, "cannot open arch config " + path.string());
  try {
    return arch_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::invalid_spec, path.string() + ": " + e.what());
  }
}

namespace {

ArchSpec make_spec(std::string name, BlockKind kind, int stem, std::vector<StageSpec> stages) {
  ArchSpec s;
  s.name = std::move(name);
  s.block_kind = kind;
  s.stem_patch = 4;
  s.stem_channels = stem;
  s.stages = std::move(stages);
  return s;
}

}  // namespace

std::optional<ArchSpec> builtin_arch(const std::string& name) {
  using B = BlockKind;
  if (name == "mini_convnext")
    return make_spec(name, B::standard_ds, 48, {{2, 48, 7}, {2, 96, 7}, {6, 192, 7}, {2, 384, 7}});
  if (name == "mini_gated")
    return make_spec(name, B::gated_ds, 48, {{2, 48, 7}, {2, 96, 7}, {6, 192, 7}, {2, 384, 7}});
  if (name == "mini_convnext_wide")
    return make_spec(name, B::standard_ds, 96, {{2, 96, 7}, {2, 192, 7}, {6, 384, 7}, {2, 768, 7}});
  if (name == "mini_convnext_half")
    return make_spec(name, B::standard_ds, 24, {{2, 24, 7}, {2, 48, 7}, {6, 96, 7}, {2, 192, 7}});
  if (name == "ci_convnext")
    return make_spec(name, B::standard_ds, 16, {{2, 16, 7}, {2, 32, 7}, {6, 64, 7}, {2, 128, 7}});
  if (name == "ci_gated")
    return make_spec(name, B::gated_ds, 16, {{2, 16, 7}, {2, 32, 7}, {6, 64, 7}, {2, 128, 7}});
  return std::nullopt;
}

ArchSpec resolve_arch(const std::string& name_or_path, const std::filesystem::path& config_root) {
  namespace fs = std::filesystem;
  if (name_or_path.ends_with(".json") && fs::exists(name_or_path)) return load_arch_file(name_or_path);
  const fs::path candidate = config_root / "arch" / (name_or_path + ".json");
  if (!config_root.empty() && fs::exists(candidate)) return load_arch_file(candidate);
  if (auto b = builtin_arch(name_or_path)) return *b;
  throw Error(ErrorKind::invalid_spec, "name: unknown architecture '" + name_or_path + "'");
}

// --- ParamMap ----------------------------------------------------------------

void ParamMap::add(std::string name, Tensor value) {
  if (contains(name)) throw Error(ErrorKind::invalid_argument, "duplicate parameter " + name);
  index_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

std::size_t ParamMap::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorKind::unknown_parameter, name);
  return it->second;
}

Tensor& ParamMap::at(const std::string& name) { return values_[index_of(name)]; }
const Tensor& ParamMap::at(const std::string& name) const { return values_[index_of(name)]; }

// --- model construction -----------------------------------------------------

namespace {

// Truncated normal with std 1/sqrt(fan_in); fan_in is every dimension but the first.
Tensor trunc_normal(const Shape& shape, std::uint64_t seed, const std::string& name) {
  Tensor t(shape);
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Rng rng(derive_seed(seed, name));
  for (auto& v : t.data) v = static_cast<float>(rng.truncated_normal() * std);
  return t;
}

struct Builder {
  ModelHandle& m;
  std::uint64_t seed;

  void weight(const std::string& name, Shape shape) { m.params.add(name, trunc_normal(shape, seed, name)); }
  void zeros(const std::string& name, Shape shape) { m.params.add(name, Tensor(std::move(shape), 0.0f)); }
  void ones(const std::string& name, Shape shape) { m.params.add(name, Tensor(std::move(shape), 1.0f)); }
  void norm(const std::string& prefix, std::int64_t c) {
    ones(prefix + ".weight", {c});
    zeros(prefix + ".bias", {c});
  }
};

}  // namespace

void reset_head(ModelHandle& model, int num_classes) {
  const auto c_last = static_cast<std::int64_t>(model.spec.stages.back().channels);
  model.spec.num_classes = num_classes;
  model.params.at("head.fc.weight") = trunc_normal({num_classes, c_last}, model.seed, "head.fc.weight");
  model.params.at("head.fc.bias") = Tensor({num_classes}, 0.0f);
}

ModelHandle build_model(const ArchSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelHandle m;
  m.spec = spec;
  m.seed = seed;
  Builder b{m, seed};

  const std::int64_t c_in = spec.input.channels;
  const std::int64_t p = spec.stem_patch;
  b.weight("stem.weight", {spec.stem_channels, c_in, p, p});
  b.zeros("stem.bias", {spec.stem_channels});
  b.norm("stem.norm", spec.stem_channels);

  std::vector<LayerEntry> dw, pw;
  std::int64_t prev = spec.stem_channels;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const auto& st = spec.stages[s];
    const std::int64_t c = st.channels;
    const std::string sp = "stages." + std::to_string(s);
    if (s > 0 || prev != c) {
      b.norm(sp + ".downsample.norm", prev);
      const std::int64_t stride = s > 0 ? 2 : 1;
      b.weight(sp + ".downsample.weight", {c, prev, stride, stride});
      b.zeros(sp + ".downsample.bias", {c});
    }
    for (int blk = 0; blk < st.num_blocks; ++blk) {
      const std::string bp = sp + ".blocks." + std::to_string(blk);
      const std::int64_t k = st.dw_kernel;
      auto add_pw = [&](const std::string& name, std::int64_t co, std::int64_t ci) {
        b.weight(bp + "." + name + ".weight", {co, ci});
        b.zeros(bp + "." + name + ".bias", {co});
        pw.push_back({static_cast<int>(pw.size()), LayerKind::pointwise, {co, ci}, bp + "." + name + ".weight",
                      bp + "." + name + ".bias", static_cast<int>(s), blk});
      };
      auto add_dw = [&] {
        b.weight(bp + ".dwconv.weight", {c, k, k});
        b.zeros(bp + ".dwconv.bias", {c});
        dw.push_back({static_cast<int>(dw.size()), LayerKind::depthwise, {c, k, k}, bp + ".dwconv.weight",
                      bp + ".dwconv.bias", static_cast<int>(s), blk});
      };
      if (spec.block_kind == BlockKind::standard_ds) {
        add_dw();
        b.norm(bp + ".norm", c);
        add_pw("pwconv1", kExpansionRatio * c, c);
        add_pw("pwconv2", c, kExpansionRatio * c);
      } else {
        b.norm(bp + ".norm", c);
        add_pw("proj_in", 2 * c, c);
        add_dw();
        add_pw("proj_out", c, c);
      }
    }
    prev = c;
  }
  b.norm("head.norm", prev);
  b.weight("head.fc.weight", {spec.num_classes, prev});
  b.zeros("head.fc.bias", {spec.num_classes});

  m.layer_index = std::move(dw);
  m.layer_index.insert(m.layer_index.end(), pw.begin(), pw.end());
  return m;
}

std::vector<const LayerEntry*> layer_entries(const ModelHandle& model, LayerKind kind) {
  std::vector<const LayerEntry*> out;
  for (const auto& e : model.layer_index)
    if (e.kind == kind) out.push_back(&e);
  return out;
}

std::vector<DepthwiseLayerInfo> depthwise_layers(const ModelHandle& model) {
  std::vector<DepthwiseLayerInfo> out;
  for (const auto* e : layer_entries(model, LayerKind::depthwise)) {
    out.push_back({e->layer_id, static_cast<int>(e->shape[0]), static_cast<int>(e->shape[1])});
  }
  return out;
}

std::vector<PointwiseLayerInfo> pointwise_layers(const ModelHandle& model) {
  std::vector<PointwiseLayerInfo> out;
  for (const auto* e : layer_entries(model, LayerKind::pointwise)) {
    out.push_back({e->layer_id, static_cast<int>(e->shape[1]), static_cast<int>(e->shape[0])});
  }
  return out;
}

FilterInventory filter_inventory(const ArchSpec& spec) {
  spec.validate();
  FilterInventory inv;
  int id = 0;
  for (const auto& st : spec.stages) {
    for (int b = 0; b < st.num_blocks; ++b) {
      inv.per_layer.push_back({id++, st.channels, st.dw_kernel});
      inv.total_dw_filters += st.channels;
    }
  }
  return inv;
}

std::string params_digest(const ParamMap& params) {
  Sha256 h;
  for (std::size_t i = 0; i < params.size(); ++i) {
    h.update(params.names()[i]);
    h.update(std::string_view("\0", 1));
    h.update(tensor_digest(params.value(i)));
  }
  return h.hex_final();
}

}  // namespace fg
