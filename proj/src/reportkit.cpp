#include "filtergraft/reportkit.hpp"

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "filtergraft/datahub.hpp"
#include "filtergraft/error.hpp"
#include "filtergraft/fsutil.hpp"
#include "filtergraft/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fg {

// --- store ----------------------------------------------------------------------------

std::string run_id_for_digest(const std::string& config_digest) { return config_digest.substr(0, 16); }

ResultStore::ResultStore(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

namespace {

std::vector<RunRecord> parse_records(const fs::path& path) {
  std::vector<RunRecord> out;
  if (!fs::exists(path)) return out;
  const std::string text = read_text_file(path);
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) break;  // partial line still being written
    const std::string_view line(text.data() + pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::format_error, path.string() + ": corrupt record line: " + e.what());
    }
  }
  return out;
}

}  // namespace

std::string ResultStore::append(RunRecord record) {
  if (record.run_id.empty()) record.run_id = run_id_for_digest(record.config_digest);
  record.validate();
  const std::string line = to_json(record).dump() + "\n";
  FileLock lock(dir_ / "records.lock");
  for (const auto& r : parse_records(records_path())) {
    if (r.config_digest == record.config_digest) {
      throw Error(ErrorKind::duplicate_run, "config digest " + record.config_digest.substr(0, 16) +
                                                " already recorded as run " + r.run_id);
    }
    if (r.run_id == record.run_id) throw Error(ErrorKind::duplicate_run, "run id " + r.run_id + " already recorded");
  }
  const int fd = ::open(records_path().c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorKind::io_failure, "cannot open " + records_path().string());
  std::size_t written = 0;
  while (written < line.size()) {
    const ssize_t n = ::write(fd, line.data() + written, line.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      throw Error(ErrorKind::io_failure, "write failed on " + records_path().string());
    }
    written += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
  return record.run_id;
}

std::vector<RunRecord> ResultStore::records() const { return parse_records(records_path()); }

std::map<std::string, std::string> ResultStore::index() const {
  std::map<std::string, std::string> idx;
  for (const auto& r : records()) idx.emplace(r.config_digest, r.run_id);
  return idx;
}

std::optional<RunRecord> ResultStore::find_by_digest(const std::string& config_digest) const {
  for (auto& r : records())
    if (r.config_digest == config_digest) return r;
  return std::nullopt;
}

std::optional<RunRecord> ResultStore::find(const std::string& run_id) const {
  for (auto& r : records())
    if (r.run_id == run_id) return r;
  return std::nullopt;
}

RunRecord ResultStore::get(const std::string& run_id) const {
  auto r = find(run_id);
  if (!r) throw Error(ErrorKind::no_records, "run " + run_id + " not in store " + dir_.string());
  return *r;
}

void ResultStore::write_manifest(const std::string& tag, const json& manifest) const {
  write_text_file_atomic(dir_ / "experiments" / (tag + ".json"), manifest.dump(2) + "\n");
}

json ResultStore::read_manifest(const std::string& tag) const {
  const fs::path p = dir_ / "experiments" / (tag + ".json");
  if (!fs::exists(p)) throw Error(ErrorKind::no_records, "no experiment '" + tag + "' in " + dir_.string());
  return json::parse(read_text_file(p));
}

std::vector<std::string> ResultStore::manifest_tags() const {
  std::vector<std::string> tags;
  const fs::path d = dir_ / "experiments";
  if (!fs::exists(d)) return tags;
  for (const auto& e : fs::directory_iterator(d))
    if (e.path().extension() == ".json") tags.push_back(e.path().stem().string());
  std::sort(tags.begin(), tags.end());
  return tags;
}

// --- matrix ---------------------------------------------------------------------------

CellSign classify_delta(double delta) {
  if (delta >= kChangeThreshold) return CellSign::increase;
  if (delta <= -kChangeThreshold) return CellSign::decrease;
  return CellSign::no_change;
}

std::string to_string(CellSign s) {
  switch (s) {
    case CellSign::decrease: return "decrease";
    case CellSign::increase: return "increase";
    case CellSign::no_change: return "no_change";
  }
  return "no_change";
}

namespace {

// Mean final accuracy over the manifest entries matching (source, target).
std::optional<std::pair<double, std::string>> mean_acc(const ResultStore& store,
                                                       const std::map<std::string, RunRecord>& by_id,
                                                       const std::vector<std::string>& ids) {
  (void)store;
  double sum = 0.0;
  int n = 0;
  std::string first;
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end() || !it->second.completed()) continue;
    sum += it->second.final_acc;
    if (first.empty()) first = id;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return std::make_pair(sum / n, first);
}

std::int64_t train_size_of(const json& manifest, const std::string& ds) {
  if (manifest.contains("train_sizes") && manifest["train_sizes"].contains(ds))
    return manifest["train_sizes"][ds].get<std::int64_t>();
  const auto colon = ds.find(':');
  try {
    return dataset_spec(ds.substr(0, colon)).train_size;
  } catch (const Error&) {
    return 0;
  }
}

std::map<std::string, RunRecord> records_by_id(const ResultStore& store) {
  std::map<std::string, RunRecord> m;
  for (auto& r : store.records()) m.emplace(r.run_id, std::move(r));
  return m;
}

}  // namespace

MatrixTable matrix_table(const ResultStore& store, const std::string& tag, bool require_complete) {
  const json manifest = store.read_manifest(tag);
  if (manifest.value("kind", "") != "matrix")
    throw Error(ErrorKind::invalid_argument, "experiment '" + tag + "' is not a matrix experiment");
  const auto by_id = records_by_id(store);
  MatrixTable t;
  t.tag = tag;
  t.transfer_kind = manifest.value("transfer_kind", "depthwise");
  std::vector<std::string> datasets = manifest.at("datasets").get<std::vector<std::string>>();
  t.cols = datasets;
  t.rows = datasets;
  std::stable_sort(t.rows.begin(), t.rows.end(), [&](const std::string& a, const std::string& b) {
    return train_size_of(manifest, a) > train_size_of(manifest, b);
  });

  auto ids_for = [&](const std::string& src, const std::string& tgt) {
    std::vector<std::string> ids;
    for (const auto& c : manifest.at("cells"))
      if (c.at("source") == src && c.at("target") == tgt) ids.push_back(c.at("run_id").get<std::string>());
    return ids;
  };
  auto base_ids = [&](const std::string& ds) {
    std::vector<std::string> ids;
    if (manifest.contains("bases"))
      for (const auto& b : manifest["bases"])
        if (b.at("dataset") == ds) ids.push_back(b.at("run_id").get<std::string>());
    return ids;
  };

  for (const auto& tgt : t.rows) {
    std::vector<MatrixCell> row;
    const auto selffer = mean_acc(store, by_id, ids_for(tgt, tgt));
    const auto original = mean_acc(store, by_id, base_ids(tgt));
    for (const auto& src : t.cols) {
      MatrixCell cell;
      cell.source = src;
      cell.target = tgt;
      const auto acc = mean_acc(store, by_id, ids_for(src, tgt));
      if (!acc) {
        t.missing.push_back(src + "->" + tgt);
      } else {
        cell.accuracy = acc->first;
        cell.run_id = acc->second;
        const auto& ref = src == tgt ? original : selffer;
        if (ref) {
          cell.reference = ref->first;
          cell.delta = acc->first - ref->first;
          cell.sign = classify_delta(*cell.delta);
        }
      }
      row.push_back(cell);
    }
    t.cells.push_back(std::move(row));
  }
  if (require_complete && !t.missing.empty()) {
    std::string list;
    for (const auto& m : t.missing) list += " " + m;
    throw Error(ErrorKind::incomplete_matrix, "missing cells:" + list);
  }
  return t;
}

std::string MatrixTable::render_text() const {
  std::ostringstream os;
  os << "transfer matrix '" << tag << "' (" << transfer_kind << "; rows = target, cols = source)\n";
  os << "diagonal: selffer accuracy [delta vs original]; off-diagonal: delta vs row selffer\n";
  std::size_t w = 8;
  for (const auto& r : rows) w = std::max(w, r.size() + 2);
  os << std::left << std::setw(static_cast<int>(w)) << "";
  for (const auto& c : cols) os << std::setw(static_cast<int>(w + 4)) << c;
  os << "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    os << std::setw(static_cast<int>(w)) << rows[i];
    for (const auto& cell : cells[i]) {
      std::ostringstream c;
      c << std::fixed << std::setprecision(1);
      if (!cell.accuracy) {
        c << "missing";
      } else if (cell.source == cell.target) {
        c << *cell.accuracy * 100.0;
        if (cell.delta) c << " [" << std::showpos << *cell.delta * 100.0 << std::noshowpos << "]";
      } else if (cell.delta) {
        const char* mark = *cell.sign == CellSign::increase ? "+" : *cell.sign == CellSign::decrease ? "-" : "=";
        c << std::showpos << *cell.delta * 100.0 << std::noshowpos << " " << mark;
      } else {
        c << *cell.accuracy * 100.0 << " (no selffer)";
      }
      os << std::setw(static_cast<int>(w + 4)) << c.str();
    }
    os << "\n";
  }
  if (!missing.empty()) {
    os << "missing:";
    for (const auto& m : missing) os << " " << m;
    os << "\n";
  }
  return os.str();
}

json MatrixTable::to_json() const {
  json cells_j = json::array();
  for (const auto& row : cells) {
    for (const auto& c : row) {
      json j = {{"source", c.source}, {"target", c.target}, {"run_id", c.run_id}};
      j["accuracy"] = c.accuracy ? json(*c.accuracy) : json(nullptr);
      j["reference"] = c.reference ? json(*c.reference) : json(nullptr);
      j["delta"] = c.delta ? json(*c.delta) : json(nullptr);
      j["sign"] = c.sign ? json(fg::to_string(*c.sign)) : json(nullptr);
      cells_j.push_back(j);
    }
  }
  return json{{"tag", tag},           {"transfer_kind", transfer_kind}, {"rows", rows},
              {"cols", cols},         {"cells", cells_j},               {"missing", missing},
              {"threshold", kChangeThreshold}};
}

// --- curves ---------------------------------------------------------------------------

json CurveData::to_json() const {
  json s = json::array();
  for (const auto& c : series) {
    json pts = json::array();
    for (std::size_t i = 0; i < c.points.size(); ++i)
      pts.push_back({{"depth", c.points[i].first}, {"value", c.points[i].second}, {"run_id", c.run_ids[i]}});
    s.push_back({{"name", c.name}, {"points", pts}});
  }
  return json{{"tag", tag}, {"metric", metric}, {"series", s}};
}

CurveData curve_data(const ResultStore& store, const std::string& tag, CurveMetric metric) {
  const json manifest = store.read_manifest(tag);
  const std::string kind = manifest.value("kind", "");
  if (kind != "anb" && kind != "reverse_anb")
    throw Error(ErrorKind::no_records, "experiment '" + tag + "' has no depth curves");
  const auto by_id = records_by_id(store);
  CurveData d;
  d.tag = tag;
  d.metric = metric == CurveMetric::accuracy ? "accuracy" : "retention";
  for (const auto& [name, entries] : manifest.at("series").items()) {
    CurveSeries s;
    s.name = name;
    std::map<int, std::vector<std::string>> by_depth;
    for (const auto& e : entries) by_depth[e.at("depth").get<int>()].push_back(e.at("run_id").get<std::string>());
    for (const auto& [depth, ids] : by_depth) {
      double sum = 0.0;
      int n = 0;
      for (const auto& id : ids) {
        const auto it = by_id.find(id);
        if (it == by_id.end() || !it->second.completed()) continue;
        const RunRecord& r = it->second;
        double v = r.final_acc;
        if (metric == CurveMetric::retention) {
          if (!r.baseline_ref) continue;
          const auto base = by_id.find(*r.baseline_ref);
          if (base == by_id.end()) continue;
          v = retention(r.final_acc, base->second.final_acc);
        }
        sum += v;
        ++n;
      }
      if (n == 0) continue;
      s.points.emplace_back(depth, sum / n);
      s.run_ids.push_back(ids.front());
    }
    d.series.push_back(std::move(s));
  }
  std::size_t total = 0;
  for (const auto& s : d.series) total += s.points.size();
  if (total == 0) throw Error(ErrorKind::no_records, "experiment '" + tag + "' has no completed curve records");
  return d;
}

std::string render_curve_svg(const CurveData& data) {
  constexpr double W = 560, H = 380, L = 64, R = 140, T = 36, B = 52;
  int xmin = std::numeric_limits<int>::max(), xmax = std::numeric_limits<int>::min();
  double ymin = std::numeric_limits<double>::max(), ymax = std::numeric_limits<double>::lowest();
  for (const auto& s : data.series)
    for (const auto& [x, y] : s.points) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmin == xmax) {
    --xmin;
    ++xmax;
  }
  const double pad = std::max(0.01, (ymax - ymin) * 0.1);
  ymin -= pad;
  ymax += pad;
  auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << " " << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\">" << data.tag << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  std::set<int> xs;
  for (const auto& s : data.series)
    for (const auto& p : s.points) xs.insert(p.first);
  for (int x : xs) {
    os << "<line x1=\"" << sx(x) << "\" y1=\"" << H - B << "\" x2=\"" << sx(x) << "\" y2=\"" << H - B + 5
       << "\" stroke=\"black\"/>";
    os << "<text x=\"" << sx(x) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << x << "</text>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    const double y = ymin + (ymax - ymin) * i / 4.0;
    os << "<line x1=\"" << L - 5 << "\" y1=\"" << sy(y) << "\" x2=\"" << L << "\" y2=\"" << sy(y)
       << "\" stroke=\"black\"/>";
    os << "<text x=\"" << L - 8 << "\" y=\"" << sy(y) + 4 << "\" text-anchor=\"end\">" << std::setprecision(3) << y
       << std::setprecision(2) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">depth n</text>\n";
  os << "<text transform=\"translate(16," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << data.metric << "</text>\n";
  for (std::size_t i = 0; i < data.series.size(); ++i) {
    const auto& s = data.series[i];
    const char* col = colors[i % 6];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : s.points) os << sx(x) << "," << sy(y) << " ";
    os << "\"/>\n";
    for (const auto& [x, y] : s.points)
      os << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y) << "\" r=\"3.5\" fill=\"" << col << "\"/>\n";
    const double ly = T + 10 + 18.0 * static_cast<double>(i);
    os << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 32 << "\" y2=\"" << ly
       << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>";
    os << "<text x=\"" << W - R + 38 << "\" y=\"" << ly + 4 << "\">" << s.name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

CurveData curve_plot(const ResultStore& store, const std::string& tag, CurveMetric metric, const fs::path& out_stem) {
  CurveData d = curve_data(store, tag, metric);
  write_text_file_atomic(out_stem.string() + ".svg", render_curve_svg(d));
  write_text_file_atomic(out_stem.string() + ".json", d.to_json().dump(2) + "\n");
  return d;
}

// --- PNG / filter grids ---------------------------------------------------------------

namespace {

void put32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  for (int s = 24; s >= 0; s -= 8) v.push_back(static_cast<std::uint8_t>(x >> s));
}

void chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data) {
  put32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

std::vector<std::uint8_t> encode_png_gray(const std::vector<std::uint8_t>& pixels, int width, int height) {
  if (width <= 0 || height <= 0 || pixels.size() != static_cast<std::size_t>(width) * height)
    throw Error(ErrorKind::invalid_argument, "png: pixel count does not match size");
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(height) * (width + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), pixels.begin() + static_cast<std::ptrdiff_t>(y) * width,
               pixels.begin() + static_cast<std::ptrdiff_t>(y + 1) * width);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw Error(ErrorKind::io_failure, "png: deflate failed");
  z.resize(zlen);
  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  put32(ihdr, static_cast<std::uint32_t>(width));
  put32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});
  chunk(out, "IHDR", ihdr);
  chunk(out, "IDAT", z);
  chunk(out, "IEND", {});
  return out;
}

int select_layer(const FilterBank& bank, LayerSelector selector) {
  if (bank.entries.empty()) throw Error(ErrorKind::empty_layer, "bank has no layers");
  const std::size_t n = bank.entries.size();
  const std::size_t i = selector == LayerSelector::first ? 0 : selector == LayerSelector::middle ? n / 2 : n - 1;
  return bank.entries[i].layer_id;
}

std::vector<std::uint8_t> filter_grid_png(const FilterBank& bank, int layer_id, int rows, int cols, bool normalize,
                                          std::uint64_t seed, int scale) {
  if (bank.kind != LayerKind::depthwise) throw Error(ErrorKind::invalid_argument, "filter grids need a depthwise bank");
  if (rows < 1 || cols < 1 || scale < 1) throw Error(ErrorKind::invalid_argument, "grid dimensions must be >= 1");
  const BankEntry* entry = nullptr;
  for (const auto& e : bank.entries)
    if (e.layer_id == layer_id) entry = &e;
  if (!entry || entry->kernels.dim(0) == 0)
    throw Error(ErrorKind::empty_layer, "layer " + std::to_string(layer_id) + " has no kernels");
  const auto C = entry->kernels.dim(0), kh = entry->kernels.dim(1), kw = entry->kernels.dim(2);
  const auto order = permutation(static_cast<std::size_t>(C), seed);
  const int gap = 1;
  const int tile_h = static_cast<int>(kh) * scale, tile_w = static_cast<int>(kw) * scale;
  const int W = cols * tile_w + (cols + 1) * gap, H = rows * tile_h + (rows + 1) * gap;
  std::vector<std::uint8_t> px(static_cast<std::size_t>(W) * H, 255);
  // Shared range when not normalizing per kernel.
  float gmin = 0.0f, gmax = 0.0f;
  if (!normalize) {
    gmin = *std::min_element(entry->kernels.data.begin(), entry->kernels.data.end());
    gmax = *std::max_element(entry->kernels.data.begin(), entry->kernels.data.end());
  }
  constexpr float kEps = 1e-8f;
  for (int t = 0; t < rows * cols && t < C; ++t) {
    const float* k = entry->kernels.ptr() + static_cast<std::int64_t>(order[static_cast<std::size_t>(t)]) * kh * kw;
    float lo = gmin, hi = gmax;
    if (normalize) {
      lo = *std::min_element(k, k + kh * kw);
      hi = *std::max_element(k, k + kh * kw);
    }
    const float span = hi - lo;
    const int ox = gap + (t % cols) * (tile_w + gap), oy = gap + (t / cols) * (tile_h + gap);
    for (int y = 0; y < tile_h; ++y) {
      for (int x = 0; x < tile_w; ++x) {
        const float v = k[(y / scale) * kw + (x / scale)];
        const float u = span > kEps ? (v - lo) / span : 0.5f;
        px[static_cast<std::size_t>(oy + y) * W + (ox + x)] =
            static_cast<std::uint8_t>(std::lround(std::clamp(u, 0.0f, 1.0f) * 255.0f));
      }
    }
  }
  return encode_png_gray(px, W, H);
}

void filter_grid(const FilterBank& bank, int layer_id, int rows, int cols, bool normalize, std::uint64_t seed,
                 const fs::path& out_png) {
  const auto bytes = filter_grid_png(bank, layer_id, rows, cols, normalize, seed);
  if (out_png.has_parent_path()) fs::create_directories(out_png.parent_path());
  std::ofstream out(out_png, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::io_failure, "cannot write " + out_png.string());
}

// --- clustering -----------------------------------------------------------------------

json ClusterReport::to_json() const {
  json refs = json::array();
  for (std::size_t i = 0; i < kernels.size(); ++i)
    refs.push_back({{"bank", kernels[i].bank},
                    {"layer", kernels[i].layer_id},
                    {"channel", kernels[i].channel},
                    {"cluster", assignments[i]}});
  json hist = json::object();
  for (const auto& [layer, counts] : per_layer_histogram) hist[std::to_string(layer)] = counts;
  json excl = json::array();
  for (const auto& e : excluded) excl.push_back({{"bank", e.bank}, {"layer", e.layer_id}, {"channel", e.channel}});
  return json{{"k", k},
              {"inertia", inertia},
              {"centroids", centroids},
              {"assignments", refs},
              {"per_layer_histogram", hist},
              {"excluded", excl}};
}

ClusterReport cluster_filters(const std::vector<FilterBank>& banks, int k, std::uint64_t seed, int max_iter) {
  if (k < 2) throw Error(ErrorKind::invalid_argument, "k must be >= 2");
  std::int64_t kh = -1, kw = -1;
  ClusterReport rep;
  rep.k = k;
  std::vector<std::vector<double>> pts;
  for (std::size_t b = 0; b < banks.size(); ++b) {
    if (banks[b].kind != LayerKind::depthwise)
      throw Error(ErrorKind::invalid_argument, "clustering needs depthwise banks");
    for (const auto& e : banks[b].entries) {
      if (kh < 0) {
        kh = e.kernels.dim(1);
        kw = e.kernels.dim(2);
      } else if (e.kernels.dim(1) != kh || e.kernels.dim(2) != kw) {
        throw Error(ErrorKind::heterogeneous_kernel_size,
                    std::to_string(kh) + "x" + std::to_string(kw) + " vs " + std::to_string(e.kernels.dim(1)) + "x" +
                        std::to_string(e.kernels.dim(2)) + " at layer " + std::to_string(e.layer_id));
      }
      const auto n = kh * kw;
      for (std::int64_t c = 0; c < e.kernels.dim(0); ++c) {
        const float* src = e.kernels.ptr() + c * n;
        const KernelRef ref{static_cast<int>(b), e.layer_id, static_cast<int>(c)};
        std::vector<double> v(src, src + n);
        const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(n);
        for (auto& x : v) x -= mean;
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (!(norm > 1e-12)) {
          rep.excluded.push_back(ref);
          continue;
        }
        std::size_t arg = 0;
        for (std::size_t i = 1; i < v.size(); ++i)
          if (std::fabs(v[i]) > std::fabs(v[arg])) arg = i;
        const double sign = v[arg] < 0 ? -1.0 : 1.0;
        for (auto& x : v) x *= sign / norm;
        pts.push_back(std::move(v));
        rep.kernels.push_back(ref);
      }
    }
  }
  if (static_cast<int>(pts.size()) < k) {
    throw Error(ErrorKind::degenerate, std::to_string(pts.size()) + " usable kernels for k = " + std::to_string(k) +
                                           " (" + std::to_string(rep.excluded.size()) + " excluded as all-zero)");
  }
  const std::size_t N = pts.size(), D = pts[0].size();
  auto dist2 = [D](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < D; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  };

  // k-means++ seeding.
  Rng rng(derive_seed(seed, "kmeans"));
  std::vector<std::vector<double>> cent;
  cent.push_back(pts[rng.below(N)]);
  std::vector<double> d2(N);
  while (static_cast<int>(cent.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      double best = std::numeric_limits<double>::max();
      for (const auto& c : cent) best = std::min(best, dist2(pts[i], c));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.below(N);
    } else {
      double r = rng.uniform() * total;
      for (pick = 0; pick + 1 < N; ++pick) {
        r -= d2[pick];
        if (r < 0.0) break;
      }
    }
    cent.push_back(pts[pick]);
  }

  std::vector<int> assign(N, -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < N; ++i) {
      int best = 0;
      double bd = dist2(pts[i], cent[0]);
      for (int c = 1; c < k; ++c) {
        const double d = dist2(pts[i], cent[static_cast<std::size_t>(c)]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<std::vector<double>> sum(static_cast<std::size_t>(k), std::vector<double>(D, 0.0));
    std::vector<int> count(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < N; ++i) {
      const auto c = static_cast<std::size_t>(assign[i]);
      ++count[c];
      for (std::size_t j = 0; j < D; ++j) sum[c][j] += pts[i][j];
    }
    for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) {
      if (count[c] == 0) continue;  // keep an emptied centroid where it was
      for (std::size_t j = 0; j < D; ++j) cent[c][j] = sum[c][j] / count[c];
    }
  }

  // Number clusters by first appearance so labels do not depend on seeding order.
  std::vector<int> relabel(static_cast<std::size_t>(k), -1);
  int next = 0;
  for (int a : assign)
    if (relabel[static_cast<std::size_t>(a)] < 0) relabel[static_cast<std::size_t>(a)] = next++;
  for (auto& r : relabel)
    if (r < 0) r = next++;
  std::vector<std::vector<double>> ordered(static_cast<std::size_t>(k));
  for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c)
    ordered[static_cast<std::size_t>(relabel[c])] = std::move(cent[c]);
  cent = std::move(ordered);
  for (auto& a : assign) a = relabel[static_cast<std::size_t>(a)];

  rep.assignments = assign;
  rep.inertia = 0.0;
  for (std::size_t i = 0; i < N; ++i) rep.inertia += dist2(pts[i], cent[static_cast<std::size_t>(assign[i])]);
  for (const auto& c : cent) rep.centroids.emplace_back(c.begin(), c.end());
  for (std::size_t i = 0; i < N; ++i) {
    auto& h = rep.per_layer_histogram[rep.kernels[i].layer_id];
    if (h.empty()) h.assign(static_cast<std::size_t>(k), 0);
    ++h[static_cast<std::size_t>(assign[i])];
  }
  return rep;
}

double cluster_purity(const std::vector<int>& assignments, const std::vector<int>& labels) {
  if (assignments.size() != labels.size() || assignments.empty())
    throw Error(ErrorKind::invalid_argument, "purity needs equal-length, non-empty inputs");
  std::map<int, std::map<int, int>> counts;
  for (std::size_t i = 0; i < assignments.size(); ++i) ++counts[assignments[i]][labels[i]];
  int agree = 0;
  for (const auto& [cluster, by_label] : counts) {
    int best = 0;
    for (const auto& [label, n] : by_label) best = std::max(best, n);
    agree += best;
  }
  return static_cast<double>(agree) / static_cast<double>(assignments.size());
}

}  // namespace fg
