#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "filtergraft/surgery.hpp"
#include "filtergraft/trainer.hpp"

namespace fg {

// Append-only JSONL store of RunRecords at <dir>/records.jsonl. Appends hold
// an exclusive flock on <dir>/records.lock; reads take no lock and ignore a
// trailing partial line.
class ResultStore {
 public:
  explicit ResultStore(std::filesystem::path dir);

  // Assigns run_id (from the config digest) when empty. Rejects a second
  // record with the same config_digest (duplicate-run, naming the prior run).
  std::string append(RunRecord record);

  std::vector<RunRecord> records() const;
  std::map<std::string, std::string> index() const;  // config_digest -> run_id
  std::optional<RunRecord> find_by_digest(const std::string& config_digest) const;
  std::optional<RunRecord> find(const std::string& run_id) const;
  RunRecord get(const std::string& run_id) const;

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path records_path() const { return dir_ / "records.jsonl"; }
  std::filesystem::path run_dir(const std::string& run_id) const { return dir_ / run_id; }

  // Experiment manifests: <dir>/experiments/<tag>.json, mapping roles to run ids.
  void write_manifest(const std::string& tag, const nlohmann::json& manifest) const;
  nlohmann::json read_manifest(const std::string& tag) const;
  std::vector<std::string> manifest_tags() const;

 private:
  std::filesystem::path dir_;
};

std::string run_id_for_digest(const std::string& config_digest);

// --- matrix table ---------------------------------------------------------------------

inline constexpr double kChangeThreshold = 0.001;

enum class CellSign { decrease, increase, no_change };
CellSign classify_delta(double delta);
std::string to_string(CellSign s);

struct MatrixCell {
  std::string source;
  std::string target;
  std::optional<double> accuracy;
  std::optional<double> reference;  // row selffer (off-diagonal) or original (diagonal)
  std::optional<double> delta;
  std::optional<CellSign> sign;
  std::string run_id;
};

struct MatrixTable {
  std::string tag;
  std::string transfer_kind;
  std::vector<std::string> rows;  // targets, descending train size
  std::vector<std::string> cols;  // sources
  std::vector<std::vector<MatrixCell>> cells;
  std::vector<std::string> missing;  // "source->target"

  std::string render_text() const;
  nlohmann::json to_json() const;
};

// Builds the table from the tag's manifest. With require_complete, missing
// cells raise incomplete-matrix listing them.
MatrixTable matrix_table(const ResultStore& store, const std::string& tag, bool require_complete = false);

// --- curves ---------------------------------------------------------------------------

enum class CurveMetric { accuracy, retention };

struct CurveSeries {
  std::string name;  // e.g. "AnB", "BnB"
  std::vector<std::pair<int, double>> points;
  std::vector<std::string> run_ids;
};

struct CurveData {
  std::string tag;
  std::string metric;
  std::vector<CurveSeries> series;
  nlohmann::json to_json() const;
};

CurveData curve_data(const ResultStore& store, const std::string& tag, CurveMetric metric);
// Writes <out>.svg and <out>.json; returns the data.
CurveData curve_plot(const ResultStore& store, const std::string& tag, CurveMetric metric,
                     const std::filesystem::path& out_stem);
std::string render_curve_svg(const CurveData& data);

// --- filter grids ---------------------------------------------------------------------

enum class LayerSelector { first, middle, last };
int select_layer(const FilterBank& bank, LayerSelector selector);

// Grayscale PNG of sampled kernels from one bank layer. Sampling is a seeded
// permutation of the layer's channels; tiles are per-kernel min-max normalized
// when `normalize` is set (epsilon guards constant kernels).
std::vector<std::uint8_t> filter_grid_png(const FilterBank& bank, int layer_id, int rows, int cols, bool normalize,
                                          std::uint64_t seed, int scale = 8);
void filter_grid(const FilterBank& bank, int layer_id, int rows, int cols, bool normalize, std::uint64_t seed,
                 const std::filesystem::path& out_png);

// Minimal PNG encoder (8-bit grayscale).
std::vector<std::uint8_t> encode_png_gray(const std::vector<std::uint8_t>& pixels, int width, int height);

// --- clustering -----------------------------------------------------------------------

struct KernelRef {
  int bank = 0;
  int layer_id = 0;
  int channel = 0;
  bool operator==(const KernelRef&) const = default;
};

struct ClusterReport {
  int k = 0;
  std::vector<KernelRef> kernels;  // clustered kernels, input order
  std::vector<int> assignments;    // aligned with kernels
  std::vector<std::vector<float>> centroids;
  double inertia = 0.0;
  std::map<int, std::vector<int>> per_layer_histogram;  // layer -> counts per cluster
  std::vector<KernelRef> excluded;                      // all-zero kernels

  nlohmann::json to_json() const;
};

// Zero-mean, unit-norm, sign-aligned kernels, then k-means++ seeded Lloyd
// iterations. All-zero (and constant) kernels are excluded and reported; a
// bank set with fewer usable kernels than k raises degenerate.
ClusterReport cluster_filters(const std::vector<FilterBank>& banks, int k, std::uint64_t seed, int max_iter = 100);

// Fraction of kernels whose cluster's majority label matches their own label.
double cluster_purity(const std::vector<int>& assignments, const std::vector<int>& labels);

}  // namespace fg
