#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "filtergraft/tensor.hpp"

namespace fg {

struct DatasetSpec {
  std::string name;
  int num_classes = 0;
  std::int64_t train_size = 0;
  std::int64_t test_size = 0;
  int image_size = 32;
  int channels = 3;
  std::string source;  // "https://..." archive locator or "builtin:<generator>"
  std::vector<std::string> class_names;
};

// Registered datasets: cifar10, cifar100, fashion_mnist, stl10_small (fetched
// over the network) and the built-in procedural sets synth_objects10,
// synth_objects20, synth_silhouettes10 (generated locally, no network).
const std::vector<DatasetSpec>& dataset_registry();
const DatasetSpec& dataset_spec(const std::string& name);

// Uint8 NHWC images with integer labels.
struct Split {
  std::int64_t height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> images;
  std::vector<int> labels;
  std::vector<std::int64_t> source_index;  // index in the base dataset split

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  const std::uint8_t* image(std::int64_t i) const { return images.data() + i * height * width * channels; }
};

struct DatasetHandle {
  DatasetSpec spec;          // for partitions: name "<base>:<label>" and remapped classes
  std::string base_name;     // registry name of the underlying dataset
  Split train;
  Split test;
  std::vector<float> mean;   // per channel, [0, 1] scale, from the base train split
  std::vector<float> stddev;
  std::string content_digest;

  int num_classes() const { return spec.num_classes; }
};

// Fetches (or generates) on first use, then verifies the cached copy against
// <root>/<name>/digest.json. Cache layout:
//   <root>/<name>/raw/...        extracted payload
//   <root>/<name>/digest.json    sha256 per raw file
//   <root>/<name>/stats.json     per-channel mean/std of the train split
// FILTERGRAFT_DATA_MIRROR replaces the download base URL (file:// works).
DatasetHandle load_dataset(const std::string& name, const std::filesystem::path& root);

// True when the dataset is cached and fetching needs no network.
bool dataset_available_offline(const std::string& name, const std::filesystem::path& root);

struct SplitTable {
  std::string dataset;
  struct Partition {
    std::string label;
    std::vector<std::string> classes;
  };
  Partition a;
  Partition b;
};

SplitTable load_split_table(const std::string& dataset, const std::filesystem::path& config_root);

// Partitions a dataset per its split table. Labels are remapped to 0..n-1 in
// ascending order of the original class id.
std::pair<DatasetHandle, DatasetHandle> semantic_split(const DatasetHandle& base, const SplitTable& table);
std::pair<DatasetHandle, DatasetHandle> semantic_split(const std::string& name, const std::filesystem::path& root,
                                                       const std::filesystem::path& config_root);

// "<name>" or "<name>:<partition label>".
DatasetHandle load_dataset_ref(const std::string& ref, const std::filesystem::path& root,
                               const std::filesystem::path& config_root);

// --- loaders -----------------------------------------------------------------------

enum class AugmentPolicy { none, crop_flip };

struct Batch {
  Tensor images;  // (B, H, W, C), normalized
  std::vector<int> labels;
  std::vector<std::int64_t> indices;
};

class BatchIterator {
 public:
  BatchIterator(const DatasetHandle& handle, const Split& split, int batch, AugmentPolicy augment, bool shuffle,
                std::uint64_t seed);

  // Resets to the start of the given epoch; ordering and augmentation are a
  // function of (seed, epoch).
  void begin_epoch(int epoch);
  bool next(Batch& out);
  std::int64_t batches_per_epoch() const;
  std::int64_t size() const { return split_->size(); }

 private:
  const DatasetHandle* handle_;
  const Split* split_;
  int batch_;
  AugmentPolicy augment_;
  bool shuffle_;
  std::uint64_t seed_;
  int epoch_ = 0;
  std::int64_t cursor_ = 0;
  std::vector<std::int64_t> order_;
};

struct Loaders {
  BatchIterator train;
  BatchIterator test;  // never augmented, never shuffled
};

Loaders make_loaders(const DatasetHandle& handle, int batch, AugmentPolicy augment, std::uint64_t seed);

// Normalized float image (H, W, C) for one record, no augmentation.
std::vector<float> normalized_image(const DatasetHandle& handle, const Split& split, std::int64_t i);

// --- procedural generator (exposed for tests) ---------------------------------------

// Renders record `index` of a built-in set into HWC uint8 pixels.
std::vector<std::uint8_t> render_procedural(const DatasetSpec& spec, bool train, std::int64_t index, int* label);

// Minimal ustar/gzip helpers used by the fetch path.
namespace tarball {
struct Member {
  std::string name;
  std::vector<std::uint8_t> data;
};
std::vector<Member> read_tar_gz(const std::filesystem::path& path);
// Streams regular-file members to disk. `select` maps a member name to an
// output path, or to an empty path to skip the member. Returns files written.
std::vector<std::filesystem::path> extract_tar_gz(
    const std::filesystem::path& path,
    const std::function<std::filesystem::path(const std::string& member)>& select);
std::vector<std::uint8_t> gunzip_file(const std::filesystem::path& path);
}  // namespace tarball

}  // namespace fg
