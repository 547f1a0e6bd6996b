#pragma once

#include <algorithm>
#include <array>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "filtergraft/archzoo.hpp"
#include "filtergraft/datahub.hpp"
#include "filtergraft/rng.hpp"

namespace fgtest {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "fgtest-XXXXXX").string();
    path_ = ::mkdtemp(tmpl.data());
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

// Small 3-layer net that trains in well under a second.
inline fg::ArchSpec tiny_arch(int classes = 4, int size = 8, fg::BlockKind kind = fg::BlockKind::standard_ds) {
  fg::ArchSpec s;
  s.name = "tiny";
  s.block_kind = kind;
  s.stem_patch = 2;
  s.stem_channels = 8;
  s.stages = {{2, 8, 3}, {1, 16, 3}};
  s.num_classes = classes;
  s.input = {size, size, 3};
  return s;
}

// Each class is a distinct flat color plus noise; `per_class` images per class.
inline fg::DatasetHandle color_dataset(int classes, int per_class, int size = 8, std::uint64_t seed = 1,
                                       int test_per_class = -1) {
  fg::DatasetHandle h;
  h.spec.name = "colors";
  h.spec.num_classes = classes;
  h.spec.image_size = size;
  h.spec.channels = 3;
  h.base_name = "colors";
  fg::Rng rng(seed);
  std::vector<std::array<int, 3>> palette;
  for (int c = 0; c < classes; ++c)
    palette.push_back({static_cast<int>(rng.below(256)), static_cast<int>(rng.below(256)),
                       static_cast<int>(rng.below(256))});
  auto fill = [&](fg::Split& s, int n_per) {
    s.height = s.width = size;
    s.channels = 3;
    for (int c = 0; c < classes; ++c) {
      for (int i = 0; i < n_per; ++i) {
        for (int p = 0; p < size * size; ++p)
          for (int ch = 0; ch < 3; ++ch) {
            const int v = palette[c][ch] + static_cast<int>(rng.normal() * 12.0);
            s.images.push_back(static_cast<std::uint8_t>(std::clamp(v, 0, 255)));
          }
        s.labels.push_back(c);
        s.source_index.push_back(static_cast<std::int64_t>(s.labels.size()) - 1);
      }
    }
  };
  fill(h.train, per_class);
  fill(h.test, test_per_class < 0 ? per_class : test_per_class);
  h.mean = {0.5f, 0.5f, 0.5f};
  h.stddev = {0.25f, 0.25f, 0.25f};
  h.content_digest = "colors-" + std::to_string(seed);
  h.spec.train_size = h.train.size();
  h.spec.test_size = h.test.size();
  return h;
}

}  // namespace fgtest
