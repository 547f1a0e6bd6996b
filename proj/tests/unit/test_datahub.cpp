#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>

#include <gtest/gtest.h>
#include <zlib.h>

#include "filtergraft/datahub.hpp"
#include "filtergraft/error.hpp"
#include "filtergraft/paths.hpp"
#include "helpers.hpp"

using namespace fg;
namespace fs = std::filesystem;

namespace {

void put_be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  for (int s = 24; s >= 0; s -= 8) v.push_back(static_cast<std::uint8_t>(x >> s));
}

void write_gz(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  gzFile f = gzopen(p.c_str(), "wb1");
  gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
  gzclose(f);
}

// IDX files shaped like the real archive; pixel (r, c) of image i is (i + r + c) % 256.
void write_fake_fashion(const fs::path& dir, std::uint32_t train_n, std::uint32_t test_n) {
  fs::create_directories(dir);
  for (auto [prefix, n] : {std::pair<std::string, std::uint32_t>{"train", train_n}, {"t10k", test_n}}) {
    std::vector<std::uint8_t> img, lab;
    put_be32(img, 2051);
    put_be32(img, n);
    put_be32(img, 28);
    put_be32(img, 28);
    put_be32(lab, 2049);
    put_be32(lab, n);
    for (std::uint32_t i = 0; i < n; ++i) {
      for (int r = 0; r < 28; ++r)
        for (int c = 0; c < 28; ++c) img.push_back(static_cast<std::uint8_t>((i + r + c) % 256));
      lab.push_back(static_cast<std::uint8_t>(i % 10));
    }
    write_gz(dir / (prefix + "-images-idx3-ubyte.gz"), img);
    write_gz(dir / (prefix + "-labels-idx1-ubyte.gz"), lab);
  }
}

class MirrorEnv {
 public:
  explicit MirrorEnv(const std::string& url) { ::setenv("FILTERGRAFT_DATA_MIRROR", url.c_str(), 1); }
  ~MirrorEnv() { ::unsetenv("FILTERGRAFT_DATA_MIRROR"); }
};

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::format_error;
}

}  // namespace

TEST(Datahub, RegistryMatchesPublishedSizes) {
  EXPECT_EQ(dataset_spec("cifar10").train_size, 50000);
  EXPECT_EQ(dataset_spec("cifar10").test_size, 10000);
  EXPECT_EQ(dataset_spec("cifar100").num_classes, 100);
  EXPECT_EQ(dataset_spec("fashion_mnist").train_size, 60000);
  EXPECT_EQ(dataset_spec("stl10_small").train_size, 5000);
  EXPECT_EQ(dataset_spec("stl10_small").test_size, 8000);
  EXPECT_EQ(dataset_spec("stl10_small").image_size, 64);
  EXPECT_EQ(kind_of([] { dataset_spec("imagenet"); }), ErrorKind::unknown_dataset);
}

TEST(Datahub, FetchFromMirrorPadsAndReplicates) {
  fgtest::TempDir tmp;
  write_fake_fashion(tmp / "mirror", 60000, 10000);
  DatasetHandle h;
  {
    MirrorEnv env("file://" + (tmp / "mirror").string());
    h = load_dataset("fashion_mnist", tmp / "data");
  }
  EXPECT_EQ(h.train.size(), 60000);
  EXPECT_EQ(h.test.size(), 10000);
  EXPECT_EQ(h.train.height, 32);
  EXPECT_EQ(h.train.channels, 3);
  const std::uint8_t* img = h.train.image(5);
  EXPECT_EQ(img[0], 0);  // padding
  const auto px = [&](int r, int c, int ch) { return img[(r * 32 + c) * 3 + ch]; };
  EXPECT_EQ(px(2 + 3, 2 + 4, 0), (5 + 3 + 4) % 256);
  EXPECT_EQ(px(2 + 3, 2 + 4, 2), px(2 + 3, 2 + 4, 0));
  EXPECT_EQ(h.train.labels[17], 7);
  EXPECT_TRUE(fs::exists(tmp / "data" / "fashion_mnist" / "digest.json"));
  EXPECT_FALSE(fs::exists(tmp / "data" / "fashion_mnist" / "download"));

  // Cached: no mirror needed, same content digest.
  const DatasetHandle again = load_dataset("fashion_mnist", tmp / "data");
  EXPECT_EQ(again.content_digest, h.content_digest);
  EXPECT_EQ(again.mean, h.mean);
}

TEST(Datahub, CorruptedCacheRaisesDigestMismatch) {
  fgtest::TempDir tmp;
  write_fake_fashion(tmp / "mirror", 60000, 10000);
  {
    MirrorEnv env("file://" + (tmp / "mirror").string());
    load_dataset("fashion_mnist", tmp / "data");
  }
  const fs::path victim = tmp / "data" / "fashion_mnist" / "raw" / "t10k-labels-idx1-ubyte.gz";
  std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(12);
  f.put('\x55');
  f.close();
  EXPECT_EQ(kind_of([&] { load_dataset("fashion_mnist", tmp / "data"); }), ErrorKind::digest_mismatch);
}

TEST(Datahub, WrongRecordCountIsRejected) {
  fgtest::TempDir tmp;
  write_fake_fashion(tmp / "mirror", 100, 10);
  MirrorEnv env("file://" + (tmp / "mirror").string());
  EXPECT_EQ(kind_of([&] { load_dataset("fashion_mnist", tmp / "data"); }), ErrorKind::format_error);
}

TEST(Datahub, UnreachableSourceRaisesDownloadFailure) {
  fgtest::TempDir tmp;
  MirrorEnv env("file://" + (tmp / "nothing-here").string());
  EXPECT_EQ(kind_of([&] { load_dataset("fashion_mnist", tmp / "data"); }), ErrorKind::download_failure);
}

TEST(Datahub, TarGzMembersAndLongNames) {
  fgtest::TempDir tmp;
  const std::string longdir(120, 'd');
  fs::create_directories(tmp / "src" / "batches" / longdir);
  std::ofstream(tmp / "src" / "batches" / "a.bin") << "alpha";
  std::ofstream(tmp / "src" / "batches" / longdir / "b.bin") << "bravo!";
  const std::string cmd = "tar -C " + (tmp / "src").string() + " -czf " + (tmp / "x.tar.gz").string() + " batches";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  const auto members = tarball::read_tar_gz(tmp / "x.tar.gz");
  std::map<std::string, std::string> got;
  for (const auto& m : members) got[m.name] = std::string(m.data.begin(), m.data.end());
  EXPECT_EQ(got.at("batches/a.bin"), "alpha");
  EXPECT_EQ(got.at("batches/" + longdir + "/b.bin"), "bravo!");

  const auto written = tarball::extract_tar_gz(tmp / "x.tar.gz", [&](const std::string& name) {
    return name.ends_with("b.bin") ? tmp / "out" / "b.bin" : fs::path{};
  });
  ASSERT_EQ(written.size(), 1u);
  std::ifstream in(tmp / "out" / "b.bin");
  std::string s;
  in >> s;
  EXPECT_EQ(s, "bravo!");
}

TEST(Datahub, SplitTablesAreExhaustiveAndDisjoint) {
  for (const char* name : {"cifar10", "cifar100", "stl10_small", "synth_objects10", "synth_objects20"}) {
    const SplitTable t = load_split_table(name, default_config_root());
    const auto& classes = dataset_spec(name).class_names;
    std::set<std::string> a(t.a.classes.begin(), t.a.classes.end()), b(t.b.classes.begin(), t.b.classes.end());
    EXPECT_EQ(a.size(), t.a.classes.size()) << name;
    for (const auto& c : a) EXPECT_FALSE(b.count(c)) << name << ": " << c;
    std::set<std::string> all(classes.begin(), classes.end());
    std::set<std::string> un = a;
    un.insert(b.begin(), b.end());
    EXPECT_EQ(un, all) << name;
  }
  EXPECT_EQ(kind_of([] { load_split_table("fashion_mnist", default_config_root()); }), ErrorKind::no_split_table);
}

TEST(Datahub, SemanticSplitIsABijectionOnRecords) {
  fgtest::TempDir tmp;
  const DatasetHandle base = load_dataset("synth_objects20", tmp.path());
  const auto [a, b] = semantic_split(base, load_split_table("synth_objects20", default_config_root()));
  EXPECT_EQ(a.train.size() + b.train.size(), base.train.size());
  EXPECT_EQ(a.test.size() + b.test.size(), base.test.size());
  std::set<std::int64_t> seen;
  for (const auto* h : {&a, &b}) {
    for (std::int64_t i = 0; i < h->train.size(); ++i) {
      const auto src = h->train.source_index[static_cast<std::size_t>(i)];
      EXPECT_TRUE(seen.insert(src).second);
      const int orig = base.train.labels[static_cast<std::size_t>(src)];
      EXPECT_EQ(h->spec.class_names[static_cast<std::size_t>(h->train.labels[static_cast<std::size_t>(i)])],
                base.spec.class_names[static_cast<std::size_t>(orig)]);
    }
  }
  EXPECT_EQ(static_cast<std::int64_t>(seen.size()), base.train.size());
  // Labels are remapped in ascending class-id order.
  std::vector<std::string> expected;
  for (const auto& c : base.spec.class_names)
    if (std::find(a.spec.class_names.begin(), a.spec.class_names.end(), c) != a.spec.class_names.end())
      expected.push_back(c);
  EXPECT_EQ(a.spec.class_names, expected);
  EXPECT_EQ(a.spec.name, "synth_objects20:man_made");
}

TEST(Datahub, ProceduralRecordsAreDeterministic) {
  const auto& spec = dataset_spec("synth_silhouettes10");
  int l1 = -1, l2 = -1;
  EXPECT_EQ(render_procedural(spec, true, 123, &l1), render_procedural(spec, true, 123, &l2));
  EXPECT_EQ(l1, 123 % 10);
  EXPECT_NE(render_procedural(spec, true, 123, &l1), render_procedural(spec, false, 123, &l2));
}

TEST(Datahub, LoaderOrderIsAFunctionOfSeedAndEpoch) {
  const DatasetHandle h = fgtest::color_dataset(3, 11);
  auto collect = [&](std::uint64_t seed, int epoch) {
    Loaders l = make_loaders(h, 8, AugmentPolicy::crop_flip, seed);
    l.train.begin_epoch(epoch);
    std::vector<std::int64_t> idx;
    std::vector<float> px;
    Batch b;
    int batches = 0;
    while (l.train.next(b)) {
      idx.insert(idx.end(), b.indices.begin(), b.indices.end());
      px.insert(px.end(), b.images.data.begin(), b.images.data.end());
      ++batches;
    }
    EXPECT_EQ(batches, 5);  // 33 records, last partial batch kept
    return std::make_pair(idx, px);
  };
  const auto a = collect(4, 2);
  EXPECT_EQ(a, collect(4, 2));
  EXPECT_NE(a.first, collect(4, 3).first);
  EXPECT_NE(a.first, collect(5, 2).first);
  std::vector<std::int64_t> sorted = a.first;
  std::sort(sorted.begin(), sorted.end());
  for (std::int64_t i = 0; i < 33; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);

  Loaders l = make_loaders(h, 8, AugmentPolicy::crop_flip, 4);
  l.test.begin_epoch(0);
  Batch b;
  ASSERT_TRUE(l.test.next(b));
  EXPECT_EQ(b.indices, (std::vector<std::int64_t>{0, 1, 2, 3, 4, 5, 6, 7}));
  const auto ref = normalized_image(h, h.test, 1);
  EXPECT_TRUE(std::equal(ref.begin(), ref.end(), b.images.data.begin() + static_cast<long>(ref.size())));
}
