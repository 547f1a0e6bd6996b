#include <sys/wait.h>
#include <unistd.h>
#include <zlib.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <set>

#include <gtest/gtest.h>

#include "filtergraft/digest.hpp"
#include "filtergraft/error.hpp"
#include "filtergraft/fsutil.hpp"
#include "filtergraft/reportkit.hpp"
#include "helpers.hpp"

using namespace fg;
using nlohmann::json;

namespace {

RunRecord fake_record(const std::string& key, const std::string& dataset, double acc,
                      std::optional<std::pair<std::string, double>> baseline = std::nullopt) {
  RunRecord r;
  r.config_digest = sha256_hex(key);
  r.run_id = run_id_for_digest(r.config_digest);
  r.role = baseline ? "transfer" : "base";
  r.arch = "tiny";
  r.dataset = dataset;
  r.per_epoch = {{1, 1.25, acc * 0.5}, {2, 0.75, acc}};
  r.final_acc = acc;
  if (baseline) {
    r.baseline_ref = baseline->first;
    r.retention = retention(acc, baseline->second);
  }
  r.created_at = "2026-01-01T00:00:00Z";
  return r;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::format_error;
}

// Gaussian blob or horizontal derivative-of-Gaussian, 7x7, with a given scale.
std::vector<float> analytic_kernel(bool derivative, double sigma, double scale) {
  std::vector<float> k(49);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) {
      const double u = x - 3, v = y - 3;
      const double g = std::exp(-(u * u + v * v) / (2 * sigma * sigma));
      k[static_cast<std::size_t>(y * 7 + x)] = static_cast<float>(scale * (derivative ? -u * g : g));
    }
  return k;
}

FilterBank bank_from(const std::vector<std::vector<float>>& kernels, int layers = 1) {
  FilterBank b;
  b.kind = LayerKind::depthwise;
  b.provenance = {"synthetic", "none", "0", "2026-01-01T00:00:00Z"};
  const std::size_t per = kernels.size() / static_cast<std::size_t>(layers);
  for (int l = 0; l < layers; ++l) {
    BankEntry e;
    e.layer_id = l;
    e.kernels = Tensor({static_cast<std::int64_t>(per), 7, 7});
    e.bias = Tensor({static_cast<std::int64_t>(per)}, 0.0f);
    for (std::size_t i = 0; i < per; ++i)
      std::copy(kernels[l * per + i].begin(), kernels[l * per + i].end(), e.kernels.ptr() + i * 49);
    b.entries.push_back(std::move(e));
  }
  return b;
}

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

}  // namespace

// --- store ----------------------------------------------------------------------------

TEST(Store, AppendThenReadBackIsFieldIdentical) {
  fgtest::TempDir tmp;
  ResultStore store(tmp.path());
  RunRecord r = fake_record("a", "colors", 0.123456789012345);
  r.plan = PlanSummary{"depthwise", "shuffle", 4, 0, 3, true, 99, "x/y/z"};
  r.extra = {{"k", 1}};
  store.append(r);
  const auto back = store.records();
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(to_json(back[0]), to_json(r));
  EXPECT_EQ(back[0].final_acc, r.final_acc);
  EXPECT_EQ(store.index().at(r.config_digest), r.run_id);
}

TEST(Store, DuplicateDigestNamesThePriorRun) {
  fgtest::TempDir tmp;
  ResultStore store(tmp.path());
  const RunRecord r = fake_record("a", "colors", 0.5);
  store.append(r);
  try {
    store.append(r);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::duplicate_run);
    EXPECT_NE(std::string(e.what()).find(r.run_id), std::string::npos);
  }
  EXPECT_EQ(store.records().size(), 1u);
}

TEST(Store, TrailingPartialLineIsIgnored) {
  fgtest::TempDir tmp;
  ResultStore store(tmp.path());
  store.append(fake_record("a", "colors", 0.5));
  std::ofstream(store.records_path(), std::ios::app) << "{\"schema_version\": 1, \"run_";
  EXPECT_EQ(store.records().size(), 1u);
}

TEST(Store, ConcurrentAppendsFromFourProcesses) {
  fgtest::TempDir tmp;
  constexpr int kProcs = 4, kEach = 25;
  std::vector<pid_t> kids;
  for (int p = 0; p < kProcs; ++p) {
    const pid_t pid = fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
      int rc = 0;
      try {
        ResultStore store(tmp.path());
        for (int i = 0; i < kEach; ++i) {
          RunRecord r = fake_record("p" + std::to_string(p) + "-" + std::to_string(i), "colors", 0.25);
          r.extra = {{"padding", std::string(4000, static_cast<char>('a' + p))}};
          store.append(r);
        }
      } catch (...) {
        rc = 1;
      }
      _exit(rc);
    }
    kids.push_back(pid);
  }
  for (pid_t pid : kids) {
    int status = 0;
    waitpid(pid, &status, 0);
    EXPECT_TRUE(WIFEXITED(status) && WEXITSTATUS(status) == 0);
  }
  ResultStore store(tmp.path());
  const auto recs = store.records();
  EXPECT_EQ(recs.size(), static_cast<std::size_t>(kProcs * kEach));
  EXPECT_EQ(store.index().size(), recs.size());
}

// --- matrix ---------------------------------------------------------------------------

TEST(Matrix, ThresholdRule) {
  EXPECT_EQ(classify_delta(0.0005), CellSign::no_change);
  EXPECT_EQ(classify_delta(-0.0005), CellSign::no_change);
  EXPECT_EQ(classify_delta(0.001), CellSign::increase);
  EXPECT_EQ(classify_delta(-0.0015), CellSign::decrease);
}

TEST(Matrix, ConventionsAndOrdering) {
  fgtest::TempDir tmp;
  ResultStore store(tmp.path());
  // Registry train sizes: cifar10 50000 > stl10_small 5000.
  const RunRecord bc = fake_record("base-c", "cifar10", 0.80), bs = fake_record("base-s", "stl10_small", 0.60);
  const RunRecord cc = fake_record("c<-c", "cifar10", 0.81, {{bc.run_id, 0.80}});
  const RunRecord cs = fake_record("c<-s", "cifar10", 0.8105, {{bc.run_id, 0.80}});
  const RunRecord ss = fake_record("s<-s", "stl10_small", 0.58, {{bs.run_id, 0.60}});
  const RunRecord sc = fake_record("s<-c", "stl10_small", 0.55, {{bs.run_id, 0.60}});
  for (const auto* r : {&bc, &bs, &cc, &cs, &ss, &sc}) store.append(*r);
  json m = {{"kind", "matrix"},
            {"datasets", {"stl10_small", "cifar10"}},
            {"transfer_kind", "depthwise"},
            {"bases", {{{"dataset", "cifar10"}, {"run_id", bc.run_id}}, {{"dataset", "stl10_small"}, {"run_id", bs.run_id}}}},
            {"cells",
             {{{"source", "cifar10"}, {"target", "cifar10"}, {"run_id", cc.run_id}},
              {{"source", "stl10_small"}, {"target", "cifar10"}, {"run_id", cs.run_id}},
              {{"source", "stl10_small"}, {"target", "stl10_small"}, {"run_id", ss.run_id}},
              {{"source", "cifar10"}, {"target", "stl10_small"}, {"run_id", sc.run_id}}}}};
  store.write_manifest("m", m);
  const MatrixTable t = matrix_table(store, "m", true);
  EXPECT_EQ(t.rows, (std::vector<std::string>{"cifar10", "stl10_small"}));
  EXPECT_EQ(t.cols, (std::vector<std::string>{"stl10_small", "cifar10"}));
  // Row cifar10: col stl10_small is off-diagonal vs selffer 0.81; col cifar10 is the diagonal vs original 0.80.
  EXPECT_NEAR(*t.cells[0][0].delta, 0.0005, 1e-12);
  EXPECT_EQ(*t.cells[0][0].sign, CellSign::no_change);
  EXPECT_NEAR(*t.cells[0][1].delta, 0.01, 1e-12);
  EXPECT_EQ(*t.cells[0][1].sign, CellSign::increase);
  EXPECT_NEAR(*t.cells[1][1].delta, 0.55 - 0.58, 1e-12);
  EXPECT_EQ(*t.cells[1][1].sign, CellSign::decrease);
  EXPECT_NE(t.render_text().find("cifar10"), std::string::npos);
  EXPECT_EQ(t.to_json()["cells"].size(), 4u);
}

TEST(Matrix, SelfferOnlyStoreLeavesOffDiagonalsMissing) {
  fgtest::TempDir tmp;
  ResultStore store(tmp.path());
  const RunRecord b = fake_record("b", "cifar10", 0.8);
  const RunRecord s = fake_record("s", "cifar10", 0.79, {{b.run_id, 0.8}});
  store.append(b);
  store.append(s);
  store.write_manifest("m", {{"kind", "matrix"},
                             {"datasets", {"cifar10", "cifar100"}},
                             {"bases", {{{"dataset", "cifar10"}, {"run_id", b.run_id}}}},
                             {"cells", {{{"source", "cifar10"}, {"target", "cifar10"}, {"run_id", s.run_id}}}}});
  const MatrixTable t = matrix_table(store, "m");
  EXPECT_EQ(t.missing.size(), 3u);
  EXPECT_TRUE(t.cells[0][0].accuracy.has_value());  // cifar10 row, cifar10 col
  EXPECT_EQ(kind_of([&] { matrix_table(store, "m", true); }), ErrorKind::incomplete_matrix);
}

// --- curves ---------------------------------------------------------------------------

TEST(Curves, PointsRecomputeRetentionFromRecords) {
  fgtest::TempDir tmp;
  ResultStore store(tmp.path());
  const RunRecord base = fake_record("base", "d", 0.64);
  store.append(base);
  json series = {{"AnB", json::array()}, {"BnB", json::array()}};
  std::map<int, double> want;
  for (int n : {3, 6, 9, 12}) {
    const double acc = 0.6 + 0.001 * n;
    const RunRecord a = fake_record("a" + std::to_string(n), "d", acc, {{base.run_id, 0.64}});
    const RunRecord b = fake_record("b" + std::to_string(n), "d", 0.63, {{base.run_id, 0.64}});
    store.append(a);
    store.append(b);
    series["AnB"].push_back({{"depth", n}, {"run_id", a.run_id}, {"replicate", 0}});
    series["BnB"].push_back({{"depth", n}, {"run_id", b.run_id}, {"replicate", 0}});
    want[n] = acc / 0.64;
  }
  store.write_manifest("c", {{"kind", "anb"}, {"series", series}});
  const CurveData d = curve_plot(store, "c", CurveMetric::retention, tmp / "curve");
  ASSERT_EQ(d.series.size(), 2u);
  for (const auto& s : d.series) EXPECT_EQ(s.points.size(), 4u);
  for (const auto& [n, v] : d.series[0].points) EXPECT_DOUBLE_EQ(v, want[n]);
  const json on_disk = json::parse(read_text_file(tmp / "curve.json"));
  EXPECT_EQ(on_disk["series"][0]["points"].size(), 4u);
  EXPECT_NE(read_text_file(tmp / "curve.svg").find("<svg"), std::string::npos);

  store.write_manifest("empty", {{"kind", "anb"}, {"series", json::object()}});
  EXPECT_EQ(kind_of([&] { curve_data(store, "empty", CurveMetric::accuracy); }), ErrorKind::no_records);
}

// --- grids ----------------------------------------------------------------------------

TEST(Grid, PngIsWellFormed) {
  const std::vector<std::uint8_t> px = {0, 64, 128, 255, 1, 2};
  const auto png = encode_png_gray(px, 3, 2);
  ASSERT_GT(png.size(), 33u);
  EXPECT_EQ(std::vector<std::uint8_t>(png.begin(), png.begin() + 8),
            (std::vector<std::uint8_t>{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'}));
  // Walk the chunks and check every CRC.
  std::size_t pos = 8;
  std::vector<std::string> types;
  while (pos < png.size()) {
    const std::uint32_t len = be32(&png[pos]);
    const std::string type(png.begin() + static_cast<long>(pos) + 4, png.begin() + static_cast<long>(pos) + 8);
    const std::uint32_t crc = be32(&png[pos + 8 + len]);
    EXPECT_EQ(crc, crc32(0, &png[pos + 4], len + 4)) << type;
    types.push_back(type);
    pos += 12 + len;
  }
  EXPECT_EQ(types, (std::vector<std::string>{"IHDR", "IDAT", "IEND"}));
}

TEST(Grid, DeterministicAndConstantTileIsUniform) {
  std::vector<std::vector<float>> ks;
  for (int i = 0; i < 12; ++i) ks.push_back(analytic_kernel(i % 2 == 1, 1.0 + 0.1 * i, 1.0));
  ks[0] = std::vector<float>(49, 0.7f);
  const FilterBank bank = bank_from(ks, 3);
  EXPECT_EQ(select_layer(bank, LayerSelector::first), 0);
  EXPECT_EQ(select_layer(bank, LayerSelector::middle), 1);
  EXPECT_EQ(select_layer(bank, LayerSelector::last), 2);
  EXPECT_EQ(filter_grid_png(bank, 0, 2, 2, true, 5), filter_grid_png(bank, 0, 2, 2, true, 5));
  EXPECT_NE(filter_grid_png(bank, 0, 2, 2, true, 5), filter_grid_png(bank, 1, 2, 2, true, 5));

  // With one row, one column and all 4 kernels sampled over several seeds, the
  // constant kernel eventually lands in the single tile.
  bool saw_constant = false;
  for (std::uint64_t seed = 0; seed < 16 && !saw_constant; ++seed) {
    const auto png = filter_grid_png(bank, 0, 1, 1, true, seed, 1);
    // 1x1 tile at scale 1 plus a 1px gap on each side: decode the single IDAT.
    std::size_t pos = 8;
    std::vector<std::uint8_t> idat;
    while (pos < png.size()) {
      const std::uint32_t len = be32(&png[pos]);
      if (std::string(png.begin() + static_cast<long>(pos) + 4, png.begin() + static_cast<long>(pos) + 8) == "IDAT")
        idat.insert(idat.end(), png.begin() + static_cast<long>(pos) + 8, png.begin() + static_cast<long>(pos) + 8 + len);
      pos += 12 + len;
    }
    std::vector<std::uint8_t> raw(4096);
    uLongf n = raw.size();
    ASSERT_EQ(uncompress(raw.data(), &n, idat.data(), idat.size()), Z_OK);
    const std::uint32_t w = be32(&png[16]), h = be32(&png[20]);
    std::set<std::uint8_t> tile;
    for (std::uint32_t y = 1; y + 1 < h; ++y)
      for (std::uint32_t x = 1; x + 1 < w; ++x) tile.insert(raw[y * (w + 1) + 1 + x]);
    if (tile.size() == 1) {
      saw_constant = true;
      EXPECT_NEAR(*tile.begin(), 128, 1);
    }
  }
  EXPECT_TRUE(saw_constant);
}

TEST(Grid, EmptyLayerRaises) {
  FilterBank b = bank_from({analytic_kernel(false, 1, 1)});
  b.entries[0].kernels = Tensor({0, 7, 7});
  b.entries[0].bias = Tensor({0});
  EXPECT_EQ(kind_of([&] { filter_grid_png(b, 0, 1, 1, true, 0); }), ErrorKind::empty_layer);
}

// --- clustering -----------------------------------------------------------------------

TEST(Cluster, GaussianVersusDerivativeSeparatesPerfectly) {
  std::vector<std::vector<float>> ks;
  std::vector<int> labels;
  Rng rng(9);
  for (int i = 0; i < 40; ++i) {
    const bool deriv = i % 2 == 1;
    ks.push_back(analytic_kernel(deriv, rng.uniform(0.8, 1.6), (deriv && i % 4 == 3 ? -1.0 : 1.0) * rng.uniform(0.1, 5)));
    labels.push_back(deriv ? 1 : 0);
  }
  const auto rep = cluster_filters({bank_from(ks, 2)}, 2, 3);
  ASSERT_EQ(rep.assignments.size(), 40u);
  EXPECT_EQ(cluster_purity(rep.assignments, labels), 1.0);
  EXPECT_EQ(rep.centroids.size(), 2u);
  EXPECT_EQ(rep.per_layer_histogram.size(), 2u);

  // Positive rescaling leaves every assignment unchanged.
  auto scaled = ks;
  for (std::size_t i = 0; i < scaled.size(); ++i)
    for (auto& v : scaled[i]) v *= static_cast<float>(0.01 + 7.0 * static_cast<double>(i % 5));
  EXPECT_EQ(cluster_filters({bank_from(scaled, 2)}, 2, 3).assignments, rep.assignments);
  EXPECT_EQ(cluster_filters({bank_from(ks, 2)}, 2, 3).assignments, rep.assignments);
}

TEST(Cluster, KEqualsNHasZeroInertia) {
  std::vector<std::vector<float>> ks;
  for (int i = 0; i < 6; ++i) ks.push_back(analytic_kernel(i % 2 == 1, 0.7 + 0.3 * i, 1.0));
  const auto rep = cluster_filters({bank_from(ks)}, 6, 0);
  EXPECT_NEAR(rep.inertia, 0.0, 1e-9);
}

TEST(Cluster, ZeroKernelsExcludedAndDegenerateRaised) {
  std::vector<std::vector<float>> ks = {analytic_kernel(false, 1, 1), std::vector<float>(49, 0.0f),
                                        analytic_kernel(true, 1, 1), analytic_kernel(true, 1.3, 1)};
  const auto rep = cluster_filters({bank_from(ks)}, 2, 0);
  EXPECT_EQ(rep.kernels.size(), 3u);
  ASSERT_EQ(rep.excluded.size(), 1u);
  EXPECT_EQ(rep.excluded[0], (KernelRef{0, 0, 1}));
  EXPECT_EQ(kind_of([&] { cluster_filters({bank_from({std::vector<float>(49, 0.0f), analytic_kernel(false, 1, 1)})}, 2, 0); }),
            ErrorKind::degenerate);
}

TEST(Cluster, MixedKernelSizesRaise) {
  FilterBank a = bank_from({analytic_kernel(false, 1, 1), analytic_kernel(true, 1, 1)});
  FilterBank b = a;
  b.entries[0].kernels = Tensor({2, 3, 3}, 1.0f);
  EXPECT_EQ(kind_of([&] { cluster_filters({a, b}, 2, 0); }), ErrorKind::heterogeneous_kernel_size);
}
