#include <cstdlib>

#include <gtest/gtest.h>

#include "filtergraft/archive.hpp"
#include "helpers.hpp"

using namespace fg;

TEST(Archive, NpyRoundTrip) {
  Tensor t({2, 3}, std::vector<float>{1, -2, 3.5f, 0, 1e-7f, -0.0f});
  const auto a = archive::from_tensor("w", t);
  const auto back = archive::decode_npy("w", archive::encode_npy(a));
  EXPECT_EQ(archive::to_tensor(back), t);
}

TEST(Archive, NpzRoundTripWithText) {
  fgtest::TempDir tmp;
  std::vector<archive::NamedArray> arrays = {archive::from_tensor("000", Tensor({4}, 2.0f)),
                                             archive::from_text("__meta__", "{\"k\": 1}")};
  archive::write_npz(tmp / "x.npz", arrays);
  const auto back = archive::read_npz(tmp / "x.npz");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(archive::to_tensor(archive::find(back, "000")), Tensor({4}, 2.0f));
  EXPECT_EQ(archive::to_text(archive::find(back, "__meta__")), "{\"k\": 1}");
}

TEST(Archive, ReadsNumpyCompressedOutput) {
  fgtest::TempDir tmp;
  const auto path = tmp / "np.npz";
  const std::string cmd = "python3 -c \"import numpy as np; np.savez_compressed('" + path.string() +
                          "', a=np.arange(6, dtype=np.float32).reshape(2, 3))\" 2>/dev/null";
  if (std::system(cmd.c_str()) != 0) GTEST_SKIP() << "numpy not available";
  const auto arrays = archive::read_npz(path);
  const Tensor a = archive::to_tensor(archive::find(arrays, "a"));
  EXPECT_EQ(a.shape, (Shape{2, 3}));
  EXPECT_EQ(std::vector<float>(a.data.begin(), a.data.end()), (std::vector<float>{0, 1, 2, 3, 4, 5}));
}

TEST(Archive, NumpyReadsOurOutput) {
  fgtest::TempDir tmp;
  const auto path = tmp / "ours.npz";
  archive::write_npz(path, {archive::from_tensor("k", Tensor({2, 2}, std::vector<float>{1, 2, 3, 4}))});
  const std::string cmd = "python3 -c \"import numpy as np; d=np.load('" + path.string() +
                          "'); assert d['k'].shape == (2, 2) and d['k'][1, 0] == 3\" 2>/dev/null";
  if (std::system("python3 -c 'import numpy' 2>/dev/null") != 0) GTEST_SKIP() << "numpy not available";
  EXPECT_EQ(std::system(cmd.c_str()), 0);
}
