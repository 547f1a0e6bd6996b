#include <algorithm>
#include <cstring>
#include <functional>
#include <set>

#include <gtest/gtest.h>

#include "filtergraft/digest.hpp"
#include "filtergraft/error.hpp"
#include "filtergraft/surgery.hpp"
#include "helpers.hpp"

using namespace fg;

namespace {

std::vector<std::vector<float>> kernels_of(const FilterBank& bank) {
  const FlatStack fs = flatten_stack(bank);
  std::vector<std::vector<float>> out;
  for (std::int64_t i = 0; i < fs.size(); ++i) out.emplace_back(fs.kernel(i), fs.kernel(i) + fs.kh * fs.kw);
  return out;
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

}  // namespace

TEST(Surgery, ExtractionIsBitExact) {
  const ModelHandle m = build_model(fgtest::tiny_arch(), 1);
  const FilterBank bank = extract_depthwise(m);
  const auto entries = layer_entries(m, LayerKind::depthwise);
  ASSERT_EQ(bank.entries.size(), entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    EXPECT_EQ(tensor_digest(bank.entries[i].kernels), tensor_digest(m.params.at(entries[i]->weight)));
    EXPECT_EQ(bank.entries[i].bias, m.params.at(entries[i]->bias));
  }
  EXPECT_EQ(extract_pointwise(m).entries.size(), layer_entries(m, LayerKind::pointwise).size());
}

TEST(Surgery, LayerwiseFirstNCopiesAndFreezesOnlyThoseLayers) {
  const ModelHandle src = build_model(fgtest::tiny_arch(), 1);
  const ModelHandle dst = build_model(fgtest::tiny_arch(), 2);
  TransferPlan plan;
  plan.depth_n = 2;
  const auto r = transplant(dst, extract_depthwise(src), plan);
  const auto entries = layer_entries(dst, LayerKind::depthwise);
  EXPECT_EQ(r.model.params.at(entries[0]->weight), src.params.at(entries[0]->weight));
  EXPECT_EQ(r.model.params.at(entries[1]->weight), src.params.at(entries[1]->weight));
  EXPECT_EQ(r.model.params.at(entries[2]->weight), dst.params.at(entries[2]->weight));
  EXPECT_EQ(r.mask.frozen_param_names.size(), 4u);
  EXPECT_TRUE(r.mask.contains(entries[1]->weight));
  EXPECT_FALSE(r.mask.contains(entries[2]->weight));
  EXPECT_TRUE(verify_frozen(r.mask, r.model).pass);
  // Everything outside the transplanted layers is untouched.
  for (std::size_t i = 0; i < dst.params.size(); ++i) {
    const auto& name = dst.params.names()[i];
    if (!r.mask.contains(name)) EXPECT_EQ(r.model.params.value(i), dst.params.value(i)) << name;
  }
}

TEST(Surgery, ReverseBoundaries) {
  const ModelHandle src = build_model(fgtest::tiny_arch(), 1);
  const ModelHandle dst = build_model(fgtest::tiny_arch(), 2);
  const FilterBank bank = extract_depthwise(src);
  TransferPlan all;
  all.first_layer = 0;
  EXPECT_EQ(transplant(dst, bank, all).mask.frozen_param_names.size(), 6u);
  TransferPlan none;
  none.first_layer = 3;
  const auto r = transplant(dst, bank, none);
  EXPECT_TRUE(r.mask.empty());
  EXPECT_EQ(r.model.params, dst.params);
  TransferPlan tail;
  tail.first_layer = 1;
  const auto t = transplant(dst, bank, tail);
  const auto entries = layer_entries(dst, LayerKind::depthwise);
  EXPECT_FALSE(t.mask.contains(entries[0]->weight));
  EXPECT_TRUE(t.mask.contains(entries[2]->weight));
}

TEST(Surgery, StackFromWideSourceConsumesExactly2208) {
  const ModelHandle wide = build_model(*builtin_arch("mini_convnext_wide"), 1);
  const ModelHandle target = build_model(*builtin_arch("mini_convnext"), 2);
  TransferPlan plan;
  plan.mode = TransferMode::stack;
  const FilterBank bank = extract_depthwise(wide);
  const auto r = transplant(target, bank, plan);
  EXPECT_EQ(r.consumed, 2208);
  ASSERT_EQ(r.provenance_map.size(), 2208u);
  const FlatStack fs = flatten_stack(bank);
  std::set<std::pair<int, int>> sources;
  for (std::size_t i = 0; i < r.provenance_map.size(); ++i) {
    const auto& link = r.provenance_map[i];
    EXPECT_EQ(std::make_pair(link.source_layer, link.source_channel), fs.origin(static_cast<std::int64_t>(i)));
    sources.insert({link.source_layer, link.source_channel});
  }
  EXPECT_EQ(sources.size(), 2208u);  // injective
}

TEST(Surgery, StackFromHalfWidthIsInsufficient) {
  const ModelHandle half = build_model(*builtin_arch("mini_convnext_half"), 1);
  const ModelHandle target = build_model(*builtin_arch("mini_convnext"), 2);
  TransferPlan plan;
  plan.mode = TransferMode::stack;
  EXPECT_EQ(kind_of([&] { transplant(target, extract_depthwise(half), plan); }), ErrorKind::insufficient_stack);
}

TEST(Surgery, ShuffleIsAPermutationOfTheSourceKernels) {
  const ModelHandle src = build_model(fgtest::tiny_arch(), 1);
  const ModelHandle dst = build_model(fgtest::tiny_arch(), 2);
  TransferPlan plan;
  plan.mode = TransferMode::shuffle;
  plan.rng_seed = 11;
  const auto r = transplant(dst, extract_depthwise(src), plan);
  auto a = kernels_of(extract_depthwise(src));
  auto b = kernels_of(extract_depthwise(r.model));
  EXPECT_NE(a, b);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
  EXPECT_EQ(transplant(dst, extract_depthwise(src), plan).model.params, r.model.params);
}

TEST(Surgery, RepeatFirstKCyclesTheHeadLayers) {
  const ModelHandle src = build_model(fgtest::tiny_arch(), 1);
  const ModelHandle dst = build_model(fgtest::tiny_arch(), 2);
  TransferPlan plan;
  plan.mode = TransferMode::repeat_first_k;
  plan.k = 1;  // layer 0 has 8 kernels; the 32 target slots cycle through them
  const auto r = transplant(dst, extract_depthwise(src), plan);
  for (const auto& link : r.provenance_map) {
    EXPECT_EQ(link.source_layer, 0);
    EXPECT_EQ(link.source_channel, (link.target_layer == 0 ? link.target_channel
                                    : link.target_layer == 1 ? 8 + link.target_channel
                                                             : 16 + link.target_channel) %
                                       8);
  }
  EXPECT_EQ(r.consumed, 8);
}

TEST(Surgery, KernelSizeMismatchUnlessResizeAllowed) {
  ArchSpec big = fgtest::tiny_arch();
  for (auto& s : big.stages) s.dw_kernel = 5;
  const ModelHandle src = build_model(big, 1);
  const ModelHandle dst = build_model(fgtest::tiny_arch(), 2);
  TransferPlan plan;
  EXPECT_EQ(kind_of([&] { transplant(dst, extract_depthwise(src), plan); }), ErrorKind::kernel_size_mismatch);
  plan.allow_resize = true;
  EXPECT_TRUE(transplant(dst, extract_depthwise(src), plan).resized);
}

TEST(Surgery, PointwiseLayerwise) {
  const ModelHandle src = build_model(fgtest::tiny_arch(), 1);
  const ModelHandle dst = build_model(fgtest::tiny_arch(), 2);
  TransferPlan plan;
  plan.mode = TransferMode::pointwise_layerwise;
  const auto r = transplant(dst, extract_pointwise(src), plan);
  for (const auto* e : layer_entries(dst, LayerKind::pointwise))
    EXPECT_EQ(r.model.params.at(e->weight), src.params.at(e->weight));
  EXPECT_EQ(r.mask.frozen_param_names.size(), 12u);
  EXPECT_EQ(kind_of([&] { transplant(dst, extract_depthwise(src), plan); }), ErrorKind::invalid_argument);
}

TEST(Surgery, VerifyFrozenDetectsSingleBitFlip) {
  const ModelHandle src = build_model(fgtest::tiny_arch(), 1);
  auto r = transplant(build_model(fgtest::tiny_arch(), 2), extract_depthwise(src), TransferPlan{});
  const auto name = layer_entries(r.model, LayerKind::depthwise)[1]->weight;
  auto& v = r.model.params.at(name).data[3];
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  bits ^= 1u;
  std::memcpy(&v, &bits, 4);
  const auto rep = verify_frozen(r.mask, r.model);
  EXPECT_FALSE(rep.pass);
  EXPECT_EQ(rep.differing(), std::vector<std::string>{name});
}

TEST(Surgery, BankAndCheckpointRoundTrip) {
  fgtest::TempDir tmp;
  const ModelHandle m = build_model(fgtest::tiny_arch(), 4);
  const FilterBank bank = extract_depthwise(m, Provenance{"tiny", "colors", "abc", "2026-01-01T00:00:00Z"});
  save_bank(bank, tmp / "b.fgb");
  const FilterBank back = load_bank(tmp / "b.fgb");
  EXPECT_EQ(back.entries, bank.entries);
  EXPECT_EQ(back.provenance.key(), "tiny/colors/abc");
  save_checkpoint(m, tmp / "ck");
  const ModelHandle m2 = load_checkpoint(tmp / "ck");
  EXPECT_EQ(m2.params, m.params);
  EXPECT_EQ(m2.spec, m.spec);
}

TEST(Surgery, PlanJsonRoundTrip) {
  TransferPlan p;
  p.mode = TransferMode::shuffle;
  p.rng_seed = 5;
  p.depth_n = 4;
  p.first_layer = 1;
  const TransferPlan q = plan_from_json(to_json(p));
  EXPECT_EQ(to_json(q), to_json(p));
}
