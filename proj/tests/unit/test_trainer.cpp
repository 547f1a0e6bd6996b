#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "filtergraft/error.hpp"
#include "filtergraft/rng.hpp"
#include "filtergraft/trainer.hpp"
#include "helpers.hpp"

using namespace fg;

namespace {

TrainConfig quick(int epochs = 2) {
  TrainConfig c;
  c.epochs = epochs;
  c.lr = 3e-3;
  c.batch = 16;
  c.warmup_epochs = 0;
  c.augment = AugmentPolicy::none;
  return c;
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

TEST(Retention, WorkedExamples) {
  EXPECT_EQ(retention(0.70, 0.80), 0.875);
  EXPECT_NEAR(retention(0.862, 0.869), 0.99194476, 1e-8);
  EXPECT_GT(retention(0.9, 0.8), 1.0);
  EXPECT_EQ(kind_of([] { retention(0.5, 0.0); }), ErrorKind::zero_baseline);
}

TEST(Retention, Properties) {
  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(1e-6, 1.0), b = rng.uniform(1e-6, 1.0);
    EXPECT_EQ(retention(x, x), 1.0);
    EXPECT_NEAR(retention(x, b) * b, x, 1e-14 * x);
  }
}

TEST(TrainConfig, Invariants) {
  TrainConfig c;
  c.epochs = 0;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::invalid_spec);
  c = TrainConfig{};
  c.lr = 0;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::invalid_spec);
  c = TrainConfig{};
  c.label_smoothing = 1.0;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::invalid_spec);
  EXPECT_EQ(kind_of([] { train_config_from_json({{"epochs", 3}, {"lrr", 0.1}}); }), ErrorKind::invalid_spec);
  const TrainConfig d;
  EXPECT_EQ(to_json(train_config_from_json(to_json(d))), to_json(d));
  EXPECT_EQ(config_digest(d), config_digest(train_config_from_json(to_json(d))));
}

TEST(TrainConfig, PinnedDefaults) {
  const TrainConfig d;
  EXPECT_EQ(d.epochs, 50);
  EXPECT_EQ(d.optimizer, OptimizerKind::adamw);
  EXPECT_EQ(d.lr, 3e-3);
  EXPECT_EQ(d.weight_decay, 0.05);
  EXPECT_EQ(d.batch, 256);
  EXPECT_EQ(d.warmup_epochs, 5);
  EXPECT_EQ(d.label_smoothing, 0.1);
}

TEST(Schedule, WarmupThenCosine) {
  EXPECT_DOUBLE_EQ(scheduled_lr(1.0, 0, 100, 10), 0.1);
  EXPECT_DOUBLE_EQ(scheduled_lr(1.0, 9, 100, 10), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(1.0, 10, 100, 10), 1.0);
  EXPECT_NEAR(scheduled_lr(1.0, 55, 100, 10), 0.5, 1e-12);
  EXPECT_LT(scheduled_lr(1.0, 99, 100, 10), 0.01);
}

TEST(Evaluate, UntrainedIsNearChanceAndDeterministic) {
  const DatasetHandle data = fgtest::color_dataset(10, 40);
  const ModelHandle m = build_model(fgtest::tiny_arch(10), 3);
  const double a = evaluate(m, data, data.test);
  EXPECT_GE(a, 0.05);
  EXPECT_LE(a, 0.20);
  EXPECT_EQ(a, evaluate(m, data, data.test));
}

TEST(Train, MemorizesTenImages) {
  const DatasetHandle data = fgtest::color_dataset(10, 1, 8, 5);
  ModelHandle m = build_model(fgtest::tiny_arch(10), 1);
  TrainConfig c = quick(300);
  c.batch = 10;
  c.lr = 1e-2;
  c.label_smoothing = 0.0;
  c.weight_decay = 0.0;
  const RunRecord r = train(m, data, c);
  ASSERT_TRUE(r.completed()) << r.error;
  EXPECT_LT(r.per_epoch.back().train_loss, 0.05);
  EXPECT_EQ(evaluate(m, data, data.train), 1.0);
}

TEST(Train, RecordInvariants) {
  const DatasetHandle data = fgtest::color_dataset(4, 20);
  ModelHandle m = build_model(fgtest::tiny_arch(4), 1);
  RunRecord r = train(m, data, quick(3));
  r.run_id = "0123456789abcdef";
  r.config_digest = "0123456789abcdef0123";
  ASSERT_EQ(r.per_epoch.size(), 3u);
  EXPECT_EQ(r.final_acc, r.per_epoch.back().test_acc);
  EXPECT_EQ(r.params_digest, params_digest(m.params));
  EXPECT_FALSE(r.retention.has_value());
  EXPECT_NO_THROW(r.validate());
  const RunRecord back = record_from_json(to_json(r));
  EXPECT_EQ(to_json(back), to_json(r));
}

TEST(Train, SameSeedsSameResult) {
  const DatasetHandle data = fgtest::color_dataset(4, 20);
  TrainConfig c = quick(2);
  c.augment = AugmentPolicy::crop_flip;
  ModelHandle a = build_model(fgtest::tiny_arch(4), 1), b = build_model(fgtest::tiny_arch(4), 1);
  const RunRecord ra = train(a, data, c), rb = train(b, data, c);
  EXPECT_EQ(ra.final_acc, rb.final_acc);
  EXPECT_EQ(ra.params_digest, rb.params_digest);
  EXPECT_EQ(ra.per_epoch, rb.per_epoch);
}

TEST(Train, HeadIsRebuiltForTheDatasetClassCount) {
  const DatasetHandle data = fgtest::color_dataset(3, 10);
  ModelHandle m = build_model(fgtest::tiny_arch(7), 1);
  const RunRecord r = train(m, data, quick(1));
  EXPECT_TRUE(r.completed());
  EXPECT_EQ(m.spec.num_classes, 3);
}

TEST(Train, FrozenParamsUntouchedEvenWithWeightDecay) {
  const DatasetHandle data = fgtest::color_dataset(4, 20);
  const ModelHandle src = build_model(fgtest::tiny_arch(4), 7);
  TransferPlan plan;
  auto tr = transplant(build_model(fgtest::tiny_arch(4), 8), extract_depthwise(src), plan);
  TrainConfig c = quick(2);
  c.weight_decay = 0.5;
  TrainOptions opts;
  opts.mask = &tr.mask;
  opts.verify_each_epoch = true;
  const RunRecord r = train(tr.model, data, c, opts);
  EXPECT_TRUE(r.frozen_verified);
  EXPECT_EQ(r.frozen_params, 6);
  for (const auto* e : layer_entries(src, LayerKind::depthwise))
    EXPECT_EQ(tr.model.params.at(e->weight), src.params.at(e->weight));
  // Unfrozen tensors did move.
  EXPECT_NE(tr.model.params.at("head.fc.weight"), build_model(fgtest::tiny_arch(4), 8).params.at("head.fc.weight"));
}

TEST(Train, MutationOfFrozenParamIsCaught) {
  const DatasetHandle data = fgtest::color_dataset(4, 20);
  auto tr = transplant(build_model(fgtest::tiny_arch(4), 8), extract_depthwise(build_model(fgtest::tiny_arch(4), 7)),
                       TransferPlan{});
  const std::string victim = layer_entries(tr.model, LayerKind::depthwise)[0]->weight;
  TrainOptions opts;
  opts.mask = &tr.mask;
  opts.after_step = [&](ModelHandle& m, std::int64_t step) {
    if (step == 2) m.params.at(victim).data[0] += 1e-3f;
  };
  EXPECT_EQ(kind_of([&] { train(tr.model, data, quick(1), opts); }), ErrorKind::mask_violation);
}

TEST(Train, UnknownMaskNameRejected) {
  const DatasetHandle data = fgtest::color_dataset(4, 5);
  ModelHandle m = build_model(fgtest::tiny_arch(4), 1);
  FreezeMask mask;
  mask.frozen_param_names.insert("no.such.param");
  TrainOptions opts;
  opts.mask = &mask;
  EXPECT_EQ(kind_of([&] { train(m, data, quick(1), opts); }), ErrorKind::unknown_parameter);
}

TEST(Train, NonFiniteLossRecordsFailure) {
  const DatasetHandle data = fgtest::color_dataset(4, 20);
  ModelHandle m = build_model(fgtest::tiny_arch(4), 1);
  TrainOptions opts;
  opts.after_step = [](ModelHandle& mm, std::int64_t step) {
    if (step == 1) mm.params.at("head.fc.weight").data[0] = std::numeric_limits<float>::quiet_NaN();
  };
  const RunRecord r = train(m, data, quick(2), opts);
  EXPECT_EQ(r.status, "failed");
  EXPECT_EQ(r.error.rfind("nan-loss", 0), 0u) << r.error;
}
