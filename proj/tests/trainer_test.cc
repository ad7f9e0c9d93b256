#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "branchconnect/trainer.h"
#include "test_util.h"

namespace branchconnect {
namespace {

constexpr char kTinyBase[] = R"(INPUT: 3x8x8
INIT: MSRA
CONV: 3x3,4
POOL: 2x2,Max,2
CONV: 3x3,6
POOL: 2x2,Ave,2
FC: 8
FC: 4
)";

BranchNetSpec TinySpec(std::size_t m, std::size_t k, std::size_t side = 8) {
  std::string text = kTinyBase;
  const std::string input = std::to_string(side) + "x" + std::to_string(side);
  text.replace(text.find("8x8"), 3, input);
  return ReshapeToBranchConnect(ParseArchSpec(text), m, k);
}

struct TinyData {
  Dataset train;
  Dataset test;
};

TinyData MakeData(double noise, std::size_t per_class = 16) {
  const Dataset all = GenerateSynthetic(4, per_class, 8, 21, noise);
  auto [train, test] = Split(all, all.size() / 2, all.size() / 2, 2);
  return {std::move(train), std::move(test)};
}

Batch FirstBatch(const Dataset& ds, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(0);
  return Preprocess(ds, idx, {}, PreprocessMode::kEval, rng);
}

TEST(LrScheduleTest, ParsesFormatsAndValidates) {
  const std::vector<LrStage> s = ParseLrSchedule("0:1e-3,100:1e-4");
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[1].iteration, 100u);
  EXPECT_DOUBLE_EQ(s[1].rate, 1e-4);
  EXPECT_EQ(ParseLrSchedule(FormatLrSchedule(s)).size(), 2u);
  EXPECT_EQ(ParseLrSchedule("0.01").front().rate, 0.01);
  TrainConfig cfg;
  cfg.lr_schedule = s;
  EXPECT_DOUBLE_EQ(cfg.LearningRateAt(99), 1e-3);
  EXPECT_DOUBLE_EQ(cfg.LearningRateAt(100), 1e-4);
  EXPECT_NO_THROW(cfg.Validate());

  cfg.lr_schedule = {{5, 0.1}};
  EXPECT_THROW(cfg.Validate(), Error);
  cfg.lr_schedule = {{0, 0.1}, {10, 0.01}, {10, 0.001}};
  EXPECT_THROW(cfg.Validate(), Error);
  cfg.lr_schedule = {{0, -0.1}};
  EXPECT_THROW(cfg.Validate(), Error);
  cfg.lr_schedule = {{0, 0.1}};
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.Validate(), Error);
  EXPECT_THROW(ParseLrSchedule("0:0.1,abc"), Error);
}

TEST(TrainStepTest, ZeroRatesLeaveEverythingUnchanged) {
  const TinyData data = MakeData(0.3);
  NetworkState state = InitNetwork(TinySpec(4, 2), 3);
  const NetworkState before = state;
  TrainConfig cfg;
  cfg.gate_lr_multiplier = 0;
  Rng rng(1);
  TrainStep(state, FirstBatch(data.train, 8), cfg, 0.0, rng);
  EXPECT_EQ(state.parameters, before.parameters);
  EXPECT_EQ(state.momentum, before.momentum);
  EXPECT_TRUE(std::equal(state.gates.real_values().begin(), state.gates.real_values().end(),
                         before.gates.real_values().begin()));
}

TEST(TrainStepTest, GatesTakeABareClippedStep) {
  const TinyData data = MakeData(0.3);
  NetworkState state = InitNetwork(TinySpec(4, 2), 3);
  TrainConfig cfg;
  Rng rng(1);
  const Batch batch = FirstBatch(data.train, 8);
  for (int step = 0; step < 5; ++step) {
    const std::vector<Scalar> real(state.gates.real_values().begin(), state.gates.real_values().end());
    const double lr = 0.05;
    TrainStep(state, batch, cfg, lr, rng);
    for (std::size_t i = 0; i < real.size(); ++i) {
      const Scalar expect = std::clamp<Scalar>(real[i] - static_cast<Scalar>(10 * lr) * state.gates.gate_grad()[i], 0, 1);
      ASSERT_NEAR(state.gates.real_values()[i], expect, 1e-15);
    }
    ASSERT_TRUE(state.gates.SatisfiesConstraints());
  }
}

TEST(TrainStepTest, UnusedBranchFollowsTheWeightDecayRecurrence) {
  const TinyData data = MakeData(0.3);
  NetworkState state = InitNetwork(TinySpec(3, 1), 3);
  // Every class reads branch 0 only, so branches 1 and 2 see no data gradient.
  const std::vector<std::size_t> zero{0};
  for (std::size_t c = 0; c < 4; ++c) state.gates.SetActive(c, zero);
  state.gates.set_frozen(true);
  const Tensor w0 = state.parameters.at("branch1.0.weight");
  TrainConfig cfg;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.004;
  const double lr = 0.1;
  Rng rng(2);
  const Batch batch = FirstBatch(data.train, 8);
  constexpr int kSteps = 6;
  for (int s = 0; s < kSteps; ++s) TrainStep(state, batch, cfg, lr, rng);
  const Tensor& w = state.parameters.at("branch1.0.weight");
  for (std::size_t i = 0; i < w.size(); i += 7) {
    Scalar wi = w0[i], vi = 0;
    for (int s = 0; s < kSteps; ++s) {
      vi = static_cast<Scalar>(cfg.momentum * vi - lr * (0.0 + cfg.weight_decay * wi));
      wi += vi;
    }
    EXPECT_EQ(w[i], wi);
    EXPECT_EQ(state.momentum.at("branch1.0.weight")[i], vi);
  }
  // Closed form for the first step: w1 = w0 * (1 - lr * wd).
  EXPECT_NE(w[0], w0[0]);
}

TEST(TrainStepTest, NonFiniteLossNamesTheFirstBadTensor) {
  const TinyData data = MakeData(0.3);
  NetworkState state = InitNetwork(TinySpec(2, 1), 3);
  state.parameters.at("stem.0.weight")[0] = std::numeric_limits<Scalar>::quiet_NaN();
  TrainConfig cfg;
  Rng rng(1);
  try {
    TrainStep(state, FirstBatch(data.train, 4), cfg, 0.01, rng);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("stem.0.weight"), std::string::npos) << e.what();
  }
}

TEST(TrainStepTest, NoiselessSmokeRunReducesLossTenfold) {
  // Pilot run: the windowed loss falls from ~1.4 to well below 0.1 of that
  // within 200 steps; the 0.1 factor is the asserted threshold.
  const TinyData data = MakeData(0.0, 32);
  NetworkState state = InitNetwork(TinySpec(4, 2), 5);
  TrainConfig cfg;
  cfg.lr_schedule = {{0, 0.03}};
  cfg.batch_size = 16;
  Rng rng(6);
  BatchSampler sampler(data.train.size());
  double first = 0, last = 0;
  for (int it = 0; it < 200; ++it) {
    const Batch b = Preprocess(data.train, sampler.Next(cfg.batch_size, rng), {}, PreprocessMode::kTrain, rng);
    const double loss = TrainStep(state, b, cfg, cfg.lr_schedule[0].rate, rng);
    if (it < 10) first += loss / 10;
    if (it >= 190) last += loss / 10;
  }
  EXPECT_LT(last, 0.1 * first) << "first " << first << " last " << last;
}

TEST(EvaluateTest, HardwiredPredictorIsPerfect) {
  BranchNetSpec spec;
  spec.input_shape = {3, 8, 8};
  spec.branch = {ParseLayerLine("FC: 4", 1)};
  spec.num_classes = 4;
  NetworkState state = InitNetwork(spec, 1);
  Tensor& fc = state.parameters.at("branch0.0.weight");
  for (Scalar& v : fc.data()) v = 0;
  for (std::size_t c = 0; c < 4; ++c) fc[c * 4 + c] = 1;  // pixel c -> unit c
  Tensor& head = state.parameters.at("head.weight");
  for (Scalar& v : head.data()) v = 0;
  for (std::size_t c = 0; c < 4; ++c) head[c * 4 + c] = 100;

  Dataset ds;
  ds.classes = 4;
  ds.height = ds.width = 8;
  ds.images = Tensor({40, 3, 8, 8});
  for (std::size_t i = 0; i < 40; ++i) {
    ds.labels.push_back(static_cast<int>(i % 4));
    ds.images[i * 192 + i % 4] = 1;
  }
  ds.mean_image = Tensor({3, 8, 8});
  const EvalResult r = Evaluate(state, ds, 7);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_LT(r.loss, 1e-6);
  const EvalResult again = Evaluate(state, ds, 40);
  EXPECT_NEAR(again.loss, r.loss, 1e-18);
}

TEST(EvaluateTest, UniformLogitsGiveLogTenAndChanceAccuracy) {
  const Dataset all = GenerateSynthetic(10, 100, 8, 4, 0.5);
  const BranchNetSpec spec = ReshapeToBranchConnect(
      ParseArchSpec("INPUT: 3x8x8\nCONV: 3x3,4\nPOOL: 2x2,Max,2\nFC: 8\nFC: 10\n"), 3, 2);
  NetworkState state = InitNetwork(spec, 1);
  for (Scalar& v : state.parameters.at("head.weight").data()) v = 0;
  const EvalResult r = Evaluate(state, all, 64);
  EXPECT_NEAR(r.loss, std::log(10.0), 1e-12);
  EXPECT_NEAR(r.accuracy, 0.1, 0.03);
  EXPECT_EQ(Evaluate(state, all, 64).loss, r.loss);
}

TEST(EvaluateTest, RejectsEmptyData) {
  const NetworkState state = InitNetwork(TinySpec(2, 1), 1);
  EXPECT_THROW(Evaluate(state, Dataset{}, 10), Error);
}

TEST(TrainLoopTest, ZeroIterationsOnlyEvaluates) {
  const TinyData data = MakeData(0.3);
  NetworkState state = InitNetwork(TinySpec(3, 2), 4);
  const NetworkState before = state;
  TrainConfig cfg;
  cfg.max_iters = 0;
  Rng rng(1), untouched(1);
  const std::vector<MetricsRecord> records = TrainLoop(state, data.train, data.test, cfg, rng);
  ASSERT_EQ(records.size(), 1u);
  EXPECT_EQ(records[0].iteration, 0u);
  EXPECT_TRUE(records[0].test_loss.has_value());
  EXPECT_EQ(state.parameters, before.parameters);
  EXPECT_EQ(rng, untouched);
}

TEST(TrainLoopTest, RepeatedRunsAreByteIdentical) {
  const TinyData data = MakeData(0.3);
  TrainConfig cfg;
  cfg.lr_schedule = {{0, 0.01}};
  cfg.batch_size = 8;
  cfg.max_iters = 30;
  cfg.eval_every = 10;
  cfg.preprocess = {6, true};
  auto run = [&]() {
    NetworkState state = InitNetwork(TinySpec(3, 2, 6), 4);
    Rng rng(11);
    return std::make_pair(FormatMetricsCsv(TrainLoop(state, data.train, data.test, cfg, rng)), state.parameters);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(TrainLoopTest, LearningRateColumnSwitchesAtTheStageBoundary) {
  const TinyData data = MakeData(0.3);
  NetworkState state = InitNetwork(TinySpec(2, 1), 4);
  TrainConfig cfg;
  cfg.lr_schedule = ParseLrSchedule("0:1e-3,100:1e-4");
  cfg.batch_size = 4;
  cfg.max_iters = 150;
  cfg.eval_every = 50;
  Rng rng(3);
  const std::vector<MetricsRecord> r = TrainLoop(state, data.train, Dataset{}, cfg, rng);
  ASSERT_EQ(r.size(), 4u);
  EXPECT_EQ(r[1].lr, 1e-3);
  EXPECT_EQ(r[2].iteration, 100u);
  EXPECT_EQ(r[2].lr, 1e-4);
  EXPECT_FALSE(r[3].test_loss.has_value());
}

TEST(TrainLoopTest, ConstraintsHoldAfterEveryIteration) {
  const TinyData data = MakeData(0.5);
  NetworkState state = InitNetwork(TinySpec(4, 2), 4);
  TrainConfig cfg;
  cfg.lr_schedule = {{0, 0.05}};
  cfg.batch_size = 8;
  cfg.max_iters = 60;
  cfg.eval_every = 60;
  Rng rng(3);
  std::size_t checked = 0;
  TrainLoop(state, data.train, data.test, cfg, rng, [&](std::size_t, const NetworkState& s, double) {
    ASSERT_TRUE(s.gates.SatisfiesConstraints());
    ++checked;
  });
  EXPECT_EQ(checked, 60u);
}

TEST(RandomConnectTest, FrozenAssignmentSurvivesTraining) {
  const TinyData data = MakeData(0.5);
  NetworkState state = InitNetwork(TinySpec(4, 2), 4);
  MakeRandomConnect(state, 2, 77);
  EXPECT_TRUE(state.gates.frozen());
  EXPECT_TRUE(state.gates.SatisfiesConstraints());
  const GateBank before = state.gates;
  TrainConfig cfg;
  cfg.lr_schedule = {{0, 0.01}};
  cfg.batch_size = 8;
  cfg.max_iters = 1000;
  cfg.eval_every = 1000;
  Rng rng(3);
  TrainLoop(state, data.train, Dataset{}, cfg, rng);
  EXPECT_TRUE(std::equal(state.gates.binary_values().begin(), state.gates.binary_values().end(),
                         before.binary_values().begin()));
  EXPECT_TRUE(std::equal(state.gates.real_values().begin(), state.gates.real_values().end(),
                         before.real_values().begin()));

  NetworkState other = InitNetwork(TinySpec(4, 2), 4);
  MakeRandomConnect(other, 2, 77);
  EXPECT_EQ(other.gates, before);
}

TEST(RandomConnectTest, FullConnectivityMatchesAllActive) {
  NetworkState rc = InitNetwork(TinySpec(3, 3), 4);
  const NetworkState plain = rc;
  MakeRandomConnect(rc, 3, 1);
  Rng rng(2);
  const Tensor images = testing::RandomTensor({2, 3, 8, 8}, rng);
  EXPECT_EQ(InferLogits(rc, images), InferLogits(plain, images));
}

TEST(MetricsCsvTest, RoundTripsAndRejectsBadHeaders) {
  std::vector<MetricsRecord> records(2);
  records[0].iteration = 0;
  records[0].train_loss = 2.5;
  records[0].test_loss = 2.25;
  records[0].test_accuracy = 0.125;
  records[0].lr = 0.01;
  records[1].iteration = 10;
  records[1].train_loss = 1.0 / 3.0;
  records[1].lr = 0.001;
  records[1].wall_ms = 12;
  const std::string text = FormatMetricsCsv(records);
  EXPECT_EQ(text.substr(0, text.find('\n')), "iter,train_loss,test_loss,test_acc,lr,wall_ms");
  EXPECT_EQ(ParseMetricsCsv(text), records);
  EXPECT_THROW(ParseMetricsCsv("iter,loss\n0,1\n"), FormatError);
  EXPECT_THROW(ParseMetricsCsv("iter,train_loss,test_loss,test_acc,lr,wall_ms\n0,1,2\n"), FormatError);
}

}  // namespace
}  // namespace branchconnect
