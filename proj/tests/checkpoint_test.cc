#include <gtest/gtest.h>

#include <cstring>
#include <vector>

#include "branchconnect/checkpoint.h"
#include "branchconnect/trainer.h"
#include "test_util.h"

namespace branchconnect {
namespace {

using testing::TempDir;

constexpr char kBase[] = R"(INPUT: 3x8x8
INIT: MSRA
CONV: 3x3,4
POOL: 2x2,Max,2
CONV: 3x3,4
POOL: 2x2,Ave,2
FC: 6
FC: 4
)";

Checkpoint MakeCheckpoint() {
  Checkpoint ckpt;
  ckpt.state = InitNetwork(ReshapeToBranchConnect(ParseArchSpec(kBase), 3, 2), 17);
  ckpt.state.iteration = 42;
  ckpt.state.momentum.at("head.bias")[1] = 0.25;
  std::vector<Scalar> real(12);
  for (std::size_t i = 0; i < real.size(); ++i) real[i] = static_cast<Scalar>(i) / 11;
  ckpt.state.gates.set_real_values(real);
  const std::vector<std::size_t> pick{1, 2};
  ckpt.state.gates.SetActive(3, pick);
  ckpt.state.gates.gate_grad()[0] = 9.0;
  Rng rng(5);
  rng.discard(7);
  ckpt.rng_state = SerializeRng(rng);
  ckpt.extras["data/mean_image"] = Tensor({3, 8, 8}, 0.5);
  return ckpt;
}

TEST(CheckpointTest, RoundTripRestoresEverything) {
  const Checkpoint ckpt = MakeCheckpoint();
  const std::vector<std::uint8_t> bytes = EncodeCheckpoint(ckpt);
  const Checkpoint back = DecodeCheckpoint(bytes);
  EXPECT_EQ(back.state.parameters, ckpt.state.parameters);
  EXPECT_EQ(back.state.momentum, ckpt.state.momentum);
  EXPECT_EQ(back.state.gates.real_values()[5], ckpt.state.gates.real_values()[5]);
  EXPECT_TRUE(std::equal(back.state.gates.binary_values().begin(), back.state.gates.binary_values().end(),
                         ckpt.state.gates.binary_values().begin()));
  EXPECT_EQ(back.state.iteration, 42u);
  EXPECT_EQ(back.state.seed, 17u);
  EXPECT_EQ(FormatBranchNetSpec(back.state.spec), FormatBranchNetSpec(ckpt.state.spec));
  EXPECT_EQ(back.rng_state, ckpt.rng_state);
  EXPECT_EQ(back.extras, ckpt.extras);
  EXPECT_EQ(EncodeCheckpoint(back), bytes);
}

TEST(CheckpointTest, FrozenFlagSurvives) {
  Checkpoint ckpt = MakeCheckpoint();
  MakeRandomConnect(ckpt.state, 2, 3);
  const Checkpoint back = DecodeCheckpoint(EncodeCheckpoint(ckpt));
  EXPECT_TRUE(back.state.gates.frozen());
}

TEST(CheckpointTest, HeaderLayout) {
  const std::vector<std::uint8_t> bytes = EncodeCheckpoint(MakeCheckpoint());
  ASSERT_GT(bytes.size(), 16u);
  EXPECT_EQ(std::memcmp(bytes.data(), "BCCKPT\0\0", 8), 0);
  std::uint32_t version = 0, scalar = 0;
  std::memcpy(&version, bytes.data() + 8, 4);
  std::memcpy(&scalar, bytes.data() + 12, 4);
  EXPECT_EQ(version, kCheckpointVersion);
  EXPECT_EQ(scalar, sizeof(Scalar));
}

TEST(CheckpointTest, RejectsCorruptInput) {
  const std::vector<std::uint8_t> good = EncodeCheckpoint(MakeCheckpoint());
  std::vector<std::uint8_t> bad = good;
  bad[0] = 'X';
  EXPECT_THROW(DecodeCheckpoint(bad), FormatError);
  bad = good;
  bad[8] = 99;
  EXPECT_THROW(DecodeCheckpoint(bad), FormatError);
  bad = good;
  bad[12] = 2;
  EXPECT_THROW(DecodeCheckpoint(bad), FormatError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, good.size() / 2, good.size() - 1}) {
    EXPECT_THROW(DecodeCheckpoint(std::vector<std::uint8_t>(good.begin(), good.begin() + cut)), FormatError) << cut;
  }
  bad = good;
  bad.push_back(0);
  EXPECT_THROW(DecodeCheckpoint(bad), FormatError);
}

TEST(CheckpointTest, RejectsOutOfRangeGates) {
  Checkpoint ckpt = MakeCheckpoint();
  std::vector<std::uint8_t> bytes = EncodeCheckpoint(ckpt);
  // Locate the serialized real gate value 1/11 and overwrite it with 2.0.
  const Scalar needle = ckpt.state.gates.real_values()[1];
  for (std::size_t i = 0; i + sizeof(Scalar) <= bytes.size(); ++i) {
    if (std::memcmp(bytes.data() + i, &needle, sizeof(Scalar)) == 0) {
      const Scalar two = 2;
      std::memcpy(bytes.data() + i, &two, sizeof(Scalar));
      break;
    }
  }
  EXPECT_THROW(DecodeCheckpoint(bytes), FormatError);
}

TEST(CheckpointTest, FileRoundTripAndMissingFile) {
  TempDir dir("ckpt");
  const Checkpoint ckpt = MakeCheckpoint();
  const std::string path = (dir.path() / "state.bin").string();
  SaveCheckpoint(path, ckpt);
  EXPECT_EQ(EncodeCheckpoint(LoadCheckpoint(path)), EncodeCheckpoint(ckpt));
  EXPECT_THROW(LoadCheckpoint((dir.path() / "missing.bin").string()), Error);
}

TEST(CheckpointTest, ResumeReplaysTheUninterruptedRun) {
  const Dataset all = GenerateSynthetic(4, 8, 8, 3, 0.3);
  auto [train, test] = Split(all, 32, 0, 1);
  TrainConfig cfg;
  cfg.lr_schedule = {{0, 0.01}};
  cfg.batch_size = 8;
  const BranchNetSpec spec = ReshapeToBranchConnect(ParseArchSpec(kBase), 3, 2);

  auto run = [&](NetworkState& state, Rng& rng, BatchSampler& sampler, int steps) {
    for (int s = 0; s < steps; ++s) {
      const std::vector<std::size_t> idx = sampler.Next(cfg.batch_size, rng);
      const Batch batch = Preprocess(train, idx, cfg.preprocess, PreprocessMode::kTrain, rng);
      TrainStep(state, batch, cfg, cfg.LearningRateAt(state.iteration), rng);
    }
  };

  NetworkState straight = InitNetwork(spec, 4);
  Rng rng_a(9);
  BatchSampler sampler_a(train.size());
  run(straight, rng_a, sampler_a, 8);

  // Sampler position is part of the loop, so interrupt at an epoch boundary.
  NetworkState first = InitNetwork(spec, 4);
  Rng rng_b(9);
  BatchSampler sampler_b(train.size());
  run(first, rng_b, sampler_b, 4);
  Checkpoint ckpt{first, SerializeRng(rng_b), {}};
  Checkpoint resumed = DecodeCheckpoint(EncodeCheckpoint(ckpt));
  Rng rng_c = DeserializeRng(resumed.rng_state);
  run(resumed.state, rng_c, sampler_b, 4);

  EXPECT_EQ(resumed.state.parameters, straight.parameters);
  EXPECT_EQ(resumed.state.momentum, straight.momentum);
  EXPECT_EQ(resumed.state.gates, straight.gates);
  EXPECT_EQ(rng_c, rng_a);
}

}  // namespace
}  // namespace branchconnect
