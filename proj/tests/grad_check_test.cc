#include <gtest/gtest.h>

#include "branchconnect/grad_check.h"
#include "branchconnect/ops.h"
#include "test_util.h"

namespace branchconnect {
namespace {

TEST(GradCheckTest, RelativeErrorUsesNumericMagnitudeWithFloor) {
  EXPECT_NEAR(RelativeError(1.1, 1.0), 0.1, 1e-12);
  EXPECT_NEAR(RelativeError(-3.0, -2.0), 0.5, 1e-12);
  EXPECT_DOUBLE_EQ(RelativeError(2e-9, 0.0), 2e-9 / 1e-8);
}

TEST(GradCheckTest, DetectsCorruptedAnalyticGradient) {
  if (sizeof(Scalar) != sizeof(double)) GTEST_SKIP();
  Rng rng(3);
  const std::vector<Tensor> inputs{testing::RandomTensor({2, 3}, rng), testing::RandomTensor({3, 2}, rng)};
  auto fn = [](Tape& tape, std::span<const Var> v) {
    return Sum(tape, Affine(tape, v[0], v[1], tape.Constant(Tensor({2}, 0.0))));
  };
  std::vector<Tensor> analytic = AnalyticGradients(fn, inputs);
  EXPECT_LT(CompareWithFiniteDifferences(fn, inputs, analytic).max_rel_error, 1e-7);
  analytic[1][2] *= 1.01;
  const GradCheckReport bad = CompareWithFiniteDifferences(fn, inputs, analytic);
  EXPECT_NEAR(bad.per_input_max[1], 0.01, 1e-6);
  EXPECT_LT(bad.per_input_max[0], 1e-7);
  EXPECT_EQ(bad.coordinates, 12u);
}

TEST(GradCheckTest, RejectsNonScalarFunctions) {
  const std::vector<Tensor> inputs{Tensor({2}, 1.0)};
  auto fn = [](Tape& tape, std::span<const Var> v) { return Relu(tape, v[0]); };
  EXPECT_THROW(GradCheck(fn, inputs), ShapeError);
}

}  // namespace
}  // namespace branchconnect
