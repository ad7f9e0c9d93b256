#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "branchconnect/tensor.h"

namespace branchconnect {
namespace {

TEST(TensorTest, ConstructsFilledTensor) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  for (Scalar v : t.data()) EXPECT_EQ(v, 1.5);
}

TEST(TensorTest, RejectsZeroDimensions) { EXPECT_THROW(Tensor({2, 0}), ShapeError); }

TEST(TensorTest, RejectsDataOfWrongLength) { EXPECT_THROW(Tensor({2, 2}, std::vector<Scalar>{1, 2, 3}), ShapeError); }

TEST(TensorTest, AtIndexesRowMajorNchw) {
  Tensor t({2, 3, 4, 5});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(i);
  EXPECT_EQ(t.at(1, 2, 3, 4), 119);
  EXPECT_EQ(t.at(1, 0, 2, 1), 60 + 10 + 1);
}

TEST(TensorTest, ReshapeKeepsDataAndChecksCount) {
  Tensor t({2, 3}, std::vector<Scalar>{1, 2, 3, 4, 5, 6});
  Tensor r = t.Reshaped({3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r.storage(), t.storage());
  EXPECT_THROW(t.Reshaped({4, 2}), ShapeError);
}

TEST(TensorTest, DetectsNonFiniteValues) {
  Tensor t({3}, 0);
  EXPECT_TRUE(t.AllFinite());
  t[1] = std::numeric_limits<Scalar>::quiet_NaN();
  EXPECT_FALSE(t.AllFinite());
  t[1] = std::numeric_limits<Scalar>::infinity();
  EXPECT_FALSE(t.AllFinite());
}

TEST(TensorTest, RequireShapeNamesTheTensor) {
  Tensor t({2, 2});
  try {
    RequireShape(t, {2, 3}, "weight");
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("weight"), std::string::npos);
  }
}

TEST(TensorTest, ShapeStringFormatsDimensions) { EXPECT_EQ(ShapeString({3, 32, 32}), "[3x32x32]"); }

}  // namespace
}  // namespace branchconnect
