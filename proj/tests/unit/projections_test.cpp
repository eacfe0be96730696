#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "support.hpp"
#include "xmal/error.hpp"
#include "xmal/projections.hpp"

namespace xmal {
namespace {

using ad::Matrix;
using ad::Var;
using testing::random_matrix;

TEST(WordProjection, ShapesNormsAndCaptionPooling) {
  Rng rng(1);
  const WordProjection proj(96, 32, rng);
  const ProjectedCaption out = proj.forward(Var(random_matrix(96, 8, rng)));
  ASSERT_EQ(out.words.rows(), 32);
  ASSERT_EQ(out.words.cols(), 7);
  ASSERT_EQ(out.caption.rows(), 32);
  ASSERT_EQ(out.caption.cols(), 1);
  for (int c = 0; c < 7; ++c) EXPECT_NEAR(out.words.value().col(c).norm(), 1.0, 1e-5);
  for (int k = 0; k < 32; ++k) {
    double m = out.words.value()(k, 0);
    for (int c = 1; c < 7; ++c) m = std::max(m, out.words.value()(k, c));
    EXPECT_EQ(out.caption.value()(k, 0), m);
  }
}

TEST(WordProjection, DropsTheClassTokenColumn) {
  Rng rng(2);
  const WordProjection proj(16, 8, rng);
  Matrix w = random_matrix(16, 5, rng);
  const Matrix a = proj.forward(Var(w)).words.value();
  w.col(0).setConstant(42.0);
  EXPECT_EQ(proj.forward(Var(w)).words.value(), a);
  EXPECT_THROW(proj.forward(Var(random_matrix(16, 1, rng))), Error);
}

TEST(WordProjection, LeadingPadShiftsColumns) {
  Rng rng(3);
  const WordProjection proj(12, 8, rng);
  const Matrix tokens = random_matrix(12, 6, rng);
  Matrix padded = Matrix::Zero(12, 7);
  padded.rightCols(6) = tokens;
  const Matrix a = proj.forward_tokens(Var(tokens)).words.value();
  const Matrix b = proj.forward_tokens(Var(padded)).words.value();
  EXPECT_LT((b.rightCols(6) - a).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(WordProjection, FiniteForLargeInputs) {
  Rng rng(4);
  const WordProjection proj(12, 8, rng);
  EXPECT_TRUE(proj.forward(Var(random_matrix(12, 6, rng, 1e3))).words.value().allFinite());
  EXPECT_TRUE(proj.forward(Var(Matrix::Zero(12, 6))).words.value().allFinite());
}

TEST(GlobalImageProjection, UnitNormAndNonlinear) {
  Rng rng(5);
  const GlobalImageProjection proj(64, 32, rng);
  const Matrix x = random_matrix(64, 3, rng);
  const Matrix y = proj.forward(Var(x)).value();
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(y.col(c).norm(), 1.0, 1e-5);
  const Matrix y2 = proj.forward(Var(Matrix(2.0 * x))).value();
  EXPECT_GT((y - y2).norm(), 1e-6);
  EXPECT_TRUE(proj.forward(Var(random_matrix(64, 2, rng, 1e3))).value().allFinite());
}

TEST(GlobalImageProjection, ZeroInputGivesNormalizedBiasImage) {
  Rng rng(6);
  GlobalImageProjection proj(64, 32, rng);
  const Matrix y = proj.forward(Var(Matrix::Zero(64, 1))).value();
  const Matrix expected = proj.linear().bias().value().array().tanh();
  EXPECT_LT((y - expected / expected.norm()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(y.norm(), 1.0, 1e-5);
}

TEST(Imim, ShapeAndUniformAttentionClosedForm) {
  Rng rng(7);
  IntraModalInteraction imim(32, rng);
  imim.query().weight().mutable_value().setZero();
  imim.query().bias().mutable_value().setZero();
  const Matrix x = random_matrix(32, kRegionCount, rng);
  const Matrix y = imim.forward({Var(x)}, true).front().value();
  ASSERT_EQ(y.rows(), 32);
  ASSERT_EQ(y.cols(), kRegionCount);
  // Zero queries make every attention column uniform, so each position gets
  // its residual plus one shared mixed value.
  const Matrix mixed = y - x;
  for (int p = 1; p < kRegionCount; ++p) EXPECT_LT((mixed.col(p) - mixed.col(0)).cwiseAbs().maxCoeff(), 1e-12);
  // That shared value is the mean of the value projection of the normalized input.
  Matrix normalized = x;
  for (int c = 0; c < 32; ++c) {
    const double mean = x.row(c).mean();
    const double var = (x.row(c).array() - mean).square().mean();
    normalized.row(c) = (x.row(c).array() - mean) / std::sqrt(var + 1e-5);
  }
  const Matrix v = imim.value().forward(Var(normalized)).value();
  EXPECT_LT((mixed.col(0) - v.rowwise().mean()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Imim, PermutationEquivariant) {
  Rng rng(8);
  IntraModalInteraction imim(16, rng);
  const Matrix x = random_matrix(16, kRegionCount, rng);
  std::vector<int> perm(kRegionCount);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix xp(16, kRegionCount);
  for (int i = 0; i < kRegionCount; ++i) xp.col(i) = x.col(perm[static_cast<std::size_t>(i)]);
  const Matrix y = imim.forward({Var(x)}, true).front().value();
  const Matrix yp = imim.forward({Var(xp)}, true).front().value();
  for (int i = 0; i < kRegionCount; ++i) {
    EXPECT_LT((yp.col(i) - y.col(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Imim, RejectsWrongShape) {
  Rng rng(9);
  IntraModalInteraction imim(16, rng);
  EXPECT_THROW(imim.forward_one(Var(random_matrix(16, 100, rng))), Error);
}

TEST(RegionProjection, ShapeLayoutAndLocality) {
  Rng rng(10);
  const RegionProjection proj(32, 32, rng);
  Matrix x = random_matrix(32, kRegionCount, rng);
  const Matrix a = proj.forward(Var(x)).value();
  ASSERT_EQ(a.rows(), 32);
  ASSERT_EQ(a.cols(), kRegionCount);
  x.col(0).array() += 1.0;
  const Matrix b = proj.forward(Var(x)).value();
  EXPECT_GT((a.col(0) - b.col(0)).norm(), 0.0);
  EXPECT_EQ(a.rightCols(kRegionCount - 1), b.rightCols(kRegionCount - 1));
}

}  // namespace
}  // namespace xmal
