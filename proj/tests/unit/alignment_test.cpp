#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "xmal/alignment.hpp"
#include "xmal/error.hpp"

namespace xmal::align {
namespace {

using ad::Matrix;
using ad::Var;
using testing::check_gradients;
using testing::random_matrix;
using testing::random_unit_cols;

Var tau_of(double t) { return Var::scalar(t); }

std::vector<Var> vars(const std::vector<Matrix>& ms, bool grad = false) {
  std::vector<Var> out;
  for (const auto& m : ms) out.emplace_back(m, grad);
  return out;
}

std::vector<Matrix> random_batch(int n, int rows, int cols, Rng& rng) {
  std::vector<Matrix> out;
  for (int i = 0; i < n; ++i) out.push_back(random_matrix(rows, cols, rng));
  return out;
}

TEST(Cicl, SingleSampleIsZero) {
  Rng rng(1);
  const auto t = cicl(Var(random_matrix(8, 1, rng)), Var(random_matrix(8, 1, rng)), tau_of(0.07));
  EXPECT_NEAR(t.total.item(), 0.0, 1e-12);
}

TEST(Cicl, AlignedOrthogonalPairClosedForm) {
  const Matrix eye = Matrix::Identity(2, 2);
  const auto t = cicl(Var(eye), Var(eye), tau_of(1.0));
  EXPECT_NEAR(t.total.item(), 2.0 * std::log(1.0 + std::exp(-1.0)), 1e-6);
  EXPECT_NEAR(t.total.item(), 0.62652, 1e-5);
  EXPECT_NEAR(t.forward.item(), t.backward.item(), 1e-12);
}

TEST(Cicl, UniformSimilaritiesGiveTwoLogB) {
  for (int b : {2, 3, 7}) {
    const Matrix same = Matrix::Ones(5, b);
    EXPECT_NEAR(cicl(Var(same), Var(same), tau_of(0.07)).total.item(), 2.0 * std::log(b), 1e-6) << b;
  }
}

TEST(Cicl, MatchesOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix im = random_matrix(8, 4, rng), cap = random_matrix(8, 4, rng);
    EXPECT_NEAR(cicl(Var(im), Var(cap), tau_of(0.3)).total.item(), testing::cicl_oracle(im, cap, 0.3), 1e-9);
  }
}

TEST(Cicl, InvariantToRescalingAndJointPermutation) {
  Rng rng(3);
  const Matrix im = random_matrix(8, 5, rng), cap = random_matrix(8, 5, rng);
  const double base = cicl(Var(im), Var(cap), tau_of(0.2)).total.item();
  Matrix scaled = im;
  for (int c = 0; c < 5; ++c) scaled.col(c) *= 0.1 + c;
  EXPECT_NEAR(cicl(Var(scaled), Var(Matrix(3.0 * cap)), tau_of(0.2)).total.item(), base, 1e-9);
  const int perm[] = {4, 2, 0, 3, 1};
  Matrix pi(8, 5), pc(8, 5);
  for (int i = 0; i < 5; ++i) {
    pi.col(i) = im.col(perm[i]);
    pc.col(i) = cap.col(perm[i]);
  }
  EXPECT_NEAR(cicl(Var(pi), Var(pc), tau_of(0.2)).total.item(), base, 1e-9);
}

TEST(Cicl, Gradients) {
  Rng rng(4);
  Var im(random_matrix(8, 4, rng), true), cap(random_matrix(8, 4, rng), true);
  Var log_tau = Var::scalar(std::log(0.5), true);
  auto f = [&] { return cicl(im, cap, ad::exp(log_tau)).total; };
  EXPECT_LT(check_gradients(f, {im, cap, log_tau}).max_relative_error, 1e-4);
}

TEST(Cicl, Errors) {
  Rng rng(5);
  EXPECT_THROW(cicl(Var(random_matrix(8, 3, rng)), Var(random_matrix(8, 3, rng)), tau_of(0.0)), Error);
  EXPECT_THROW(cicl(Var(random_matrix(8, 3, rng)), Var(random_matrix(8, 2, rng)), tau_of(0.1)), Error);
}

TEST(WordRegion, NormalizedSimilarityColumnsSumToOne) {
  Rng rng(6);
  const Matrix s = normalize_similarities(Var(random_matrix(8, 5, rng)), Var(random_matrix(8, 30, rng))).value();
  ASSERT_EQ(s.rows(), 5);
  ASSERT_EQ(s.cols(), 30);
  for (int j = 0; j < 30; ++j) EXPECT_NEAR(s.col(j).sum(), 1.0, 1e-12);
  const Matrix one = normalize_similarities(Var(random_matrix(8, 1, rng)), Var(random_matrix(8, 30, rng))).value();
  EXPECT_LT((one.array() - 1.0).abs().maxCoeff(), 1e-12);
}

TEST(WordRegion, AttentionRowsSumToOneAndShiftInvariant) {
  Rng rng(7);
  const Matrix s = random_matrix(4, 20, rng);
  const Matrix a = region_attention(Var(s), 0.25).value();
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-12);
  const Matrix shifted = region_attention(Var(Matrix(s.array() + 3.0)), 0.25).value();
  EXPECT_LT((a - shifted).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(WordRegion, UniformAttentionIsTheRegionMean) {
  Rng rng(8);
  const Matrix regions = random_matrix(8, 20, rng);
  const Matrix attended = attend_regions(Var(Matrix::Constant(3, 20, 0.2)), Var(regions), 0.25).value();
  for (int i = 0; i < 3; ++i) EXPECT_LT((attended.col(i) - regions.rowwise().mean()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(WordRegion, SharpAttentionPicksTheStrongestRegion) {
  Rng rng(9);
  const Matrix regions = random_matrix(8, 10, rng);
  Matrix s = Matrix::Constant(2, 10, 0.05);
  s(0, 3) = 0.6;
  s(1, 7) = 0.6;
  const Matrix attended = attend_regions(Var(s), Var(regions), 0.01).value();
  EXPECT_LT((attended.col(0) - regions.col(3)).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((attended.col(1) - regions.col(7)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(MatchingScore, SingleAlignedWordScoresOne) {
  Rng rng(10);
  const Matrix w = random_matrix(8, 1, rng);
  EXPECT_NEAR(matching_score(Var(Matrix(2.0 * w)), Var(w), 0.2).item(), 1.0, 1e-9);
}

TEST(MatchingScore, EqualCosinesClosedForm) {
  // Every word at the same angle to its attended region: cos = c for all n.
  for (int n : {1, 3, 6}) {
    const double c = 0.3;
    Matrix words = Matrix::Zero(4, n), attended = Matrix::Zero(4, n);
    for (int i = 0; i < n; ++i) {
      words(0, i) = 1.0;
      attended(0, i) = c;
      attended(1 + i % 3, i) = std::sqrt(1.0 - c * c);
    }
    EXPECT_NEAR(matching_score(Var(attended), Var(words), 0.2).item(), c + 0.2 * std::log(n), 1e-6) << n;
  }
}

TEST(MatchingScore, BoundedBySmoothMaxSandwich) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(8, 5, rng), w = random_matrix(8, 5, rng);
    double best = -1.0;
    for (int i = 0; i < 5; ++i) best = std::max(best, a.col(i).normalized().dot(w.col(i).normalized()));
    const double s = matching_score(Var(a), Var(w), 0.2).item();
    EXPECT_GE(s, best - 1e-12);
    EXPECT_LE(s, best + 0.2 * std::log(5.0) + 1e-12);
  }
}

TEST(Wrcl, MatchesStraightLineOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 4; ++trial) {
    const auto words = random_batch(3, 8, 5, rng);
    const auto regions = random_batch(3, 8, 196, rng);
    const auto t = wrcl(vars(words), vars(regions), 0.25, 0.2, 0.1);
    const auto [r_given_w, w_given_r] = testing::wrcl_oracle(words, regions, 0.25, 0.2, 0.1);
    EXPECT_NEAR(t.forward.item(), r_given_w, 1e-6);
    EXPECT_NEAR(t.backward.item(), w_given_r, 1e-6);
    EXPECT_NEAR(t.total.item(), r_given_w + w_given_r, 1e-6);
  }
}

TEST(Wrcl, UniformScoresGiveLogBPerDirection) {
  Rng rng(13);
  const Matrix w = random_matrix(8, 4, rng), r = random_matrix(8, 12, rng);
  for (int b : {2, 5}) {
    const std::vector<Matrix> words(static_cast<std::size_t>(b), w), regions(static_cast<std::size_t>(b), r);
    const auto t = wrcl(vars(words), vars(regions), 0.25, 0.2, 0.1);
    EXPECT_NEAR(t.forward.item(), std::log(b), 1e-6);
    EXPECT_NEAR(t.backward.item(), std::log(b), 1e-6);
  }
}

TEST(Wrcl, ScoreMatrixPairsImageRowsWithCaptionColumns) {
  Rng rng(14);
  const auto words = vars(random_batch(3, 8, 4, rng));
  const auto regions = vars(random_batch(3, 8, 10, rng));
  const Matrix m = matching_score_matrix(words, regions, 0.25, 0.2).value();
  EXPECT_NEAR(m(2, 0), pair_matching_score(words[0], regions[2], 0.25, 0.2).item(), 1e-12);
  EXPECT_NEAR(m(0, 1), pair_matching_score(words[1], regions[0], 0.25, 0.2).item(), 1e-12);
}

TEST(Wrcl, Gradients) {
  Rng rng(15);
  auto words = vars(random_batch(3, 6, 4, rng), true);
  auto regions = vars(random_batch(3, 6, 12, rng), true);
  auto f = [&] { return wrcl(words, regions, 0.25, 0.2, 0.1).total; };
  std::vector<Var> inputs = words;
  inputs.insert(inputs.end(), regions.begin(), regions.end());
  EXPECT_LT(check_gradients(f, inputs).max_relative_error, 1e-4);
}

TEST(Wrcl, Errors) {
  Rng rng(16);
  const auto words = vars(random_batch(2, 8, 4, rng));
  const auto regions = vars(random_batch(2, 8, 10, rng));
  EXPECT_THROW(wrcl(words, regions, 0.0, 0.2, 0.1), Error);
  EXPECT_THROW(wrcl(words, regions, 0.25, -1.0, 0.1), Error);
  EXPECT_THROW(wrcl(words, std::span<const Var>(regions).first(1), 0.25, 0.2, 0.1), Error);
  const auto narrow = vars(random_batch(2, 6, 10, rng));
  EXPECT_THROW(wrcl(words, narrow, 0.25, 0.2, 0.1), Error);
}

TEST(Imcl, SingleSampleIsZero) {
  Rng rng(17);
  const Var a(random_matrix(8, 1, rng)), b(random_matrix(8, 1, rng));
  EXPECT_NEAR(imcl(a, b, b, a, tau_of(0.1)).item(), 0.0, 1e-12);
}

TEST(Imcl, OrthogonalViewsClosedForm) {
  const Var eye(Matrix::Identity(2, 2));
  EXPECT_NEAR(imcl(eye, eye, eye, eye, tau_of(1.0)).item(), std::log(1.0 + std::exp(-1.0)), 1e-6);
  EXPECT_NEAR(imcl(eye, eye, eye, eye, tau_of(1.0)).item(), 0.31326, 1e-5);
}

TEST(Imcl, InvariantToJointPermutation) {
  Rng rng(18);
  Matrix v[4];
  for (auto& m : v) m = random_matrix(8, 4, rng);
  const double base = imcl(Var(v[0]), Var(v[1]), Var(v[2]), Var(v[3]), tau_of(0.2)).item();
  const int perm[] = {2, 0, 3, 1};
  Matrix p[4];
  for (int k = 0; k < 4; ++k) {
    p[k].resize(8, 4);
    for (int i = 0; i < 4; ++i) p[k].col(i) = v[k].col(perm[i]);
  }
  EXPECT_NEAR(imcl(Var(p[0]), Var(p[1]), Var(p[2]), Var(p[3]), tau_of(0.2)).item(), base, 1e-9);
}

TEST(Imcl, Gradients) {
  Rng rng(19);
  Var a(random_matrix(8, 4, rng), true), b(random_matrix(8, 4, rng), true);
  Var c(random_matrix(8, 4, rng), true), d(random_matrix(8, 4, rng), true);
  auto f = [&] { return imcl(a, b, c, d, tau_of(0.3)); };
  EXPECT_LT(check_gradients(f, {a, b, c, d}).max_relative_error, 1e-4);
}

TEST(IdentityLoss, OneClassWithoutMarginIsZero) {
  Rng rng(20);
  const std::vector<int> labels = {0, 0, 0};
  const double l =
      identity_loss(Var(random_matrix(8, 3, rng)), labels, Var(random_matrix(8, 1, rng)), {.scale = 1.0, .margin = 0.0})
          .item();
  EXPECT_NEAR(l, 0.0, 1e-12);
}

TEST(IdentityLoss, ZeroMarginMatchesSoftmaxOracle) {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix emb = random_matrix(8, 4, rng), w = random_matrix(8, 3, rng);
    const std::vector<int> labels = {0, 2, 1, 2};
    const double l = identity_loss(Var(emb), labels, Var(w), {.scale = 30.0, .margin = 0.0}).item();
    EXPECT_NEAR(l, testing::softmax_ce_oracle(emb, w, labels, 30.0), 1e-6);
  }
}

TEST(IdentityLoss, GrowsWithMargin) {
  Rng rng(22);
  const Matrix emb = random_matrix(8, 6, rng), w = random_matrix(8, 3, rng);
  const std::vector<int> labels = {0, 1, 2, 0, 1, 2};
  double prev = -1.0;
  for (double m = 0.0; m <= 0.5 + 1e-12; m += 0.05) {
    const double l = identity_loss(Var(emb), labels, Var(w), {.scale = 30.0, .margin = m}).item();
    EXPECT_GT(l, prev) << m;
    prev = l;
  }
}

TEST(IdentityLoss, Gradients) {
  Rng rng(23);
  Var emb(random_matrix(8, 4, rng), true), w(random_matrix(8, 3, rng), true);
  const std::vector<int> labels = {0, 1, 2, 1};
  auto f = [&] { return identity_loss(emb, labels, w, {.scale = 30.0, .margin = 0.5}); };
  EXPECT_LT(check_gradients(f, {emb, w}).max_relative_error, 1e-4);
}

TEST(IdentityLoss, Errors) {
  Rng rng(24);
  const Var emb(random_matrix(8, 2, rng)), w(random_matrix(8, 3, rng));
  EXPECT_THROW(identity_loss(emb, std::vector<int>{0, 3}, w, {}), Error);
  EXPECT_THROW(identity_loss(emb, std::vector<int>{0, -1}, w, {}), Error);
  EXPECT_THROW(identity_loss(emb, std::vector<int>{0}, w, {}), Error);
  EXPECT_THROW(identity_loss(Var(random_matrix(6, 2, rng)), std::vector<int>{0, 1}, w, {}), Error);
}

LossComponents constant_components(double wrcl_v, double idl, double cicl_v, double imcl_v) {
  LossComponents c;
  c.wrcl = {Var::scalar(wrcl_v), Var::scalar(wrcl_v / 2), Var::scalar(wrcl_v / 2)};
  c.idl = Var::scalar(idl);
  c.cicl = {Var::scalar(cicl_v), Var::scalar(cicl_v / 2), Var::scalar(cicl_v / 2)};
  c.imcl = Var::scalar(imcl_v);
  return c;
}

TEST(TotalLoss, DefaultWeightsExample) {
  LossReport report;
  const double total = total_fcam_loss(constant_components(1.0, 0.5, 2.0, 3.0), {}, &report).item();
  EXPECT_NEAR(total, 58.0, 1e-12);
  EXPECT_NEAR(report.total, 58.0, 1e-12);
  EXPECT_EQ(report.idl, 0.5);
  EXPECT_EQ(report.f2c, 1.0);
  EXPECT_EQ(report.r_given_w, 0.5);
}

TEST(TotalLoss, ZeroWeightsAndValidation) {
  const LossWeights zero{.lambda1 = 0, .lambda2 = 0, .lambda3 = 0, .wrcl = 0};
  EXPECT_EQ(total_fcam_loss(constant_components(1, 2, 3, 4), zero).item(), 0.0);
  EXPECT_THROW(total_fcam_loss(constant_components(1, 2, 3, 4), {.lambda2 = -1.0}), Error);
}

TEST(TotalLoss, GradientIsTheWeightedSum) {
  Var p(Matrix::Constant(1, 1, 0.7), true);
  LossComponents c;
  c.wrcl = {ad::scale(p, 1.0), p, p};
  c.idl = ad::scale(p, 2.0);
  c.cicl = {ad::scale(p, 3.0), p, p};
  c.imcl = ad::scale(p, 4.0);
  total_fcam_loss(c, {.lambda1 = 10, .lambda2 = 2, .lambda3 = 0.5, .wrcl = 1}).backward();
  EXPECT_NEAR(p.grad()(0, 0), 1.0 + 10 * 2.0 + 2 * 3.0 + 0.5 * 4.0, 1e-12);
}

TEST(Temperatures, LearnableAndClamped) {
  Temperatures t = Temperatures::defaults(0.07);
  EXPECT_NEAR(t.tau_value(), 0.07, 1e-12);
  EXPECT_TRUE(t.log_tau.requires_grad());
  t.clamp(0.1, 1.0);
  EXPECT_NEAR(t.tau_value(), 0.1, 1e-12);
  EXPECT_THROW(Temperatures::defaults(0.0), Error);
}

}  // namespace
}  // namespace xmal::align
