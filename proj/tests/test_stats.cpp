#include "exo/stats.hpp"
#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace exo;

namespace {

Eigen::MatrixXd gaussian(Eigen::Index n, Eigen::Index p, std::mt19937_64& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  return Eigen::MatrixXd::NullaryExpr(n, p, [&] { return z(rng); });
}

Eigen::MatrixXd invertible(Eigen::Index p, std::mt19937_64& rng) {
  // Well conditioned: identity plus a small random perturbation, scaled.
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(p, p) + Eigen::MatrixXd::NullaryExpr(p, p, [&] { return u(rng); });
  return 2.0 * a;
}

}  // namespace

TEST(Covariance, TwoSymmetricPoints) {
  Eigen::MatrixXd x(2, 1);
  x << 1.0, -1.0;
  const auto c = covariance_matrix(SampleMatrix::assume_centered(x), SampleMatrix::assume_centered(x));
  ASSERT_EQ(c.rows(), 1);
  EXPECT_DOUBLE_EQ(c(0, 0), 1.0);
}

TEST(Covariance, ZeroColumnGivesZero) {
  std::mt19937_64 rng(1);
  const auto y = SampleMatrix::center(gaussian(50, 3, rng));
  const auto x = SampleMatrix::assume_centered(Eigen::MatrixXd::Zero(50, 1));
  EXPECT_EQ(covariance_matrix(x, y).norm(), 0.0);
}

TEST(Covariance, MatchesElementwiseAccumulation) {
  std::mt19937_64 rng(2);
  const Eigen::MatrixXd x = gaussian(200, 2, rng), y = gaussian(200, 3, rng);
  const auto c = covariance_matrix(SampleMatrix::center(x), SampleMatrix::center(y));
  EXPECT_LT((c - oracle::covariance_loops(x, y)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Covariance, RejectsMismatchedSampleCounts) {
  const auto x = SampleMatrix::assume_centered(Eigen::MatrixXd::Zero(5, 1));
  const auto y = SampleMatrix::assume_centered(Eigen::MatrixXd::Zero(6, 1));
  EXPECT_THROW(covariance_matrix(x, y), std::invalid_argument);
}

TEST(Covariance, RejectsUncenteredBlocks) {
  const auto x = SampleMatrix::raw(Eigen::MatrixXd::Ones(5, 1));
  EXPECT_THROW(covariance_matrix(x, x), std::invalid_argument);
}

TEST(Centering, ColumnMeansVanish) {
  std::mt19937_64 rng(3);
  Eigen::MatrixXd raw = gaussian(300, 4, rng);
  raw.col(1).array() += 1e6;
  raw.col(3).setConstant(7.0);
  const auto c = SampleMatrix::center(raw);
  for (Eigen::Index j = 0; j < 4; ++j) {
    const double mean = c.data().col(j).mean();
    const double sd = std::sqrt(c.data().col(j).squaredNorm() / 300.0);
    if (sd == 0.0) EXPECT_LT(std::abs(mean), 1e-12);
    else EXPECT_LT(std::abs(mean), 1e-9 * sd);
  }
}

TEST(PartialCovariance, EmptyConditioningSet) {
  std::mt19937_64 rng(4);
  const Eigen::MatrixXd raw = gaussian(500, 3, rng);
  Eigen::MatrixXd mixed = raw;
  mixed.col(1) += 0.5 * raw.col(0);
  const auto x = SampleMatrix::center(mixed.leftCols(1)), y = SampleMatrix::center(mixed.rightCols(2));
  const auto v = partial_covariance(x, y, SampleMatrix::empty(500), 0.0).V;
  const Eigen::MatrixXd sxx = covariance_matrix(x, x), sxy = covariance_matrix(x, y), syy = covariance_matrix(y, y);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ey(syy);
  const Eigen::MatrixXd expected = sxy / std::sqrt(sxx(0, 0)) * ey.operatorInverseSqrt();
  EXPECT_LT((v - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PartialCovariance, CopyHasUnitCorrelation) {
  std::mt19937_64 rng(5);
  const auto x = SampleMatrix::center(gaussian(1000, 1, rng));
  const auto pc = partial_covariance(x, x, SampleMatrix::empty(1000), 0.0);
  EXPECT_NEAR(pc.V(0, 0), 1.0, 1e-9);
  EXPECT_NEAR(pcc(x, x, SampleMatrix::empty(1000), 0.0), 1.0, 1e-9);
}

TEST(PartialCovariance, ConditionallyIndependentGivenCommonCause) {
  std::mt19937_64 rng(6);
  const Eigen::MatrixXd z = gaussian(50000, 1, rng);
  const Eigen::MatrixXd x = z + gaussian(50000, 1, rng), y = z + gaussian(50000, 1, rng);
  const auto sx = SampleMatrix::center(x), sy = SampleMatrix::center(y), sz = SampleMatrix::center(z);
  EXPECT_LT(partial_covariance(sx, sy, sz, 0.0).V.norm(), 0.05);
  // Without conditioning the two are strongly correlated.
  EXPECT_GT(pcc(sx, sy, SampleMatrix::empty(50000), 0.0), 0.2);
}

TEST(PartialCovariance, RejectsNonFiniteInput) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(10, 1);
  x(3, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto sx = SampleMatrix::assume_centered(x);
  EXPECT_THROW(partial_covariance(sx, sx, SampleMatrix::empty(10), 0.0), std::invalid_argument);
}

TEST(PartialCovariance, RidgeChangesResultByOrderRidge) {
  std::mt19937_64 rng(7);
  const auto x = SampleMatrix::center(gaussian(2000, 2, rng));
  const auto y = SampleMatrix::center(gaussian(2000, 2, rng) + x.data());
  const auto z = SampleMatrix::center(gaussian(2000, 1, rng));
  const double r = 1e-6;
  const auto v0 = partial_covariance(x, y, z, 0.0).V, vr = partial_covariance(x, y, z, r).V;
  EXPECT_LT((v0 - vr).norm(), 100.0 * r);
}

TEST(Pcc, IndependentBlocksAreNearZero) {
  std::mt19937_64 rng(8);
  const auto x = SampleMatrix::center(gaussian(50000, 1, rng));
  const auto y = SampleMatrix::center(gaussian(50000, 1, rng));
  EXPECT_LT(pcc(x, y, SampleMatrix::empty(50000), 0.0), 0.05);
}

TEST(Pcc, ZeroForConstructedUncorrelatedData) {
  // Orthogonal, centered columns: every cross covariance is exactly zero.
  Eigen::MatrixXd h(4, 3);
  h << 1, 1, 1,  //
      1, -1, -1,  //
      -1, 1, -1,  //
      -1, -1, 1;
  const auto x = SampleMatrix::assume_centered(h.col(0)), y = SampleMatrix::assume_centered(h.col(1)),
             z = SampleMatrix::assume_centered(h.col(2));
  EXPECT_LT(pcc(x, y, z, 0.0), 1e-12);
}

TEST(Pcc, MatchesCanonicalCorrelationOracle) {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 10; ++rep) {
    const Eigen::MatrixXd z = gaussian(400, 2, rng);
    const Eigen::MatrixXd x = gaussian(400, 3, rng) + z * gaussian(2, 3, rng);
    const Eigen::MatrixXd y = gaussian(400, 2, rng) + 0.3 * x.leftCols(2) + z * gaussian(2, 2, rng);
    const double mine = pcc(SampleMatrix::center(x), SampleMatrix::center(y), SampleMatrix::center(z), 0.0);
    EXPECT_NEAR(mine, oracle::pcc_canonical(x, y, z), 1e-9);
  }
}

TEST(Pcc, InvariantUnderInvertibleRecoordinatization) {
  std::mt19937_64 rng(10);
  const Eigen::MatrixXd z = gaussian(1000, 2, rng);
  const Eigen::MatrixXd x = gaussian(1000, 3, rng) + z * gaussian(2, 3, rng);
  const Eigen::MatrixXd y = gaussian(1000, 2, rng) + 0.5 * x.leftCols(2);
  const double base = pcc(SampleMatrix::center(x), SampleMatrix::center(y), SampleMatrix::center(z), 0.0);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::MatrixXd a = invertible(3, rng), b = invertible(2, rng), c = invertible(2, rng);
    const double t = pcc(SampleMatrix::center(x * a.transpose()), SampleMatrix::center(y * b.transpose()),
                         SampleMatrix::center(z * c.transpose()), 0.0);
    EXPECT_NEAR(t, base, 1e-8);
  }
}

TEST(Pcc, NonNegative) {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const auto x = SampleMatrix::center(gaussian(30, 2, rng));
    const auto y = SampleMatrix::center(gaussian(30, 3, rng));
    const auto z = SampleMatrix::center(gaussian(30, 1, rng));
    EXPECT_GE(pcc(x, y, z, 1e-6), 0.0);
  }
}

TEST(FitLinear, ExactLine) {
  Eigen::MatrixXd x(20, 1);
  Eigen::VectorXd y(20);
  for (int i = 0; i < 20; ++i) {
    x(i, 0) = i * 0.5 - 3.0;
    y(i) = 2.0 * x(i, 0) + 1.0;
  }
  const auto m = fit_linear(x, y);
  EXPECT_NEAR(m.weights(0), 2.0, 1e-8);
  EXPECT_NEAR(m.intercept, 1.0, 1e-8);
  EXPECT_LT(m.residual_variance, 1e-12);
}

TEST(FitLinear, EmptyDesignIsMeanPredictor) {
  Eigen::VectorXd y(5);
  y << 1, 2, 3, 4, 10;
  const auto m = fit_linear(Eigen::MatrixXd(5, 0), y);
  EXPECT_DOUBLE_EQ(m.intercept, 4.0);
  const Eigen::VectorXd resid = y - m.predict_all(Eigen::MatrixXd(5, 0));
  EXPECT_LT((resid - (y.array() - 4.0).matrix()).norm(), 1e-15);
}

TEST(FitLinear, MatchesPseudoInverseOracle) {
  std::mt19937_64 rng(12);
  const Eigen::MatrixXd x = gaussian(300, 4, rng);
  const Eigen::VectorXd y = x * Eigen::Vector4d(1, -2, 0.5, 3) + gaussian(300, 1, rng).col(0);
  const auto m = fit_linear(x, y.array() + 5.0);
  const Eigen::VectorXd ref = oracle::ols_pinv(x, y.array() + 5.0);
  EXPECT_NEAR(m.intercept, ref(0), 1e-8);
  EXPECT_LT((m.weights - ref.tail(4)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(FitLinear, ResidualsHaveZeroMeanAndAreOrthogonalToRegressors) {
  std::mt19937_64 rng(13);
  Eigen::MatrixXd x = gaussian(500, 3, rng);
  x.col(0).array() += 100.0;
  const Eigen::VectorXd y = gaussian(500, 1, rng).col(0) + x.col(1);
  const auto m = fit_linear(x, y);
  const Eigen::VectorXd resid = y - m.predict_all(x);
  EXPECT_LT(std::abs(resid.mean()), 1e-9);
  for (Eigen::Index j = 0; j < 3; ++j)
    EXPECT_LT(std::abs((x.col(j).array() - x.col(j).mean()).matrix().dot(resid)) / 500.0, 1e-8);
}

TEST(FitLinear, NeedsMoreSamplesThanRegressors) {
  EXPECT_THROW(fit_linear(Eigen::MatrixXd::Zero(3, 3), Eigen::VectorXd::Zero(3)), std::invalid_argument);
}
