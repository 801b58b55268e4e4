#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>

#include "emflow/gaussian.hpp"
#include "oracles.hpp"

using namespace emflow;

namespace {

GaussianParams<double> corr_half() {
  GaussianParams<double> g{VectorXd::Zero(2), MatrixXd(2, 2)};
  g.cov << 1.0, 0.5, 0.5, 1.0;
  return g;
}

IndexList random_observed(Index p, std::mt19937_64& rng) {
  // Non-empty proper subset, increasing.
  std::uniform_int_distribution<Index> size(1, p - 1);
  IndexList all(static_cast<std::size_t>(p));
  std::iota(all.begin(), all.end(), Index{0});
  std::shuffle(all.begin(), all.end(), rng);
  IndexList obs(all.begin(), all.begin() + size(rng));
  std::sort(obs.begin(), obs.end());
  return obs;
}

}  // namespace

TEST_CASE("log density at the mean with identity covariance") {
  const auto g = GaussianParams<double>::standard(2);
  CHECK(log_density(VectorXd::Zero(2), g) == doctest::Approx(-std::log(2 * std::numbers::pi)).epsilon(1e-14));
  CHECK(log_density(VectorXd::Zero(2), g) == doctest::Approx(-1.837877).epsilon(1e-6));
}

TEST_CASE("identity covariance closed form") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const Index p = 1 + rep % 6;
    GaussianParams<double> g{oracle::randn(p, 1, rng).col(0), MatrixXd::Identity(p, p)};
    const VectorXd z = oracle::randn(p, 1, rng).col(0);
    const double expected = -0.5 * p * std::log(2 * std::numbers::pi) - 0.5 * (z - g.mean).squaredNorm();
    CHECK(log_density(z, g) == doctest::Approx(expected).epsilon(1e-13));
  }
}

TEST_CASE("log density matches the dense oracle") {
  const auto g = corr_half();
  const VectorXd z = VectorXd::Ones(2);
  CHECK(std::abs(log_density(z, g) - oracle::dense_log_density(z, g.mean, g.cov)) < 1e-10);

  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    const Index p = 1 + rep % 8;
    GaussianParams<double> r{oracle::randn(p, 1, rng).col(0), oracle::random_spd(p, rng)};
    const VectorXd x = oracle::randn(p, 1, rng).col(0);
    CHECK(std::abs(log_density(x, r) - oracle::dense_log_density(x, r.mean, r.cov)) < 1e-10);
  }
}

TEST_CASE("density integrates to one on a grid") {
  const auto g = corr_half();
  const GaussianDensity<double> d(g);
  const double h = 0.05;
  double total = 0;
  for (double x = -8; x <= 8; x += h)
    for (double y = -8; y <= 8; y += h) total += std::exp(d.log_density(Eigen::Vector2d(x, y)));
  CHECK(std::abs(total * h * h - 1.0) < 1e-2);
}

TEST_CASE("non positive definite covariance reports its smallest eigenvalue") {
  GaussianParams<double> g{VectorXd::Zero(2), MatrixXd(2, 2)};
  g.cov << 1, 2, 2, 1;
  try {
    (void)log_density(VectorXd::Zero(2), g);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("smallest eigenvalue -1") != std::string::npos);
    CHECK(e.where() == "gaussian.log_density");
  }
}

TEST_CASE("jitter rescues a singular but PSD covariance") {
  MatrixXd c(2, 2);
  c << 1, 1, 1, 1;
  const auto f = jittered_cholesky<double>(c, "test");
  CHECK(f.jitter > 0);
  CHECK(f.jitter <= 1e-6);
  const MatrixXd pd = make_positive_definite<double>(c, "test");
  CHECK(Eigen::LLT<MatrixXd>(pd).info() == Eigen::Success);

  // All-zero covariance: trace 0, so the jitter uses unit scale.
  const MatrixXd zero = make_positive_definite<double>(MatrixXd::Zero(3, 3), "test");
  CHECK(zero.isApprox(1e-10 * MatrixXd::Identity(3, 3)));
}

TEST_CASE("conditional under identity covariance ignores observed values") {
  GaussianParams<double> g{VectorXd::LinSpaced(4, 1, 4), MatrixXd::Identity(4, 4)};
  const auto c = conditional(g, IndexList{0, 2}, Eigen::Vector2d(100, -7));
  CHECK(c.missing_idx == IndexList{1, 3});
  CHECK(c.mean.isApprox(Eigen::Vector2d(2, 4)));
  CHECK(c.cov.isApprox(MatrixXd::Identity(2, 2)));
}

TEST_CASE("two-dimensional conditional example") {
  const auto c = conditional(corr_half(), IndexList{0}, Eigen::Matrix<double, 1, 1>(1.0));
  CHECK(c.mean(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(c.cov(0, 0) == doctest::Approx(0.75).epsilon(1e-15));

  const MatrixXd padded = padded_conditional_cov(c, 2);
  MatrixXd expected = MatrixXd::Zero(2, 2);
  expected(1, 1) = 0.75;
  CHECK(padded == expected);
}

TEST_CASE("conditional matches the dense-inverse oracle and the Schur property holds") {
  std::mt19937_64 rng(17);
  for (int rep = 0; rep < 200; ++rep) {
    const Index p = 2 + rep % 7;
    GaussianParams<double> g{oracle::randn(p, 1, rng).col(0), oracle::random_spd(p, rng)};
    const IndexList obs = random_observed(p, rng);
    const VectorXd vals = oracle::randn(static_cast<Index>(obs.size()), 1, rng).col(0);
    const auto c = conditional(g, obs, vals);
    const auto ref = oracle::dense_conditional(g.mean, g.cov, obs, vals);
    CHECK((c.mean - ref.mean).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((c.cov - ref.cov).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((c.cov - c.cov.transpose()).cwiseAbs().maxCoeff() == 0.0);
    const MatrixXd gap = MatrixXd(g.cov(c.missing_idx, c.missing_idx)) - c.cov;
    CHECK(Eigen::SelfAdjointEigenSolver<MatrixXd>(gap).eigenvalues().minCoeff() >= -1e-9);
    CHECK(Eigen::SelfAdjointEigenSolver<MatrixXd>(c.cov).eigenvalues().minCoeff() >= -1e-9);
  }
}

TEST_CASE("conditional rejects bad index lists") {
  const auto g = GaussianParams<double>::standard(3);
  CHECK_THROWS_AS(conditional(g, IndexList{}, VectorXd(0)), std::invalid_argument);
  CHECK_THROWS_AS(conditional(g, IndexList{0, 1, 2}, VectorXd::Zero(3)), std::invalid_argument);
  CHECK_THROWS_AS(conditional(g, IndexList{1, 0}, VectorXd::Zero(2)), std::invalid_argument);
  CHECK_THROWS_AS(conditional(g, IndexList{0, 3}, VectorXd::Zero(2)), std::invalid_argument);
  CHECK_THROWS_AS(conditional(g, IndexList{0}, VectorXd::Zero(2)), std::invalid_argument);
}

TEST_CASE("impute_row") {
  const auto g = corr_half();
  MaskRow none = MaskRow::Zero(2), second(2), both = MaskRow::Ones(2);
  second << 0, 1;

  SUBCASE("all observed is unchanged") {
    CHECK(impute_row(Eigen::Vector2d(3, 4), none, g) == Eigen::Vector2d(3, 4));
  }
  SUBCASE("one missing follows the conditional mean") {
    const VectorXd out = impute_row(Eigen::Vector2d(1, 99), second, g);
    CHECK(out(0) == 1.0);
    CHECK(out(1) == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("all missing gives the mean") {
    GaussianParams<double> shifted = g;
    shifted.mean << 0.25, -0.5;
    CHECK(impute_row(Eigen::Vector2d(7, 8), both, shifted) == shifted.mean);
  }
  SUBCASE("idempotent") {
    std::mt19937_64 rng(5);
    for (int rep = 0; rep < 30; ++rep) {
      const Index p = 3 + rep % 5;
      GaussianParams<double> r{oracle::randn(p, 1, rng).col(0), oracle::random_spd(p, rng)};
      MaskRow m(p);
      for (Index j = 0; j < p; ++j) m(j) = std::uniform_int_distribution<int>(0, 1)(rng);
      const VectorXd once = impute_row(oracle::randn(p, 1, rng).col(0), m, r);
      const VectorXd twice = impute_row(once, m, r);
      CHECK((once - twice).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("padded conditional covariance") {
  ConditionalGaussian<double> none{VectorXd(0), MatrixXd(0, 0), {}};
  CHECK(padded_conditional_cov(none, 3) == MatrixXd::Zero(3, 3));

  ConditionalGaussian<double> two{VectorXd::Zero(2), MatrixXd(2, 2), {0, 2}};
  two.cov << 2, 0.3, 0.3, 1;
  const MatrixXd padded = padded_conditional_cov(two, 3);
  CHECK(padded == padded.transpose());
  CHECK(padded(0, 2) == 0.3);
  CHECK(padded.row(1).isZero());
}

TEST_CASE("batch EM estimates on complete data are the sample moments") {
  std::mt19937_64 rng(9);
  const MatrixXd z = oracle::randn(50, 4, rng);
  const MaskMatrix none = MaskMatrix::Zero(50, 4);
  const auto est = batch_em_estimates(z, none, GaussianParams<double>::standard(4));
  const VectorXd mean = z.colwise().mean();
  const MatrixXd centered = z.rowwise() - mean.transpose();
  const MatrixXd cov = centered.transpose() * centered / 50.0;
  CHECK((est.mean - mean).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((est.cov - cov).cwiseAbs().maxCoeff() < 1e-12);

  const auto single = batch_em_estimates(MatrixXd(z.topRows(1)), MaskMatrix(none.topRows(1)),
                                         GaussianParams<double>::standard(4));
  CHECK(single.cov.isZero(0.0));
}

TEST_CASE("batch EM estimates with one missing cell match a hand derivation") {
  // Three rows, second coordinate of the last row missing, params N(0, [[1,.5],[.5,1]]).
  MatrixXd z(3, 2);
  z << 1, 2, -1, 0, 2, 0;
  MaskMatrix m = MaskMatrix::Zero(3, 2);
  m(2, 1) = 1;
  const auto est = batch_em_estimates(z, m, corr_half());
  // Imputed z32 = 0.5 * 2 = 1; conditional variance 0.75.
  const double m1 = (1 - 1 + 2) / 3.0, m2 = (2 + 0 + 1) / 3.0;
  const double s11 = ((1 - m1) * (1 - m1) + (-1 - m1) * (-1 - m1) + (2 - m1) * (2 - m1)) / 3.0;
  const double s12 = ((1 - m1) * (2 - m2) + (-1 - m1) * (0 - m2) + (2 - m1) * (1 - m2)) / 3.0;
  const double s22 = ((2 - m2) * (2 - m2) + (0 - m2) * (0 - m2) + (1 - m2) * (1 - m2) + 0.75) / 3.0;
  CHECK(est.mean(0) == doctest::Approx(m1).epsilon(1e-14));
  CHECK(est.mean(1) == doctest::Approx(m2).epsilon(1e-14));
  CHECK(est.cov(0, 0) == doctest::Approx(s11).epsilon(1e-14));
  CHECK(est.cov(0, 1) == doctest::Approx(s12).epsilon(1e-14));
  CHECK(est.cov(1, 0) == est.cov(0, 1));
  CHECK(est.cov(1, 1) == doctest::Approx(s22).epsilon(1e-14));
}

TEST_CASE("e_step agrees with the dense EM step oracle on random masks") {
  std::mt19937_64 rng(21);
  const Index p = 5;
  GaussianParams<double> g{oracle::randn(p, 1, rng).col(0), oracle::random_spd(p, rng)};
  const MatrixXd z = oracle::randn(200, p, rng);
  MaskMatrix m(200, p);
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < p; ++j) m(i, j) = std::bernoulli_distribution(0.4)(rng);
  const auto est = batch_em_estimates(z, m, g);
  const auto ref = oracle::dense_em_step(z, m, g);
  CHECK((est.mean - ref.mean).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((est.cov - ref.cov).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(est.cov == est.cov.transpose());
}

TEST_CASE("observed log-likelihood sums marginal densities") {
  const auto g = corr_half();
  MatrixXd z(3, 2);
  z << 0.3, -0.2, 1, 5, 7, 8;
  MaskMatrix m = MaskMatrix::Zero(3, 2);
  m(1, 1) = 1;
  m(2, 0) = m(2, 1) = 1;
  const double expected = oracle::dense_log_density(z.row(0).transpose(), g.mean, g.cov) +
                          oracle::dense_log_density(VectorXd::Constant(1, 1.0), VectorXd::Zero(1), MatrixXd::Ones(1, 1));
  CHECK(observed_log_likelihood(z, m, g) == doctest::Approx(expected).epsilon(1e-12));
}
