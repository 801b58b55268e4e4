// Synthetic data sets shared by the unit tests and the acceptance suite.
#pragma once

#include <random>

#include "emflow/flow.hpp"
#include "emflow/masking.hpp"
#include "oracles.hpp"

namespace fixtures {

using emflow::Index;
using emflow::MaskMatrix;
using emflow::MatrixXd;
using emflow::VectorXd;

/// Correlation matrix from a random SPD draw.
inline MatrixXd random_correlation(Index p, std::mt19937_64& rng) {
  const MatrixXd s = oracle::random_spd(p, rng, 0.05);
  const VectorXd d = s.diagonal().cwiseSqrt().cwiseInverse();
  return d.asDiagonal() * s * d.asDiagonal();
}

struct GaussianInstance {
  VectorXd mean;
  MatrixXd cov;
  MatrixXd data;
  MaskMatrix mask;
};

/// MVN, n = 2000, p = 5, per-feature sd 0.15 around 0.5, MCAR 0.2.
inline GaussianInstance gaussian_instance(std::uint64_t seed = 11, Index n = 2000, Index p = 5, double rate = 0.2) {
  std::mt19937_64 rng(seed);
  GaussianInstance g;
  g.mean = VectorXd::Constant(p, 0.5);
  g.cov = 0.15 * 0.15 * random_correlation(p, rng);
  g.data = oracle::sample_mvn(n, g.mean, g.cov, rng);
  g.mask = emflow::mcar_mask(n, p, rate, seed + 1);
  return g;
}

/// Correlated Gaussian pushed through a fixed random coupling map, then
/// min-max scaled to [0, 1].
inline MatrixXd nonlinear_data(std::uint64_t seed = 5, Index n = 2000, Index p = 6) {
  std::mt19937_64 rng(seed);
  const MatrixXd corr = random_correlation(p, rng);
  const MatrixXd z = oracle::sample_mvn(n, VectorXd::Zero(p), corr, rng);
  const auto map = emflow::random_flow<double>(p, 4, seed + 100, 16, 0.6);
  MatrixXd x = emflow::flow_forward(map, z).values;
  const VectorXd lo = x.colwise().minCoeff(), hi = x.colwise().maxCoeff();
  for (Index j = 0; j < p; ++j) x.col(j) = (x.col(j).array() - lo(j)) / (hi(j) - lo(j));
  return x;
}

/// Observed cells keep their value; masked cells get `fill`.
inline MatrixXd hide(const MatrixXd& data, const MaskMatrix& mask, double fill = 0.0) {
  MatrixXd out = data;
  for (Index j = 0; j < data.cols(); ++j)
    for (Index i = 0; i < data.rows(); ++i)
      if (mask(i, j)) out(i, j) = fill;
  return out;
}

inline MatrixXd column_mean_impute(const MatrixXd& data, const MaskMatrix& mask) {
  MatrixXd out = data;
  for (Index j = 0; j < data.cols(); ++j) {
    double sum = 0;
    Index count = 0;
    for (Index i = 0; i < data.rows(); ++i)
      if (!mask(i, j)) {
        sum += data(i, j);
        ++count;
      }
    for (Index i = 0; i < data.rows(); ++i)
      if (mask(i, j)) out(i, j) = sum / double(count);
  }
  return out;
}

}  // namespace fixtures
