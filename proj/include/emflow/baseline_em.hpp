#pragma once

#include <string>
#include <vector>

#include "emflow/gaussian.hpp"
#include "emflow/online_em.hpp"

namespace emflow {

template <typename Scalar>
struct BatchEmResult {
  GaussianParams<Scalar> params;
  int iterations = 0;
  bool converged = false;
  /// Observed-data log-likelihood at the initial params, then after each iteration.
  std::vector<Scalar> log_likelihood;
};

namespace detail {

inline void require_observed_columns(const MaskMatrix& masks, const char* where) {
  for (Index j = 0; j < masks.cols(); ++j) {
    if ((masks.col(j).array() != 0).all()) {
      throw std::invalid_argument(std::string(where) + ": feature " + std::to_string(j) + " has no observed entries");
    }
  }
}

}  // namespace detail

/// Column means of observed entries and the diagonal of observed variances,
/// inflated by (1 + beta).
template <typename Scalar>
GaussianParams<Scalar> default_em_init(const Mat<Scalar>& Z, const MaskMatrix& masks, Scalar beta = Scalar(1e-2)) {
  detail::require_observed_columns(masks, "baseline_em.init");
  const Index p = Z.cols();
  GaussianParams<Scalar> init{Vec<Scalar>::Zero(p), Mat<Scalar>::Zero(p, p)};
  for (Index j = 0; j < p; ++j) {
    Scalar sum = 0, sum_sq = 0;
    Index count = 0;
    for (Index i = 0; i < Z.rows(); ++i) {
      if (masks(i, j)) continue;
      sum += Z(i, j);
      ++count;
    }
    const Scalar mean = sum / Scalar(count);
    for (Index i = 0; i < Z.rows(); ++i) {
      if (!masks(i, j)) sum_sq += (Z(i, j) - mean) * (Z(i, j) - mean);
    }
    init.mean(j) = mean;
    init.cov(j, j) = sum_sq / Scalar(count);
  }
  init.cov = make_positive_definite<Scalar>(robustify(init.cov, beta), "baseline_em.init");
  return init;
}

/// Full-batch EM for a Gaussian with missing coordinates. Stops after
/// max_iter iterations or once ||d mu||_inf + ||d Sigma||_max < tol.
template <typename Scalar>
BatchEmResult<Scalar> batch_em_fit(const Mat<Scalar>& Z, const MaskMatrix& masks, const GaussianParams<Scalar>& init,
                                   int max_iter = 500, Scalar tol = Scalar(1e-8)) {
  if (Z.rows() != masks.rows() || Z.cols() != masks.cols()) throw std::invalid_argument("batch_em_fit: shape mismatch");
  if (Z.rows() < 1) throw std::invalid_argument("batch_em_fit: empty data");
  detail::require_observed_columns(masks, "batch_em_fit");
  BatchEmResult<Scalar> out;
  out.params = init;
  out.params.cov = make_positive_definite<Scalar>(init.cov, "baseline_em.fit");
  out.log_likelihood.push_back(observed_log_likelihood(Z, masks, out.params));
  for (int it = 1; it <= max_iter; ++it) {
    GaussianParams<Scalar> next = batch_em_estimates(Z, masks, out.params);
    next.cov = make_positive_definite<Scalar>(next.cov, "baseline_em.fit");
    const Scalar delta = (next.mean - out.params.mean).cwiseAbs().maxCoeff() +
                         (next.cov - out.params.cov).cwiseAbs().maxCoeff();
    out.params = std::move(next);
    out.iterations = it;
    out.log_likelihood.push_back(observed_log_likelihood(Z, masks, out.params));
    if (delta < tol) {
      out.converged = true;
      break;
    }
  }
  return out;
}

/// Row-wise conditional-mean imputation under fitted params.
template <typename Scalar>
Mat<Scalar> batch_em_impute(const Mat<Scalar>& Z, const MaskMatrix& masks, const GaussianParams<Scalar>& params) {
  return e_step(Z, masks, params).imputed;
}

}  // namespace emflow
