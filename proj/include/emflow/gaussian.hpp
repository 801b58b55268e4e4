#pragma once

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "emflow/types.hpp"

namespace emflow {

/// Full-covariance multivariate normal N(mean, cov).
template <typename Scalar>
struct GaussianParams {
  Vec<Scalar> mean;
  Mat<Scalar> cov;

  Index dim() const { return mean.size(); }

  static GaussianParams standard(Index p) {
    return {Vec<Scalar>::Zero(p), Mat<Scalar>::Identity(p, p)};
  }
};

/// Distribution of the missing block given the observed block.
template <typename Scalar>
struct ConditionalGaussian {
  Vec<Scalar> mean;
  Mat<Scalar> cov;
  IndexList missing_idx;
};

template <typename Derived>
typename Derived::PlainObject symmetrized(const Eigen::MatrixBase<Derived>& m) {
  return (m + m.transpose()) / typename Derived::Scalar(2);
}

/// Cholesky factor of a covariance, with the diagonal shift that was needed.
template <typename Scalar>
struct JitteredCholesky {
  Eigen::LLT<Mat<Scalar>> llt;
  Scalar jitter = 0;
};

/// Factorizes `cov`; on failure retries with cov + eps * (trace/p) * I for
/// eps in {1e-10, 1e-8, 1e-6}. Throws NumericalError reporting the smallest
/// eigenvalue when every attempt fails.
template <typename Scalar>
JitteredCholesky<Scalar> jittered_cholesky(const Mat<Scalar>& cov,
                                           const std::string& where) {
  JitteredCholesky<Scalar> out;
  const Index p = cov.rows();
  if (p == 0) return out;
  if (cov.allFinite()) {
    out.llt.compute(cov);
    if (out.llt.info() == Eigen::Success) return out;

    Scalar scale = cov.trace() / Scalar(p);
    if (!(scale > Scalar(0)) || !std::isfinite(static_cast<double>(scale))) scale = Scalar(1);
    for (Scalar eps : {Scalar(1e-10), Scalar(1e-8), Scalar(1e-6)}) {
      const Scalar shift = eps * scale;
      out.llt.compute(cov + shift * Mat<Scalar>::Identity(p, p));
      if (out.llt.info() == Eigen::Success) {
        out.jitter = shift;
        return out;
      }
    }
  }
  std::ostringstream msg;
  msg << "covariance is not positive definite after jitter";
  if (cov.allFinite()) {
    Eigen::SelfAdjointEigenSolver<Mat<Scalar>> eig(cov, Eigen::EigenvaluesOnly);
    msg << " (smallest eigenvalue " << static_cast<double>(eig.eigenvalues().minCoeff()) << ")";
  } else {
    msg << " (non-finite entries)";
  }
  throw NumericalError(where, msg.str());
}

/// Returns cov (symmetrized) shifted by the minimal ladder jitter that makes it PD.
template <typename Scalar>
Mat<Scalar> make_positive_definite(const Mat<Scalar>& cov, const std::string& where) {
  Mat<Scalar> sym = symmetrized(cov);
  const auto factor = jittered_cholesky<Scalar>(sym, where);
  if (factor.jitter != Scalar(0)) sym.diagonal().array() += factor.jitter;
  return sym;
}

/// Log-density with the factorization cached, for repeated evaluation.
template <typename Scalar>
class GaussianDensity {
 public:
  explicit GaussianDensity(const GaussianParams<Scalar>& params)
      : mean_(params.mean),
        factor_(jittered_cholesky<Scalar>(params.cov, "gaussian.log_density")) {
    if (params.cov.rows() != params.mean.size() || params.cov.cols() != params.mean.size()) {
      throw std::invalid_argument("gaussian: mean/cov dimension mismatch");
    }
    const auto& L = factor_.llt.matrixLLT();
    Scalar log_det = 0;
    for (Index i = 0; i < L.rows(); ++i) log_det += std::log(L(i, i));
    log_norm_ = -Scalar(0.5) * (Scalar(mean_.size()) * std::log(2 * std::numbers::pi_v<Scalar>)) - log_det;
  }

  Index dim() const { return mean_.size(); }

  template <typename Derived>
  Scalar log_density(const Eigen::MatrixBase<Derived>& z) const {
    if (z.size() != mean_.size()) throw std::invalid_argument("gaussian: dimension mismatch");
    return log_density_cols(Mat<Scalar>(z.reshaped()))(0);
  }

  /// Column-wise log densities of a p x B block.
  Vec<Scalar> log_density_cols(const Mat<Scalar>& Z) const {
    const Mat<Scalar> Y = factor_.llt.matrixL().solve(Z.colwise() - mean_);
    return (log_norm_ - Scalar(0.5) * Y.colwise().squaredNorm().array()).matrix().transpose();
  }

  /// Column-wise precision-weighted residuals Sigma^{-1} (z - mu), the negated
  /// gradient of log_density.
  Mat<Scalar> precision_residual_cols(const Mat<Scalar>& Z) const {
    return factor_.llt.solve(Z.colwise() - mean_);
  }

 private:
  Vec<Scalar> mean_;
  JitteredCholesky<Scalar> factor_;
  Scalar log_norm_ = 0;
};

template <typename Scalar, typename Derived>
Scalar log_density(const Eigen::MatrixBase<Derived>& z, const GaussianParams<Scalar>& params) {
  return GaussianDensity<Scalar>(params).log_density(z);
}

namespace detail {

inline void check_index_list(const IndexList& idx, Index p, const char* what) {
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= p) throw std::invalid_argument(std::string(what) + " index out of range");
    if (k > 0 && idx[k] <= idx[k - 1]) throw std::invalid_argument(std::string(what) + " must be strictly increasing");
  }
}

inline IndexList complement(const IndexList& idx, Index p) {
  IndexList out;
  std::size_t k = 0;
  for (Index j = 0; j < p; ++j) {
    if (k < idx.size() && idx[k] == j) {
      ++k;
    } else {
      out.push_back(j);
    }
  }
  return out;
}

}  // namespace detail

/// Conditional law of the unobserved coordinates. `observed_idx` must be
/// non-empty, strictly increasing, and leave at least one coordinate free.
template <typename Scalar, typename Derived>
ConditionalGaussian<Scalar> conditional(const GaussianParams<Scalar>& params,
                                        const IndexList& observed_idx,
                                        const Eigen::MatrixBase<Derived>& observed_vals) {
  const Index p = params.dim();
  detail::check_index_list(observed_idx, p, "observed_idx");
  if (observed_idx.empty()) throw std::invalid_argument("conditional: no observed coordinates");
  if (static_cast<Index>(observed_idx.size()) == p) throw std::invalid_argument("conditional: no missing coordinates");
  if (observed_vals.size() != static_cast<Index>(observed_idx.size())) {
    throw std::invalid_argument("conditional: observed_vals length mismatch");
  }
  ConditionalGaussian<Scalar> out;
  out.missing_idx = detail::complement(observed_idx, p);
  const auto& o = observed_idx;
  const auto& m = out.missing_idx;

  const Mat<Scalar> cov_oo = params.cov(o, o);
  const auto factor = jittered_cholesky<Scalar>(cov_oo, "gaussian.conditional");
  const Mat<Scalar> cov_mo = params.cov(m, o);
  const Vec<Scalar> resid = Vec<Scalar>(observed_vals) - Vec<Scalar>(params.mean(o));
  out.mean = params.mean(m) + cov_mo * factor.llt.solve(resid);
  out.cov = symmetrized(Mat<Scalar>(params.cov(m, m) - cov_mo * factor.llt.solve(cov_mo.transpose())));
  return out;
}

/// Scatters a conditional covariance into a p x p zero matrix.
template <typename Scalar>
Mat<Scalar> padded_conditional_cov(const ConditionalGaussian<Scalar>& cond, Index p) {
  detail::check_index_list(cond.missing_idx, p, "missing_idx");
  Mat<Scalar> out = Mat<Scalar>::Zero(p, p);
  out(cond.missing_idx, cond.missing_idx) = cond.cov;
  return out;
}

/// Per-pattern cache of the regression gain Sigma_mo Sigma_oo^{-1} and the
/// conditional covariance, so rows sharing a mask share one factorization.
template <typename Scalar>
class ConditionalCache {
 public:
  struct Pattern {
    IndexList observed;
    IndexList missing;
    Mat<Scalar> gain;      // |m| x |o|
    Mat<Scalar> cond_cov;  // |m| x |m|
  };

  explicit ConditionalCache(const GaussianParams<Scalar>& params) : params_(params) {}

  const GaussianParams<Scalar>& params() const { return params_; }

  template <typename Derived>
  const Pattern& lookup(const Eigen::MatrixBase<Derived>& mask_row) {
    std::vector<std::uint8_t> key(static_cast<std::size_t>(mask_row.size()));
    for (Index j = 0; j < mask_row.size(); ++j) key[static_cast<std::size_t>(j)] = mask_row(j) ? 1 : 0;
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;

    Pattern pat;
    for (Index j = 0; j < mask_row.size(); ++j) (key[static_cast<std::size_t>(j)] ? pat.missing : pat.observed).push_back(j);
    if (!pat.missing.empty()) {
      if (pat.observed.empty()) {
        pat.cond_cov = params_.cov;
      } else {
        const Mat<Scalar> cov_oo = params_.cov(pat.observed, pat.observed);
        const auto factor = jittered_cholesky<Scalar>(cov_oo, "gaussian.conditional");
        const Mat<Scalar> cov_mo = params_.cov(pat.missing, pat.observed);
        pat.gain = factor.llt.solve(cov_mo.transpose()).transpose();
        pat.cond_cov = symmetrized(Mat<Scalar>(params_.cov(pat.missing, pat.missing) - pat.gain * cov_mo.transpose()));
      }
    }
    return cache_.emplace(std::move(key), std::move(pat)).first->second;
  }

  /// Conditional-mean imputation of one row under the cached params.
  template <typename DerivedZ, typename DerivedM>
  Vec<Scalar> impute(const Eigen::MatrixBase<DerivedZ>& z, const Eigen::MatrixBase<DerivedM>& mask_row,
                     const Pattern** used = nullptr) {
    const Pattern& pat = lookup(mask_row);
    if (used) *used = &pat;
    Vec<Scalar> out = z;
    if (pat.missing.empty()) return out;
    if (pat.observed.empty()) return params_.mean;
    const Vec<Scalar> resid = Vec<Scalar>(out(pat.observed)) - Vec<Scalar>(params_.mean(pat.observed));
    out(pat.missing) = params_.mean(pat.missing) + pat.gain * resid;
    return out;
  }

 private:
  GaussianParams<Scalar> params_;
  std::map<std::vector<std::uint8_t>, Pattern> cache_;
};

/// Replaces masked coordinates of `z` by their conditional mean. A row with
/// nothing observed is filled with the marginal mean.
template <typename Scalar, typename DerivedZ, typename DerivedM>
Vec<Scalar> impute_row(const Eigen::MatrixBase<DerivedZ>& z, const Eigen::MatrixBase<DerivedM>& mask_row,
                       const GaussianParams<Scalar>& params) {
  if (z.size() != params.dim() || mask_row.size() != params.dim()) {
    throw std::invalid_argument("impute_row: dimension mismatch");
  }
  ConditionalCache<Scalar> cache(params);
  return cache.impute(z, mask_row);
}

/// E-step over a batch (rows are samples): conditional-mean imputations and
/// per-row conditional covariances of the missing block.
template <typename Scalar>
struct EStepResult {
  Mat<Scalar> imputed;
  std::vector<ConditionalGaussian<Scalar>> conditionals;
};

template <typename Scalar>
EStepResult<Scalar> e_step(const Mat<Scalar>& Z, const MaskMatrix& masks, const GaussianParams<Scalar>& params) {
  if (Z.rows() != masks.rows() || Z.cols() != masks.cols() || Z.cols() != params.dim()) {
    throw std::invalid_argument("e_step: shape mismatch");
  }
  EStepResult<Scalar> out;
  out.imputed.resize(Z.rows(), Z.cols());
  out.conditionals.resize(static_cast<std::size_t>(Z.rows()));
  ConditionalCache<Scalar> cache(params);
  for (Index i = 0; i < Z.rows(); ++i) {
    const typename ConditionalCache<Scalar>::Pattern* pat = nullptr;
    out.imputed.row(i) = cache.impute(Z.row(i).transpose(), masks.row(i).transpose(), &pat).transpose();
    auto& cond = out.conditionals[static_cast<std::size_t>(i)];
    cond.missing_idx = pat->missing;
    cond.cov = pat->cond_cov;
    cond.mean = out.imputed.row(i)(pat->missing).transpose();
  }
  return out;
}

/// M-step maximizers from imputed rows and their conditional covariances:
/// mean of rows, and 1/B scatter plus the averaged padded conditional covs.
template <typename Scalar>
GaussianParams<Scalar> moments_from_imputed(const Mat<Scalar>& imputed,
                                            const std::vector<const ConditionalGaussian<Scalar>*>& conditionals) {
  const Index B = imputed.rows();
  if (B < 1) throw std::invalid_argument("moments_from_imputed: empty batch");
  GaussianParams<Scalar> out;
  out.mean = imputed.colwise().mean().transpose();
  const Mat<Scalar> centered = imputed.rowwise() - out.mean.transpose();
  out.cov = centered.transpose() * centered;
  for (const auto* cond : conditionals) {
    if (cond && !cond->missing_idx.empty()) out.cov(cond->missing_idx, cond->missing_idx) += cond->cov;
  }
  out.cov /= Scalar(B);
  out.cov = symmetrized(out.cov);
  return out;
}

/// Local EM estimates on a batch under `params`.
template <typename Scalar>
GaussianParams<Scalar> batch_em_estimates(const Mat<Scalar>& Z, const MaskMatrix& masks,
                                          const GaussianParams<Scalar>& params) {
  if (Z.rows() < 1) throw std::invalid_argument("batch_em_estimates: empty batch");
  const auto es = e_step(Z, masks, params);
  std::vector<const ConditionalGaussian<Scalar>*> ptrs;
  ptrs.reserve(es.conditionals.size());
  for (const auto& c : es.conditionals) ptrs.push_back(&c);
  return moments_from_imputed(es.imputed, ptrs);
}

/// Sum over rows of log N(z_o; mu_o, Sigma_oo). Rows with nothing observed add 0.
template <typename Scalar>
Scalar observed_log_likelihood(const Mat<Scalar>& Z, const MaskMatrix& masks, const GaussianParams<Scalar>& params) {
  std::map<std::vector<std::uint8_t>, GaussianDensity<Scalar>> cache;
  Scalar total = 0;
  IndexList obs, miss;
  for (Index i = 0; i < Z.rows(); ++i) {
    split_mask_row(masks.row(i).transpose(), obs, miss);
    if (obs.empty()) continue;
    std::vector<std::uint8_t> key(static_cast<std::size_t>(masks.cols()));
    for (Index j = 0; j < masks.cols(); ++j) key[static_cast<std::size_t>(j)] = masks(i, j) ? 1 : 0;
    auto it = cache.find(key);
    if (it == cache.end()) {
      GaussianParams<Scalar> marginal{params.mean(obs), params.cov(obs, obs)};
      it = cache.emplace(std::move(key), GaussianDensity<Scalar>(marginal)).first;
    }
    total += it->second.log_density(Vec<Scalar>(Z.row(i)(obs).transpose()));
  }
  return total;
}

}  // namespace emflow
