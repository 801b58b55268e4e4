#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <string>
#include <utility>
#include <vector>

#include "emflow/gaussian.hpp"

namespace emflow {

/// Online EM hyperparameters. The step size is rho_t = step_scale * t^-step_decay.
struct EmConfig {
  double step_scale = 0.99;
  double step_decay = 0.8;
  /// (outer iteration, beta) pairs; an entry applies from its iteration on.
  std::vector<std::pair<int, double>> beta_schedule{{1, 1e-2}, {3, 1e-3}, {5, 0.0}};
  /// Super-batch capacity; 0 disables the buffer.
  Index superbatch_max = 0;
  /// Re-estimate the base from the first batch of every outer iteration and
  /// reset the step counter.
  bool reinit_each_iteration = true;

  /// Empty when valid, otherwise one message per offending field.
  std::vector<std::string> validate() const {
    std::vector<std::string> errors;
    if (!(step_scale > 0.0 && step_scale <= 1.0)) errors.push_back("em.step_scale must be in (0, 1]");
    if (!(step_decay > 0.5 && step_decay <= 1.0)) errors.push_back("em.step_decay must be in (0.5, 1]");
    if (superbatch_max < 0) errors.push_back("em.superbatch_max must be >= 0");
    for (const auto& [iteration, beta] : beta_schedule) {
      if (iteration < 1) errors.push_back("em.beta_schedule iterations must be >= 1");
      if (!(beta >= 0.0) || !std::isfinite(beta)) errors.push_back("em.beta_schedule betas must be finite and >= 0");
    }
    for (std::size_t k = 1; k < beta_schedule.size(); ++k) {
      if (beta_schedule[k].first <= beta_schedule[k - 1].first) {
        errors.push_back("em.beta_schedule iterations must be strictly increasing");
        break;
      }
    }
    return errors;
  }

  /// Beta in force at a 1-based outer iteration (0 before the first entry).
  double beta_at(int outer_iteration) const {
    double beta = 0.0;
    for (const auto& [iteration, value] : beta_schedule) {
      if (iteration <= outer_iteration) beta = value;
    }
    return beta;
  }
};

inline double step_size(long long t, const EmConfig& config) {
  if (t < 1) throw std::invalid_argument("step_size: t must be >= 1");
  return config.step_scale * std::pow(static_cast<double>(t), -config.step_decay);
}

/// Sigma + beta * Diag(Sigma).
template <typename Scalar>
Mat<Scalar> robustify(const Mat<Scalar>& cov, Scalar beta) {
  if (beta < Scalar(0)) throw std::invalid_argument("robustify: beta must be >= 0");
  Mat<Scalar> out = cov;
  out.diagonal() += beta * cov.diagonal();
  return out;
}

/// Running estimate of the latent Gaussian under stochastic-approximation EM.
///
/// The moving average is kept unmodified in `raw_params()`; `params()` is the
/// robustified, positive-definite version used for imputation. Keeping them
/// apart stops the diagonal inflation from compounding across steps.
template <typename Scalar>
class OnlineEm {
 public:
  struct BufferedRow {
    Vec<Scalar> row;
    ConditionalGaussian<Scalar> conditional;
  };

  OnlineEm(EmConfig config, GaussianParams<Scalar> raw, long long step, Scalar beta,
           std::deque<BufferedRow> buffer = {})
      : config_(std::move(config)), raw_(std::move(raw)), step_(step), beta_(beta), buffer_(std::move(buffer)) {
    refresh();
  }

  /// Sample mean and 1/B covariance of a latent batch; step counter at 0.
  static OnlineEm init_from_batch(const Mat<Scalar>& batch, const EmConfig& config, Scalar beta) {
    if (batch.rows() < 2) throw std::invalid_argument("online_em.init_from_batch: need at least 2 rows");
    GaussianParams<Scalar> raw;
    raw.mean = batch.colwise().mean().transpose();
    const Mat<Scalar> centered = batch.rowwise() - raw.mean.transpose();
    raw.cov = symmetrized(Mat<Scalar>(centered.transpose() * centered / Scalar(batch.rows())));
    return OnlineEm(config, std::move(raw), 0, beta);
  }

  const GaussianParams<Scalar>& params() const { return effective_; }
  const GaussianParams<Scalar>& raw_params() const { return raw_; }
  const GaussianParams<Scalar>& last_local() const { return last_local_; }
  const EmConfig& config() const { return config_; }
  const std::deque<BufferedRow>& buffer() const { return buffer_; }
  long long step() const { return step_; }
  Scalar beta() const { return beta_; }

  void set_beta(Scalar beta) {
    beta_ = beta;
    refresh();
  }

  /// One online EM step with the scheduled rho_{t+1}. Returns the batch with
  /// missing latent coordinates replaced by conditional means.
  Mat<Scalar> update(const Mat<Scalar>& batch, const MaskMatrix& masks) {
    return update_with_rate(batch, masks, Scalar(step_size(step_ + 1, config_)));
  }

  Mat<Scalar> update_with_rate(const Mat<Scalar>& batch, const MaskMatrix& masks, Scalar rho) {
    if (batch.rows() == 0) throw std::invalid_argument("online_em.update: empty batch");
    auto es = e_step(batch, masks, effective_);

    const Index B = batch.rows();
    const auto cap = static_cast<std::size_t>(config_.superbatch_max);
    const std::size_t extra = cap > static_cast<std::size_t>(B) ? std::min(buffer_.size(), cap - static_cast<std::size_t>(B)) : 0;

    Mat<Scalar> stacked(B + static_cast<Index>(extra), batch.cols());
    std::vector<const ConditionalGaussian<Scalar>*> conds;
    conds.reserve(static_cast<std::size_t>(stacked.rows()));
    stacked.topRows(B) = es.imputed;
    for (const auto& c : es.conditionals) conds.push_back(&c);
    for (std::size_t k = 0; k < extra; ++k) {
      stacked.row(B + static_cast<Index>(k)) = buffer_[k].row.transpose();
      conds.push_back(&buffer_[k].conditional);
    }
    last_local_ = moments_from_imputed(stacked, conds);

    ++step_;
    raw_.mean = rho * last_local_.mean + (Scalar(1) - rho) * raw_.mean;
    raw_.cov = symmetrized(Mat<Scalar>(rho * last_local_.cov + (Scalar(1) - rho) * raw_.cov));
    refresh();

    if (cap > 0) {
      for (Index i = 0; i < B; ++i) {
        buffer_.push_front({es.imputed.row(i).transpose(), std::move(es.conditionals[static_cast<std::size_t>(i)])});
      }
      while (buffer_.size() > cap) buffer_.pop_back();
    }
    return std::move(es.imputed);
  }

 private:
  void refresh() {
    effective_.mean = raw_.mean;
    effective_.cov = make_positive_definite<Scalar>(robustify(raw_.cov, beta_), "online_em.update");
  }

  EmConfig config_;
  GaussianParams<Scalar> raw_;
  GaussianParams<Scalar> effective_;
  GaussianParams<Scalar> last_local_;
  long long step_ = 0;
  Scalar beta_ = 0;
  std::deque<BufferedRow> buffer_;
};

}  // namespace emflow
