#pragma once

#include <cmath>
#include <stdexcept>

#include "emflow/types.hpp"

namespace emflow {

/// Root mean squared error over cells with mask 1.
inline double rmse_missing(const MatrixXd& imputed, const MatrixXd& truth, const MaskMatrix& mask) {
  if (imputed.rows() != truth.rows() || imputed.cols() != truth.cols() || mask.rows() != truth.rows() ||
      mask.cols() != truth.cols()) {
    throw std::invalid_argument("rmse_missing: shape mismatch");
  }
  double sum = 0.0;
  long long count = 0;
  for (Index j = 0; j < truth.cols(); ++j) {
    for (Index i = 0; i < truth.rows(); ++i) {
      if (!mask(i, j)) continue;
      const double d = imputed(i, j) - truth(i, j);
      sum += d * d;
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("rmse_missing: no missing cells");
  return std::sqrt(sum / static_cast<double>(count));
}

}  // namespace emflow
