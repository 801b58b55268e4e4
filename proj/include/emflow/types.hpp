#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace emflow {

using Index = Eigen::Index;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using VectorXd = Vec<double>;
using MatrixXd = Mat<double>;

/// Binary missingness pattern, n x p. 1 = missing, 0 = observed.
using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;
using MaskRow = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, 1>;

using IndexList = std::vector<Index>;

/// Raised when a numerical routine cannot produce a valid result
/// (non positive-definite covariance, non-finite loss or gradient).
/// `where` names the module and context, e.g. "gaussian.conditional".
class NumericalError : public std::runtime_error {
 public:
  NumericalError(std::string where, const std::string& what)
      : std::runtime_error(where + ": " + what), where_(std::move(where)) {}

  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

inline void split_mask_row(const Eigen::Ref<const MaskRow>& mask_row,
                           IndexList& observed, IndexList& missing) {
  observed.clear();
  missing.clear();
  for (Index j = 0; j < mask_row.size(); ++j) {
    (mask_row(j) ? missing : observed).push_back(j);
  }
}

}  // namespace emflow
