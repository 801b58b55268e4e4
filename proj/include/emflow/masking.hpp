#pragma once

#include <cstdint>

#include "emflow/types.hpp"

namespace emflow {

/// Independent stream for one row, so a row's mask does not depend on which
/// other rows are present.
std::uint64_t row_seed(std::uint64_t seed, Index row);

/// Each cell missing independently with probability `rate` in [0, 1).
MaskMatrix mcar_mask(Index n, Index p, double rate, std::uint64_t seed);

/// Number of always-observed leading features under MAR: floor(0.7 p).
Index mar_retained_features(Index p);

/// MAR: the first floor(0.7 p) features stay observed; each remaining cell of
/// row i is missing with probability sigmoid(sum of the retained features of
/// row i). Expects data scaled to [0, 1].
MaskMatrix mar_mask(const MatrixXd& data, std::uint64_t seed);

double missing_fraction(const MaskMatrix& mask);

}  // namespace emflow
