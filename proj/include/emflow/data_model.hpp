#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "emflow/types.hpp"

namespace emflow {

/// n x p table of finite values. Missing cells are tracked in a separate
/// MaskMatrix; their stored value is arbitrary.
struct DataMatrix {
  MatrixXd values;
  std::vector<std::string> feature_names;

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }

  /// Throws std::invalid_argument unless n >= 1, p >= 2, all finite, and
  /// feature_names is empty or has p entries.
  void validate() const;
};

void check_mask(const MaskMatrix& mask, Index rows, Index cols);

/// Per-feature min/max over observed entries. Features with min == max are
/// constant and map to 0.5.
struct FeatureScaler {
  VectorXd min;
  VectorXd max;

  bool is_constant(Index j) const { return !(min(j) < max(j)); }
  std::vector<Index> constant_features() const;
};

/// Throws if a feature has no observed entries, naming it.
FeatureScaler fit_scaler(const MatrixXd& data, const MaskMatrix& mask,
                         const std::vector<std::string>& feature_names = {});
MatrixXd apply_scaler(const MatrixXd& data, const FeatureScaler& scaler);
MatrixXd invert_scaler(const MatrixXd& data, const FeatureScaler& scaler);

/// A completed matrix: cells with mask 0 hold the source observations.
struct ImputedDataset {
  MatrixXd values;
  MaskMatrix mask;
};

enum class InitialStrategy { RandomObserved, Median, NearestNeighborGrid };

std::string to_string(InitialStrategy strategy);
InitialStrategy parse_initial_strategy(const std::string& name);

/// Image-like rows: p = height * width, raster order.
struct GridShape {
  Index height = 0;
  Index width = 0;
};

/// Naive fill of masked cells. Deterministic in (data, mask, strategy, seed).
///   RandomObserved: uniform draw from the feature's observed values.
///   Median: the feature's observed median.
///   NearestNeighborGrid: raster scan; each missing pixel takes a uniformly
///   chosen 4-neighbour that is observed or already filled, falling back to a
///   random observed value of the same feature. Requires `grid`.
ImputedDataset initial_impute(const MatrixXd& data, const MaskMatrix& mask, InitialStrategy strategy,
                              std::uint64_t seed, std::optional<GridShape> grid = std::nullopt);

/// As initial_impute, but column statistics (observed pools, medians) come
/// from a separate donor table, e.g. a training fold.
ImputedDataset initial_impute_with_donors(const MatrixXd& data, const MaskMatrix& mask, const MatrixXd& donors,
                                          const MaskMatrix& donor_mask, InitialStrategy strategy, std::uint64_t seed,
                                          std::optional<GridShape> grid = std::nullopt);

}  // namespace emflow
