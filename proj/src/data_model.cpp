#include "emflow/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace emflow {

void DataMatrix::validate() const {
  if (values.rows() < 1) throw std::invalid_argument("data: need at least one row");
  if (values.cols() < 2) throw std::invalid_argument("data: need at least two features");
  if (!values.allFinite()) throw std::invalid_argument("data: entries must be finite");
  if (!feature_names.empty() && static_cast<Index>(feature_names.size()) != values.cols()) {
    throw std::invalid_argument("data: feature_names must have one entry per column");
  }
}

void check_mask(const MaskMatrix& mask, Index rows, Index cols) {
  if (mask.rows() != rows || mask.cols() != cols) {
    throw std::invalid_argument("mask shape " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                                " does not match data " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  if ((mask.array() > 1).any()) throw std::invalid_argument("mask entries must be 0 or 1");
}

std::vector<Index> FeatureScaler::constant_features() const {
  std::vector<Index> out;
  for (Index j = 0; j < min.size(); ++j) {
    if (is_constant(j)) out.push_back(j);
  }
  return out;
}

FeatureScaler fit_scaler(const MatrixXd& data, const MaskMatrix& mask, const std::vector<std::string>& feature_names) {
  check_mask(mask, data.rows(), data.cols());
  FeatureScaler scaler{VectorXd(data.cols()), VectorXd(data.cols())};
  for (Index j = 0; j < data.cols(); ++j) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < data.rows(); ++i) {
      if (mask(i, j)) continue;
      lo = std::min(lo, data(i, j));
      hi = std::max(hi, data(i, j));
    }
    if (lo > hi) {
      const std::string name = static_cast<Index>(feature_names.size()) > j ? feature_names[static_cast<std::size_t>(j)]
                                                                             : "#" + std::to_string(j);
      throw std::invalid_argument("feature " + name + " has no observed entries");
    }
    scaler.min(j) = lo;
    scaler.max(j) = hi;
  }
  return scaler;
}

MatrixXd apply_scaler(const MatrixXd& data, const FeatureScaler& scaler) {
  if (data.cols() != scaler.min.size()) throw std::invalid_argument("apply_scaler: dimension mismatch");
  MatrixXd out(data.rows(), data.cols());
  for (Index j = 0; j < data.cols(); ++j) {
    if (scaler.is_constant(j)) {
      out.col(j).setConstant(0.5);
    } else {
      out.col(j) = (data.col(j).array() - scaler.min(j)) / (scaler.max(j) - scaler.min(j));
    }
  }
  return out;
}

MatrixXd invert_scaler(const MatrixXd& data, const FeatureScaler& scaler) {
  if (data.cols() != scaler.min.size()) throw std::invalid_argument("invert_scaler: dimension mismatch");
  MatrixXd out(data.rows(), data.cols());
  for (Index j = 0; j < data.cols(); ++j) {
    if (scaler.is_constant(j)) {
      out.col(j).setConstant(scaler.min(j));
    } else {
      out.col(j) = data.col(j).array() * (scaler.max(j) - scaler.min(j)) + scaler.min(j);
    }
  }
  return out;
}

std::string to_string(InitialStrategy strategy) {
  switch (strategy) {
    case InitialStrategy::RandomObserved: return "random-observed";
    case InitialStrategy::Median: return "median";
    case InitialStrategy::NearestNeighborGrid: return "nearest-neighbor-grid";
  }
  return "unknown";
}

InitialStrategy parse_initial_strategy(const std::string& name) {
  if (name == "random-observed") return InitialStrategy::RandomObserved;
  if (name == "median") return InitialStrategy::Median;
  if (name == "nearest-neighbor-grid") return InitialStrategy::NearestNeighborGrid;
  throw std::invalid_argument("unknown initial imputation strategy '" + name + "'");
}

namespace {

std::vector<std::vector<double>> observed_pools(const MatrixXd& donors, const MaskMatrix& donor_mask) {
  std::vector<std::vector<double>> pools(static_cast<std::size_t>(donors.cols()));
  for (Index j = 0; j < donors.cols(); ++j) {
    auto& pool = pools[static_cast<std::size_t>(j)];
    for (Index i = 0; i < donors.rows(); ++i) {
      if (!donor_mask(i, j)) pool.push_back(donors(i, j));
    }
    if (pool.empty()) throw std::invalid_argument("feature #" + std::to_string(j) + " has no observed entries");
  }
  return pools;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

ImputedDataset initial_impute_with_donors(const MatrixXd& data, const MaskMatrix& mask, const MatrixXd& donors,
                                          const MaskMatrix& donor_mask, InitialStrategy strategy, std::uint64_t seed,
                                          std::optional<GridShape> grid) {
  check_mask(mask, data.rows(), data.cols());
  check_mask(donor_mask, donors.rows(), donors.cols());
  if (donors.cols() != data.cols()) throw std::invalid_argument("initial_impute: donor width mismatch");
  if (strategy == InitialStrategy::NearestNeighborGrid &&
      (!grid || grid->height < 1 || grid->width < 1 || grid->height * grid->width != data.cols())) {
    throw std::invalid_argument("nearest-neighbor-grid needs a grid shape with height * width == p");
  }
  const auto pools = observed_pools(donors, donor_mask);
  ImputedDataset out{data, mask};
  std::mt19937_64 rng(seed);
  auto random_observed = [&](Index j) {
    const auto& pool = pools[static_cast<std::size_t>(j)];
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    return pool[pick(rng)];
  };

  switch (strategy) {
    case InitialStrategy::RandomObserved:
      for (Index i = 0; i < data.rows(); ++i) {
        for (Index j = 0; j < data.cols(); ++j) {
          if (mask(i, j)) out.values(i, j) = random_observed(j);
        }
      }
      break;
    case InitialStrategy::Median: {
      VectorXd medians(data.cols());
      for (Index j = 0; j < data.cols(); ++j) medians(j) = median_of(pools[static_cast<std::size_t>(j)]);
      for (Index i = 0; i < data.rows(); ++i) {
        for (Index j = 0; j < data.cols(); ++j) {
          if (mask(i, j)) out.values(i, j) = medians(j);
        }
      }
      break;
    }
    case InitialStrategy::NearestNeighborGrid: {
      const Index h = grid->height;
      const Index w = grid->width;
      std::vector<double> candidates;
      std::vector<std::uint8_t> filled(static_cast<std::size_t>(data.cols()));
      for (Index i = 0; i < data.rows(); ++i) {
        for (Index j = 0; j < data.cols(); ++j) filled[static_cast<std::size_t>(j)] = mask(i, j) ? 0 : 1;
        for (Index r = 0; r < h; ++r) {
          for (Index c = 0; c < w; ++c) {
            const Index j = r * w + c;
            if (!mask(i, j)) continue;
            candidates.clear();
            const Index dr[] = {-1, 1, 0, 0};
            const Index dc[] = {0, 0, -1, 1};
            for (int k = 0; k < 4; ++k) {
              const Index rr = r + dr[k];
              const Index cc = c + dc[k];
              if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
              const Index jj = rr * w + cc;
              if (filled[static_cast<std::size_t>(jj)]) candidates.push_back(out.values(i, jj));
            }
            if (candidates.empty()) {
              out.values(i, j) = random_observed(j);
            } else {
              std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
              out.values(i, j) = candidates[pick(rng)];
            }
            filled[static_cast<std::size_t>(j)] = 1;
          }
        }
      }
      break;
    }
  }
  return out;
}

ImputedDataset initial_impute(const MatrixXd& data, const MaskMatrix& mask, InitialStrategy strategy,
                              std::uint64_t seed, std::optional<GridShape> grid) {
  return initial_impute_with_donors(data, mask, data, mask, strategy, seed, grid);
}

}  // namespace emflow
