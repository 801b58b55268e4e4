#include "emflow/masking.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace emflow {

std::uint64_t row_seed(std::uint64_t seed, Index row) {
  // splitmix64 finalizer over (seed, row)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(row) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

MaskMatrix mcar_mask(Index n, Index p, double rate, std::uint64_t seed) {
  if (n < 1 || p < 1) throw std::invalid_argument("mcar_mask: n and p must be positive");
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("mcar_mask: rate must be in [0, 1)");
  MaskMatrix mask = MaskMatrix::Zero(n, p);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (Index i = 0; i < n; ++i) {
    std::mt19937_64 rng(row_seed(seed, i));
    for (Index j = 0; j < p; ++j) mask(i, j) = unif(rng) < rate ? 1 : 0;
  }
  return mask;
}

Index mar_retained_features(Index p) { return static_cast<Index>(std::floor(0.7 * static_cast<double>(p))); }

MaskMatrix mar_mask(const MatrixXd& data, std::uint64_t seed) {
  const Index p = data.cols();
  if (p < 2) throw std::invalid_argument("mar_mask: need at least two features");
  if (!data.allFinite()) throw std::invalid_argument("mar_mask: data must be complete and finite");
  const Index retained = mar_retained_features(p);
  MaskMatrix mask = MaskMatrix::Zero(data.rows(), p);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (Index i = 0; i < data.rows(); ++i) {
    const double drive = data.row(i).head(retained).sum();
    const double prob = 1.0 / (1.0 + std::exp(-drive));
    std::mt19937_64 rng(row_seed(seed, i));
    for (Index j = retained; j < p; ++j) mask(i, j) = unif(rng) < prob ? 1 : 0;
  }
  return mask;
}

double missing_fraction(const MaskMatrix& mask) {
  if (mask.size() == 0) return 0.0;
  return static_cast<double>(mask.cast<long long>().sum()) / static_cast<double>(mask.size());
}

}  // namespace emflow
