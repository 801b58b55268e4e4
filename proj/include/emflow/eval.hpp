#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "emflow/checkpoint.hpp"
#include "emflow/engine.hpp"
#include "emflow/metrics.hpp"

namespace emflow {

enum class Mechanism { Mcar, Mar };

std::string to_string(Mechanism m);
Mechanism parse_mechanism(const std::string& name);

/// Mask for a raw (unscaled) complete table. MAR is evaluated on the table
/// min-max scaled over all rows.
MaskMatrix simulate_mask(const MatrixXd& data, Mechanism mechanism, double rate, std::uint64_t seed);

/// Fold id in [0, k) for each of n rows. Fold sizes differ by at most one and
/// depend only on (n, k, seed).
std::vector<int> kfold_assign(Index n, int k, std::uint64_t seed);

struct BenchmarkConfig {
  Mechanism mechanism = Mechanism::Mcar;
  double rate = 0.2;  // MCAR only
  int folds = 5;
  std::uint64_t seed = 0;
  TrainConfig train;
  bool baseline_em = true;
  int em_max_iter = 500;
};

inline const std::vector<std::string>& benchmark_methods() {
  static const std::vector<std::string> methods{"emflow", "mean", "median", "baseline-em"};
  return methods;
}

struct FoldResult {
  int fold = 0;
  Index train_rows = 0;
  Index test_rows = 0;
  double test_missing_fraction = 0.0;
  /// Test RMSE per method, ordered as benchmark_methods(); NaN when skipped.
  std::vector<double> rmse;
  std::vector<TraceRecord> trace;
};

struct MethodSummary {
  std::string method;
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation across folds
  std::vector<double> per_fold;
};

struct BenchmarkReport {
  BenchmarkConfig config;
  TrainConfig resolved_train;  // batch size clamped to the smallest train fold
  Index rows = 0;
  Index cols = 0;
  double missing_fraction = 0.0;
  std::vector<FoldResult> folds;
  std::vector<MethodSummary> summary;
};

/// k-fold protocol: one mask for the whole table; per fold, a scaler fit on
/// the train rows' observed entries, EMFlow trained on the train rows, the
/// test rows passed through re-imputation only, and RMSE on the test rows'
/// missing cells in scaled space. Column mean, column median and batch EM
/// (all fit on the train rows) are reported alongside.
BenchmarkReport kfold_benchmark(const MatrixXd& data, const BenchmarkConfig& config);

/// "0.0757±0.0013"
std::string format_mean_sd(double mean, double sd, int decimals = 4);

Json report_to_json(const BenchmarkReport& report);
std::string report_to_text(const BenchmarkReport& report);
void write_fold_csv(const std::filesystem::path& path, const BenchmarkReport& report);

}  // namespace emflow
