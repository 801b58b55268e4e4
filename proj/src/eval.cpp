#include "emflow/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "emflow/baseline_em.hpp"
#include "emflow/masking.hpp"

namespace emflow {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

MatrixXd rows_of(const MatrixXd& m, const IndexList& rows) { return m(rows, Eigen::all); }
MaskMatrix rows_of(const MaskMatrix& m, const IndexList& rows) { return m(rows, Eigen::all); }

// Fills masked cells of `data` column-wise with `fill`.
MatrixXd fill_columns(const MatrixXd& data, const MaskMatrix& mask, const VectorXd& fill) {
  MatrixXd out = data;
  for (Index j = 0; j < data.cols(); ++j) {
    for (Index i = 0; i < data.rows(); ++i) {
      if (mask(i, j)) out(i, j) = fill(j);
    }
  }
  return out;
}

VectorXd observed_means(const MatrixXd& data, const MaskMatrix& mask) {
  VectorXd out(data.cols());
  for (Index j = 0; j < data.cols(); ++j) {
    double sum = 0.0;
    Index count = 0;
    for (Index i = 0; i < data.rows(); ++i) {
      if (!mask(i, j)) {
        sum += data(i, j);
        ++count;
      }
    }
    out(j) = sum / static_cast<double>(count);
  }
  return out;
}

VectorXd observed_medians(const MatrixXd& data, const MaskMatrix& mask) {
  VectorXd out(data.cols());
  for (Index j = 0; j < data.cols(); ++j) {
    std::vector<double> v;
    for (Index i = 0; i < data.rows(); ++i) {
      if (!mask(i, j)) v.push_back(data(i, j));
    }
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    out(j) = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  }
  return out;
}

MethodSummary summarize(const std::string& method, std::vector<double> per_fold) {
  MethodSummary s;
  s.method = method;
  s.per_fold = std::move(per_fold);
  std::vector<double> finite;
  for (double v : s.per_fold) {
    if (std::isfinite(v)) finite.push_back(v);
  }
  if (finite.empty()) {
    s.mean = s.sd = kNaN;
    return s;
  }
  s.mean = std::accumulate(finite.begin(), finite.end(), 0.0) / static_cast<double>(finite.size());
  double ss = 0.0;
  for (double v : finite) ss += (v - s.mean) * (v - s.mean);
  s.sd = finite.size() > 1 ? std::sqrt(ss / static_cast<double>(finite.size() - 1)) : 0.0;
  return s;
}

std::string fixed(double v, int decimals) {
  if (!std::isfinite(v)) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(decimals) << v;
  return os.str();
}

Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

}  // namespace

std::string to_string(Mechanism m) { return m == Mechanism::Mcar ? "mcar" : "mar"; }

Mechanism parse_mechanism(const std::string& name) {
  if (name == "mcar") return Mechanism::Mcar;
  if (name == "mar") return Mechanism::Mar;
  throw std::invalid_argument("unknown mechanism '" + name + "' (expected mcar or mar)");
}

MaskMatrix simulate_mask(const MatrixXd& data, Mechanism mechanism, double rate, std::uint64_t seed) {
  if (mechanism == Mechanism::Mcar) return mcar_mask(data.rows(), data.cols(), rate, seed);
  const MaskMatrix none = MaskMatrix::Zero(data.rows(), data.cols());
  return mar_mask(apply_scaler(data, fit_scaler(data, none)), seed);
}

std::vector<int> kfold_assign(Index n, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold_assign: k must be >= 2");
  if (n < k) throw std::invalid_argument("kfold_assign: fewer rows than folds");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold(static_cast<std::size_t>(n));
  for (Index pos = 0; pos < n; ++pos) fold[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])] = static_cast<int>(pos % k);
  return fold;
}

BenchmarkReport kfold_benchmark(const MatrixXd& data, const BenchmarkConfig& config) {
  if (!data.allFinite()) throw std::invalid_argument("benchmark: data must be complete and finite");
  if (data.cols() < 2) throw std::invalid_argument("benchmark: need at least two features");
  const auto assignment = kfold_assign(data.rows(), config.folds, config.seed);

  BenchmarkReport report;
  report.config = config;
  report.rows = data.rows();
  report.cols = data.cols();

  const MaskMatrix mask = simulate_mask(data, config.mechanism, config.rate, config.seed);
  report.missing_fraction = missing_fraction(mask);

  Index smallest_train = data.rows();
  for (int f = 0; f < config.folds; ++f) {
    smallest_train = std::min<Index>(smallest_train, std::count_if(assignment.begin(), assignment.end(),
                                                                   [f](int a) { return a != f; }));
  }
  report.resolved_train = config.train;
  report.resolved_train.batch_size = std::min(config.train.batch_size, smallest_train);

  std::vector<std::vector<double>> per_method(benchmark_methods().size());
  for (int f = 0; f < config.folds; ++f) {
    IndexList train_rows, test_rows;
    for (Index i = 0; i < data.rows(); ++i) (assignment[static_cast<std::size_t>(i)] == f ? test_rows : train_rows).push_back(i);

    const MaskMatrix train_mask = rows_of(mask, train_rows);
    const MaskMatrix test_mask = rows_of(mask, test_rows);
    if ((test_mask.array() == 0).all()) {
      throw std::invalid_argument("benchmark: fold " + std::to_string(f + 1) + " has no missing test cells");
    }
    const FeatureScaler scaler = fit_scaler(rows_of(data, train_rows), train_mask);
    const MatrixXd train_truth = apply_scaler(rows_of(data, train_rows), scaler);
    const MatrixXd test_truth = apply_scaler(rows_of(data, test_rows), scaler);
    // Hide the masked cells from every method.
    const MatrixXd train_in = fill_columns(train_truth, train_mask, VectorXd::Zero(data.cols()));
    const MatrixXd test_in = fill_columns(test_truth, test_mask, VectorXd::Zero(data.cols()));

    FoldResult fr;
    fr.fold = f + 1;
    fr.train_rows = static_cast<Index>(train_rows.size());
    fr.test_rows = static_cast<Index>(test_rows.size());
    fr.test_missing_fraction = missing_fraction(test_mask);
    fr.rmse.assign(benchmark_methods().size(), kNaN);

    TrainConfig train_cfg = report.resolved_train;
    train_cfg.seed = row_seed(config.train.seed, f);
    Engine engine(train_cfg, train_in, train_mask);
    engine.set_holdout(test_in, test_mask);
    engine.set_holdout_truth(test_truth);
    const ImputationRun run = engine.run();
    fr.rmse[0] = rmse_missing(*run.holdout_imputed, test_truth, test_mask);
    fr.trace = run.trace;

    fr.rmse[1] = rmse_missing(fill_columns(test_in, test_mask, observed_means(train_in, train_mask)), test_truth, test_mask);
    fr.rmse[2] = rmse_missing(fill_columns(test_in, test_mask, observed_medians(train_in, train_mask)), test_truth, test_mask);

    if (config.baseline_em) {
      const auto fit = batch_em_fit<double>(train_in, train_mask, default_em_init<double>(train_in, train_mask),
                                            config.em_max_iter);
      fr.rmse[3] = rmse_missing(batch_em_impute<double>(test_in, test_mask, fit.params), test_truth, test_mask);
    }
    for (std::size_t m = 0; m < fr.rmse.size(); ++m) per_method[m].push_back(fr.rmse[m]);
    report.folds.push_back(std::move(fr));
  }
  for (std::size_t m = 0; m < per_method.size(); ++m) {
    report.summary.push_back(summarize(benchmark_methods()[m], per_method[m]));
  }
  return report;
}

std::string format_mean_sd(double mean, double sd, int decimals) {
  if (!std::isfinite(mean)) return "-";
  return fixed(mean, decimals) + "±" + fixed(sd, decimals);
}

Json report_to_json(const BenchmarkReport& r) {
  Json folds = Json::array();
  for (const auto& f : r.folds) {
    Json rmse = Json::object();
    for (std::size_t m = 0; m < f.rmse.size(); ++m) rmse[benchmark_methods()[m]] = number_or_null(f.rmse[m]);
    Json trace = Json::array();
    for (const auto& t : f.trace) trace.push_back(trace_to_json(t));
    folds.push_back({{"fold", f.fold},
                     {"train_rows", f.train_rows},
                     {"test_rows", f.test_rows},
                     {"test_missing_fraction", f.test_missing_fraction},
                     {"rmse", rmse},
                     {"trace", trace}});
  }
  Json summary = Json::array();
  for (const auto& s : r.summary) {
    summary.push_back({{"method", s.method},
                       {"mean", number_or_null(s.mean)},
                       {"sd", number_or_null(s.sd)},
                       {"formatted", format_mean_sd(s.mean, s.sd)}});
  }
  return {{"benchmark",
           {{"mechanism", to_string(r.config.mechanism)},
            {"rate", r.config.mechanism == Mechanism::Mcar ? Json(r.config.rate) : Json(nullptr)},
            {"folds", r.config.folds},
            {"seed", r.config.seed},
            {"baseline_em", r.config.baseline_em},
            {"em_max_iter", r.config.em_max_iter}}},
          {"config", config_to_json(r.resolved_train)},
          {"rows", r.rows},
          {"cols", r.cols},
          {"missing_fraction", r.missing_fraction},
          {"summary", summary},
          {"folds", folds}};
}

std::string report_to_text(const BenchmarkReport& r) {
  std::vector<std::vector<std::string>> table;
  std::vector<std::string> header{"method", "rmse"};
  for (const auto& f : r.folds) header.push_back("fold " + std::to_string(f.fold));
  table.push_back(header);
  for (const auto& s : r.summary) {
    std::vector<std::string> row{s.method, format_mean_sd(s.mean, s.sd)};
    for (double v : s.per_fold) row.push_back(fixed(v, 4));
    table.push_back(row);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : table) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      // "±" is two bytes but one column wide.
      const std::size_t len = row[c].size() - (row[c].find("±") != std::string::npos ? 1 : 0);
      width[c] = std::max(width[c], len);
    }
  }
  std::ostringstream os;
  os << "mechanism " << to_string(r.config.mechanism);
  if (r.config.mechanism == Mechanism::Mcar) os << " rate " << r.config.rate;
  os << ", " << r.rows << " rows x " << r.cols << " features, missing fraction " << fixed(r.missing_fraction, 4)
     << ", " << r.config.folds << " folds\n";
  for (const auto& row : table) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      const std::size_t len = row[c].size() - (row[c].find("±") != std::string::npos ? 1 : 0);
      os << row[c];
      if (c + 1 < row.size()) os << std::string(width[c] - len + 2, ' ');
    }
    os << '\n';
  }
  return os.str();
}

void write_fold_csv(const std::filesystem::path& path, const BenchmarkReport& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << "fold,method,rmse,train_rows,test_rows,test_missing_fraction\n";
  out << std::setprecision(17);
  for (const auto& f : r.folds) {
    for (std::size_t m = 0; m < f.rmse.size(); ++m) {
      out << f.fold << ',' << benchmark_methods()[m] << ',';
      if (std::isfinite(f.rmse[m])) out << f.rmse[m];
      out << ',' << f.train_rows << ',' << f.test_rows << ',' << f.test_missing_fraction << '\n';
    }
  }
}

}  // namespace emflow
