#include "emflow/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "emflow/baseline_em.hpp"
#include "emflow/checkpoint.hpp"
#include "emflow/csv.hpp"
#include "emflow/engine.hpp"
#include "emflow/eval.hpp"
#include "emflow/masking.hpp"
#include "emflow/parallel.hpp"

namespace emflow::cli {
namespace {

namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kNumerical = 3;

const char* const kMarFormula =
    "first floor(0.7p) features observed; each other cell missing with probability "
    "sigmoid(sum of the row's observed features) on min-max scaled data";

struct InputOptions {
  bool header = false;
  std::string na = "NA";

  CsvOptions csv() const { return {header, na, ','}; }
};

void add_input_options(CLI::App* app, InputOptions& in) {
  app->add_flag("--header", in.header, "CSV files have a header row");
  app->add_option("--na", in.na, "Cell text treated as missing")->capture_default_str();
}

// Training flags; unset flags leave the config file or defaults in force.
struct TrainFlags {
  std::optional<std::string> config_file;
  std::optional<int> outer_iterations;
  std::optional<int> epochs;
  std::optional<long long> batch_size;
  std::optional<double> learning_rate;
  std::optional<double> alpha;
  std::optional<long long> flow_depth;
  std::optional<long long> hidden_width;
  std::optional<double> scale_clamp;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> initial;
  std::optional<long long> grid_height;
  std::optional<long long> grid_width;
  std::optional<bool> reinit_flow;
  bool freeze_flow = false;
  std::optional<double> em_step_scale;
  std::optional<double> em_step_decay;
  std::optional<std::string> beta_schedule;
  std::optional<long long> superbatch;
  std::optional<bool> em_reinit;

  CLI::App* app = nullptr;
};

void add_train_flags(CLI::App* app, TrainFlags& f) {
  f.app = app;
  app->add_option("--config", f.config_file, "JSON config file (flags take precedence)");
  app->add_option("--outer-iterations", f.outer_iterations, "Outer iterations [5]");
  app->add_option("--epochs", f.epochs, "Epochs per training phase [10]");
  app->add_option("--batch-size", f.batch_size, "Mini-batch size [256]");
  app->add_option("--learning-rate", f.learning_rate, "Adam learning rate [1e-4]");
  app->add_option("--alpha", f.alpha, "Reconstruction weight [1e6]");
  app->add_option("--flow-depth", f.flow_depth, "Coupling layers [6]");
  app->add_option("--hidden-width", f.hidden_width, "Hidden units per net, 0 for max(32, 4p) [0]");
  app->add_option("--scale-clamp", f.scale_clamp, "Soft bound on coupling log-scales [5]");
  app->add_option("--seed", f.seed, "Random seed [0]");
  app->add_option("--initial", f.initial, "Initial fill: random-observed, median, nearest-neighbor-grid");
  app->add_option("--grid-height", f.grid_height, "Image height for nearest-neighbor-grid");
  app->add_option("--grid-width", f.grid_width, "Image width for nearest-neighbor-grid");
  app->add_option("--reinit-flow", f.reinit_flow, "Fresh flow every outer iteration (true/false) [true]");
  app->add_flag("--freeze-flow", f.freeze_flow, "Keep the flow at the identity (no gradient steps)");
  app->add_option("--em-step-scale", f.em_step_scale, "Step size constant C in C t^-gamma [0.99]");
  app->add_option("--em-step-decay", f.em_step_decay, "Step size exponent gamma [0.8]");
  app->add_option("--beta-schedule", f.beta_schedule, "Covariance inflation by iteration, e.g. 1:0.01,3:0.001,5:0");
  app->add_option("--superbatch", f.superbatch, "Buffered rows for covariance estimates, 0 to disable [0]");
  app->add_option("--em-reinit", f.em_reinit, "Re-estimate the base every outer iteration (true/false) [true]");
}

bool any_train_flag_set(const TrainFlags& f) {
  static const char* names[] = {"--config",      "--epochs",       "--batch-size",    "--learning-rate",
                                "--alpha",       "--flow-depth",   "--hidden-width",  "--scale-clamp",
                                "--seed",        "--initial",      "--grid-height",   "--grid-width",
                                "--reinit-flow", "--freeze-flow",  "--em-step-scale", "--em-step-decay",
                                "--beta-schedule", "--superbatch", "--em-reinit"};
  for (const char* n : names) {
    if (f.app->count(n) > 0) return true;
  }
  return false;
}

Json flag_overrides(const TrainFlags& f, int threads, std::vector<std::string>& errors) {
  Json j = Json::object();
  Json em = Json::object();
  if (f.outer_iterations) j["outer_iterations"] = *f.outer_iterations;
  if (f.epochs) j["epochs_per_phase"] = *f.epochs;
  if (f.batch_size) j["batch_size"] = *f.batch_size;
  if (f.learning_rate) j["learning_rate"] = *f.learning_rate;
  if (f.alpha) j["alpha"] = *f.alpha;
  if (f.flow_depth) j["flow_depth"] = *f.flow_depth;
  if (f.hidden_width) j["hidden_width"] = *f.hidden_width;
  if (f.scale_clamp) j["scale_clamp"] = *f.scale_clamp;
  if (f.seed) j["seed"] = *f.seed;
  if (f.initial) j["initial_strategy"] = *f.initial;
  if (f.grid_height || f.grid_width) {
    j["grid"] = {{"height", f.grid_height.value_or(0)}, {"width", f.grid_width.value_or(0)}};
  }
  if (f.reinit_flow) j["reinit_flow"] = *f.reinit_flow;
  if (f.freeze_flow) j["freeze_flow"] = true;
  j["threads"] = threads;
  if (f.em_step_scale) em["step_scale"] = *f.em_step_scale;
  if (f.em_step_decay) em["step_decay"] = *f.em_step_decay;
  if (f.superbatch) em["superbatch_max"] = *f.superbatch;
  if (f.em_reinit) em["reinit_each_iteration"] = *f.em_reinit;
  if (f.beta_schedule) {
    Json schedule = Json::array();
    std::stringstream ss(*f.beta_schedule);
    std::string item;
    bool ok = true;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      try {
        if (colon == std::string::npos) throw std::invalid_argument("missing ':'");
        std::size_t used_it = 0, used_beta = 0;
        const int it = std::stoi(item.substr(0, colon), &used_it);
        const double beta = std::stod(item.substr(colon + 1), &used_beta);
        if (used_it != colon || used_beta != item.size() - colon - 1) throw std::invalid_argument("trailing text");
        schedule.push_back({it, beta});
      } catch (const std::exception&) {
        ok = false;
      }
    }
    if (ok) {
      em["beta_schedule"] = schedule;
    } else {
      errors.push_back("--beta-schedule must look like 1:0.01,3:0.001,5:0");
    }
  }
  if (!em.empty()) j["em"] = em;
  return j;
}

// Defaults, then the config file, then flags. Collects every problem.
TrainConfig resolve_config(const TrainFlags& f, int threads) {
  std::vector<std::string> errors;
  TrainConfig base;
  if (f.config_file) {
    try {
      base = config_from_json(read_json_file(*f.config_file), base);
    } catch (const ConfigError& e) {
      for (const auto& m : e.errors()) errors.push_back(*f.config_file + ": " + m);
    }
  }
  const Json overrides = flag_overrides(f, threads, errors);
  try {
    base = config_from_json(overrides, base);
  } catch (const ConfigError& e) {
    for (const auto& m : e.errors()) {
      if (std::find(errors.begin(), errors.end(), m) == errors.end()) errors.push_back(m);
    }
  }
  if (!errors.empty()) throw ConfigError(errors);
  return base;
}

bool batch_size_given(const TrainFlags& f) {
  if (f.batch_size) return true;
  if (!f.config_file) return false;
  const Json j = read_json_file(*f.config_file);
  return j.is_object() && j.contains("batch_size");
}

fs::path with_suffix(const fs::path& input, const std::string& suffix) {
  fs::path out = input;
  out.replace_extension();
  return out.string() + suffix;
}

std::string fixed(double v, int decimals) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(decimals) << v;
  return os.str();
}

void require_complete(const CsvTable& t, const std::string& path) {
  for (Index i = 0; i < t.missing.rows(); ++i) {
    for (Index j = 0; j < t.missing.cols(); ++j) {
      if (t.missing(i, j)) {
        throw std::invalid_argument(path + ": cell at row " + std::to_string(i + 1) + ", column " +
                                    std::to_string(j + 1) + " is missing; this command needs complete data");
      }
    }
  }
}

// --------------------------------------------------------------------------
// mask

struct MaskArgs {
  std::string input;
  std::string mechanism;
  std::optional<double> rate;
  std::uint64_t seed = 0;
  std::string output;
  InputOptions in;
};

int cmd_mask(const MaskArgs& a, std::ostream& out) {
  const Mechanism mechanism = parse_mechanism(a.mechanism);
  if (mechanism == Mechanism::Mcar && !a.rate) throw std::invalid_argument("--rate is required for mcar");
  if (mechanism == Mechanism::Mar && a.rate) throw std::invalid_argument("--rate does not apply to mar");
  const double rate = a.rate.value_or(0.0);
  if (mechanism == Mechanism::Mcar && !(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("--rate must be in [0, 1)");

  const CsvTable table = read_csv(a.input, a.in.csv());
  require_complete(table, a.input);
  const MaskMatrix mask = simulate_mask(table.data.values, mechanism, rate, a.seed);
  const fs::path out_path = a.output.empty() ? with_suffix(a.input, ".mask.csv") : fs::path(a.output);
  write_mask_csv(out_path, mask, table.data.feature_names);

  const double fraction = missing_fraction(mask);
  Json sidecar = {{"input", a.input},
                  {"mask", out_path.string()},
                  {"mechanism", to_string(mechanism)},
                  {"seed", a.seed},
                  {"rows", mask.rows()},
                  {"cols", mask.cols()},
                  {"missing_fraction", fraction}};
  if (mechanism == Mechanism::Mcar) {
    sidecar["rate"] = rate;
  } else {
    sidecar["formula"] = kMarFormula;
    sidecar["retained_features"] = mar_retained_features(mask.cols());
  }
  write_json_file(out_path.string() + ".json", sidecar);
  out << "wrote " << out_path.string() << " (" << mask.rows() << " x " << mask.cols()
      << "), empirical missing rate " << fixed(fraction, 4) << '\n';
  return kOk;
}

// --------------------------------------------------------------------------
// impute

struct ImputeArgs {
  std::string input;
  std::string mask;
  std::string imputer = "emflow";
  std::string truth;
  std::string output;
  std::string checkpoint;
  std::string trace;
  std::string resume;
  int em_max_iter = 500;
  double em_tol = 1e-8;
  bool quiet = false;
  InputOptions in;
  TrainFlags train;
};

struct Prepared {
  CsvTable table;
  MaskMatrix mask;
  FeatureScaler scaler;
  MatrixXd scaled;
  std::optional<MatrixXd> truth_scaled;
};

Prepared prepare_impute(const ImputeArgs& a) {
  Prepared p;
  p.table = read_csv(a.input, a.in.csv());
  p.table.data.validate();
  if (a.mask.empty()) {
    p.mask = p.table.missing;
  } else {
    p.mask = read_mask_csv(a.mask, a.in.header);
    check_mask(p.mask, p.table.data.rows(), p.table.data.cols());
    for (Index i = 0; i < p.mask.rows(); ++i) {
      for (Index j = 0; j < p.mask.cols(); ++j) {
        if (p.table.missing(i, j) && !p.mask(i, j)) {
          throw std::invalid_argument(a.input + ": cell at row " + std::to_string(i + 1) + ", column " +
                                      std::to_string(j + 1) + " is empty but the mask marks it observed");
        }
      }
    }
  }
  p.scaler = fit_scaler(p.table.data.values, p.mask, p.table.data.feature_names);
  p.scaled = apply_scaler(p.table.data.values, p.scaler);
  for (Index j = 0; j < p.mask.cols(); ++j) {
    for (Index i = 0; i < p.mask.rows(); ++i) {
      if (p.mask(i, j)) p.scaled(i, j) = 0.0;
    }
  }
  if (!a.truth.empty()) {
    const CsvTable truth = read_csv(a.truth, a.in.csv());
    require_complete(truth, a.truth);
    if (truth.data.rows() != p.scaled.rows() || truth.data.cols() != p.scaled.cols()) {
      throw std::invalid_argument(a.truth + ": shape does not match the data");
    }
    p.truth_scaled = apply_scaler(truth.data.values, p.scaler);
  }
  return p;
}

// Original-scale output with observed cells copied verbatim from the input.
MatrixXd to_original_scale(const Prepared& p, const MatrixXd& scaled_imputed) {
  MatrixXd out = invert_scaler(scaled_imputed, p.scaler);
  for (Index j = 0; j < out.cols(); ++j) {
    for (Index i = 0; i < out.rows(); ++i) {
      if (!p.mask(i, j)) out(i, j) = p.table.data.values(i, j);
    }
  }
  return out;
}

void print_record(std::ostream& out, const TraceRecord& r, int total) {
  out << "iteration " << r.iteration << "/" << total << "  beta " << r.beta << "  L1 " << fixed(r.l1, 4) << "  L2 "
      << fixed(r.l2, 4);
  if (r.train_rmse) out << "  rmse " << fixed(*r.train_rmse, 4);
  out << "  " << fixed(r.seconds, 2) << "s\n";
}

int impute_baseline(const ImputeArgs& a, const Prepared& p, std::ostream& out) {
  const auto fit = batch_em_fit<double>(p.scaled, p.mask, default_em_init<double>(p.scaled, p.mask), a.em_max_iter, a.em_tol);
  const MatrixXd imputed = batch_em_impute<double>(p.scaled, p.mask, fit.params);
  const fs::path out_path = a.output.empty() ? with_suffix(a.input, ".imputed.csv") : fs::path(a.output);
  write_csv(out_path, to_original_scale(p, imputed), p.table.data.feature_names);

  if (!a.trace.empty()) {
    std::ofstream trace(a.trace);
    if (!trace) throw std::runtime_error(a.trace + ": cannot open for writing");
    for (std::size_t k = 0; k < fit.log_likelihood.size(); ++k) {
      trace << Json{{"iteration", k}, {"log_likelihood", fit.log_likelihood[k]}}.dump() << '\n';
    }
  }
  if (!a.checkpoint.empty()) {
    write_json_file(a.checkpoint, {{"format", "emflow-baseline-em"},
                                   {"version", kCheckpointVersion},
                                   {"params", gaussian_to_json(fit.params)},
                                   {"iterations", fit.iterations},
                                   {"converged", fit.converged}});
  }
  Json summary = {{"imputer", "baseline-em"},
                  {"input", a.input},
                  {"mask", a.mask.empty() ? Json(nullptr) : Json(a.mask)},
                  {"output", out_path.string()},
                  {"em_max_iter", a.em_max_iter},
                  {"em_tol", a.em_tol},
                  {"iterations", fit.iterations},
                  {"converged", fit.converged}};
  std::optional<double> rmse;
  if (p.truth_scaled && (p.mask.array() != 0).any()) rmse = rmse_missing(imputed, *p.truth_scaled, p.mask);
  summary["rmse"] = rmse ? Json(*rmse) : Json(nullptr);
  write_json_file(out_path.string() + ".json", summary);
  out << "baseline-em: " << fit.iterations << " iterations" << (fit.converged ? " (converged)" : "");
  if (rmse) out << ", rmse " << fixed(*rmse, 4);
  out << "\nwrote " << out_path.string() << '\n';
  return kOk;
}

int cmd_impute(ImputeArgs& a, int threads, std::ostream& out, std::ostream& err) {
  if (a.imputer != "emflow" && a.imputer != "baseline-em") {
    throw std::invalid_argument("--imputer must be emflow or baseline-em");
  }
  const Prepared p = prepare_impute(a);
  if (a.imputer == "baseline-em") {
    if (!a.resume.empty()) throw std::invalid_argument("--resume applies to the emflow imputer only");
    return impute_baseline(a, p, out);
  }

  std::optional<Engine> engine;
  if (!a.resume.empty()) {
    if (any_train_flag_set(a.train)) {
      throw std::invalid_argument("with --resume only --outer-iterations and --threads may be given");
    }
    EngineState state = load_checkpoint(a.resume);
    if (state.mask != p.mask || state.imputed.rows() != p.scaled.rows()) {
      throw std::invalid_argument(a.resume + ": checkpoint does not match the data and mask");
    }
    if (a.train.outer_iterations) state.config.outer_iterations = *a.train.outer_iterations;
    state.config.threads = threads;
    const auto errors = state.config.validate(p.scaled.rows());
    if (!errors.empty()) throw ConfigError(errors);
    engine.emplace(Engine::from_state(std::move(state)));
  } else {
    TrainConfig config = resolve_config(a.train, threads);
    if (config.batch_size > p.scaled.rows() && !batch_size_given(a.train)) {
      config.batch_size = p.scaled.rows();
      err << "note: batch size reduced to the row count (" << config.batch_size << ")\n";
    }
    const auto errors = config.validate(p.scaled.rows());
    if (!errors.empty()) throw ConfigError(errors);
    engine.emplace(config, p.scaled, p.mask);
  }
  if (p.truth_scaled) engine->set_train_truth(*p.truth_scaled);

  const TrainConfig& config = engine->state().config;
  std::ofstream trace;
  if (!a.trace.empty()) {
    trace.open(a.trace);
    if (!trace) throw std::runtime_error(a.trace + ": cannot open for writing");
    for (const auto& r : engine->state().trace) trace << trace_to_json(r).dump() << '\n';
    trace.flush();
  }
  const int total = config.outer_iterations;
  engine->on_iteration([&](const TraceRecord& r) {
    if (trace.is_open()) trace << trace_to_json(r).dump() << std::endl;
    if (!a.quiet) print_record(err, r, total);
    if (!a.checkpoint.empty()) save_checkpoint(a.checkpoint, engine->state());
  });
  const ImputationRun run = engine->run();
  if (!a.checkpoint.empty()) save_checkpoint(a.checkpoint, engine->state());

  const fs::path out_path = a.output.empty() ? with_suffix(a.input, ".imputed.csv") : fs::path(a.output);
  write_csv(out_path, to_original_scale(p, run.imputed.values), p.table.data.feature_names);

  Json trace_json = Json::array();
  for (const auto& r : run.trace) trace_json.push_back(trace_to_json(r));
  Json summary = {{"imputer", "emflow"},
                  {"input", a.input},
                  {"mask", a.mask.empty() ? Json(nullptr) : Json(a.mask)},
                  {"output", out_path.string()},
                  {"resumed_from", a.resume.empty() ? Json(nullptr) : Json(a.resume)},
                  {"config", config_to_json(config)},
                  {"trace", trace_json}};
  write_json_file(out_path.string() + ".json", summary);
  out << "wrote " << out_path.string() << '\n';
  return kOk;
}

// --------------------------------------------------------------------------
// benchmark

struct BenchmarkArgs {
  std::string input;
  std::string mechanism = "mcar";
  double rate = 0.2;
  int folds = 5;
  std::uint64_t seed = 0;
  bool no_baseline_em = false;
  std::string json_out;
  std::string text_out;
  std::string fold_csv;
  InputOptions in;
  TrainFlags train;
};

int cmd_benchmark(const BenchmarkArgs& a, int threads, std::ostream& out) {
  BenchmarkConfig bc;
  bc.mechanism = parse_mechanism(a.mechanism);
  if (bc.mechanism == Mechanism::Mcar && !(a.rate >= 0.0 && a.rate < 1.0)) {
    throw std::invalid_argument("--rate must be in [0, 1)");
  }
  if (a.folds < 2) throw std::invalid_argument("--folds must be >= 2");
  bc.rate = a.rate;
  bc.folds = a.folds;
  bc.seed = a.seed;
  bc.baseline_em = !a.no_baseline_em;
  bc.train = resolve_config(a.train, threads);

  const CsvTable table = read_csv(a.input, a.in.csv());
  require_complete(table, a.input);
  table.data.validate();
  const BenchmarkReport report = kfold_benchmark(table.data.values, bc);

  const std::string text = report_to_text(report);
  out << text;
  const fs::path json_path = a.json_out.empty() ? with_suffix(a.input, ".benchmark.json") : fs::path(a.json_out);
  Json j = report_to_json(report);
  j["input"] = a.input;
  write_json_file(json_path, j);
  if (!a.text_out.empty()) {
    std::ofstream t(a.text_out);
    if (!t) throw std::runtime_error(a.text_out + ": cannot open for writing");
    t << text;
  }
  if (!a.fold_csv.empty()) write_fold_csv(a.fold_csv, report);
  out << "wrote " << json_path.string() << '\n';
  return kOk;
}

// --------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string imputed;
  std::string truth;
  std::string mask;
  bool raw = false;
  bool json = false;
  InputOptions in;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const CsvTable imputed = read_csv(a.imputed, a.in.csv());
  const CsvTable truth = read_csv(a.truth, a.in.csv());
  require_complete(imputed, a.imputed);
  require_complete(truth, a.truth);
  const MaskMatrix mask = read_mask_csv(a.mask, a.in.header);
  check_mask(mask, truth.data.rows(), truth.data.cols());
  if (imputed.data.rows() != truth.data.rows() || imputed.data.cols() != truth.data.cols()) {
    throw std::invalid_argument("eval: imputed and truth shapes differ");
  }
  double rmse;
  if (a.raw) {
    rmse = rmse_missing(imputed.data.values, truth.data.values, mask);
  } else {
    const FeatureScaler scaler = fit_scaler(truth.data.values, mask, truth.data.feature_names);
    rmse = rmse_missing(apply_scaler(imputed.data.values, scaler), apply_scaler(truth.data.values, scaler), mask);
  }
  if (a.json) {
    out << Json{{"rmse", rmse},
                {"scaled", !a.raw},
                {"missing_cells", (mask.array() != 0).count()},
                {"imputed", a.imputed},
                {"truth", a.truth},
                {"mask", a.mask}}
               .dump()
        << '\n';
  } else {
    out << "rmse " << std::setprecision(10) << rmse << '\n';
  }
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Missing-value imputation with a normalizing flow and online EM in latent space", "emflow"};
  app.require_subcommand(1);
  int threads = default_thread_count();
  app.add_option("--threads", threads, "Worker threads (default from EMFLOW_THREADS, else 1)")
      ->check(CLI::PositiveNumber);

  MaskArgs mask_args;
  auto* mask_cmd = app.add_subcommand("mask", "Simulate a missingness mask for a complete CSV");
  mask_cmd->add_option("input", mask_args.input, "Complete data CSV")->required()->check(CLI::ExistingFile);
  mask_cmd->add_option("--mechanism", mask_args.mechanism, "mcar or mar")->required();
  mask_cmd->add_option("--rate", mask_args.rate, "Missing rate for mcar");
  mask_cmd->add_option("--seed", mask_args.seed, "Random seed")->capture_default_str();
  mask_cmd->add_option("-o,--output", mask_args.output, "Mask CSV (default <input>.mask.csv)");
  add_input_options(mask_cmd, mask_args.in);

  ImputeArgs imp;
  auto* imp_cmd = app.add_subcommand("impute", "Impute missing cells of a CSV");
  imp_cmd->add_option("input", imp.input, "Data CSV")->required()->check(CLI::ExistingFile);
  imp_cmd->add_option("--mask", imp.mask, "Mask CSV (1 = missing); default: empty or NA cells")
      ->check(CLI::ExistingFile);
  imp_cmd->add_option("--imputer", imp.imputer, "emflow or baseline-em")->capture_default_str();
  imp_cmd->add_option("--truth", imp.truth, "Complete CSV; adds RMSE to the trace")->check(CLI::ExistingFile);
  imp_cmd->add_option("-o,--output", imp.output, "Imputed CSV (default <input>.imputed.csv)");
  imp_cmd->add_option("--checkpoint", imp.checkpoint, "Checkpoint written after every outer iteration");
  imp_cmd->add_option("--trace", imp.trace, "Trace file, one JSON record per outer iteration");
  imp_cmd->add_option("--resume", imp.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  imp_cmd->add_option("--em-max-iter", imp.em_max_iter, "baseline-em iteration cap")->capture_default_str();
  imp_cmd->add_option("--em-tol", imp.em_tol, "baseline-em tolerance")->capture_default_str();
  imp_cmd->add_flag("-q,--quiet", imp.quiet, "No per-iteration progress");
  add_input_options(imp_cmd, imp.in);
  add_train_flags(imp_cmd, imp.train);

  BenchmarkArgs bench;
  auto* bench_cmd = app.add_subcommand("benchmark", "k-fold RMSE benchmark on a complete CSV");
  bench_cmd->add_option("input", bench.input, "Complete data CSV")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--mechanism", bench.mechanism, "mcar or mar")->capture_default_str();
  bench_cmd->add_option("--rate", bench.rate, "Missing rate for mcar")->capture_default_str();
  bench_cmd->add_option("--folds", bench.folds, "Number of folds")->capture_default_str();
  bench_cmd->add_option("--split-seed", bench.seed, "Seed for folds and the mask")->capture_default_str();
  bench_cmd->add_flag("--no-baseline-em", bench.no_baseline_em, "Skip the batch EM baseline");
  bench_cmd->add_option("--json", bench.json_out, "Report JSON (default <input>.benchmark.json)");
  bench_cmd->add_option("--text", bench.text_out, "Also write the text table here");
  bench_cmd->add_option("--fold-csv", bench.fold_csv, "Per-fold metrics CSV");
  add_input_options(bench_cmd, bench.in);
  add_train_flags(bench_cmd, bench.train);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "RMSE over masked cells");
  eval_cmd->add_option("imputed", ev.imputed, "Imputed CSV")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("truth", ev.truth, "Complete ground-truth CSV")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("mask", ev.mask, "Mask CSV (1 = missing)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_flag("--raw", ev.raw, "Original units instead of min-max scaled");
  eval_cmd->add_flag("--json", ev.json, "Print JSON");
  add_input_options(eval_cmd, ev.in);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*mask_cmd) return cmd_mask(mask_args, out);
    if (*imp_cmd) return cmd_impute(imp, threads, out, err);
    if (*bench_cmd) return cmd_benchmark(bench, threads, out);
    if (*eval_cmd) return cmd_eval(ev, out);
  } catch (const NumericalError& e) {
    err << "error: numerical failure in " << e.what() << '\n';
    return kNumerical;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

int run(int argc, const char* const* argv) { return run(argc, argv, std::cout, std::cerr); }

}  // namespace emflow::cli
