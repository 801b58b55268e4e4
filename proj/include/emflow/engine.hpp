#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "emflow/data_model.hpp"
#include "emflow/flow.hpp"
#include "emflow/online_em.hpp"

namespace emflow {

/// Hyperparameters of an imputation run. Defaults follow the tabular setup:
/// batch 256, learning rate 1e-4, alpha 1e6, six coupling layers,
/// rho_t = 0.99 t^-0.8.
struct TrainConfig {
  int outer_iterations = 5;
  int epochs_per_phase = 10;
  Index batch_size = 256;
  double learning_rate = 1e-4;
  double alpha = 1e6;
  Index flow_depth = 6;
  Index hidden_width = 0;  // 0: max(32, 4p) capped at 256
  double scale_clamp = 5.0;
  EmConfig em;
  std::uint64_t seed = 0;
  InitialStrategy initial_strategy = InitialStrategy::RandomObserved;
  std::optional<GridShape> grid;
  /// Reset the flow (and optimizer) at the start of every outer iteration.
  bool reinit_flow = true;
  /// Skip all gradient steps; the flow stays as constructed (the identity).
  bool freeze_flow = false;
  int threads = 1;

  /// One message per invalid field; `rows` > 0 also checks batch_size <= rows.
  std::vector<std::string> validate(Index rows = 0) const;
};

/// Separate Adam moments for the L1 and L2 steps of a training phase.
struct FlowOptimizer {
  AdamState<double> l1;
  AdamState<double> l2;

  static FlowOptimizer fresh(const FlowModel<double>& flow, double learning_rate) {
    return {AdamState<double>::fresh(flow, learning_rate), AdamState<double>::fresh(flow, learning_rate)};
  }
};

struct PhaseStats {
  std::vector<double> l1_per_epoch;
  std::vector<double> l2_per_epoch;
  long long gradient_steps = 0;
  long long em_updates = 0;
};

/// One line of the run trace, emitted after each outer iteration.
struct TraceRecord {
  int iteration = 0;
  double beta = 0.0;
  double l1 = 0.0;  // mean over the phase's batches
  double l2 = 0.0;
  double l1_first_epoch = 0.0;
  double l1_last_epoch = 0.0;
  long long gradient_steps = 0;
  long long em_updates = 0;
  std::optional<double> train_rmse;
  std::optional<double> test_rmse;
  double seconds = 0.0;
};

/// Everything needed to continue a run: written to and read from checkpoints.
struct EngineState {
  TrainConfig config;
  int completed_iterations = 0;
  std::string rng_state;
  FlowModel<double> flow;
  FlowOptimizer optimizer;
  std::optional<OnlineEm<double>> em;
  GaussianParams<double> base;
  MatrixXd imputed;
  MaskMatrix mask;
  std::optional<MatrixXd> holdout_imputed;
  std::optional<MaskMatrix> holdout_mask;
  std::vector<TraceRecord> trace;
};

struct ImputationRun {
  ImputedDataset imputed;
  FlowModel<double> flow;
  GaussianParams<double> base;
  std::vector<TraceRecord> trace;
  std::optional<MatrixXd> holdout_imputed;
};

/// Training phase: for each epoch and shuffled mini-batch, an L1 step, a
/// latent online-EM update, and an L2 step. `imputed` is read only. An empty
/// `em` is initialized from the first batch's embeddings with `beta`.
PhaseStats training_phase(const MatrixXd& imputed, const MaskMatrix& mask, FlowModel<double>& flow,
                          FlowOptimizer& optimizer, std::optional<OnlineEm<double>>& em, const TrainConfig& config,
                          double beta, std::mt19937_64& rng);

/// Re-imputation phase under frozen parameters: map to latent, fill missing
/// latent coordinates with conditional means, map back, and overwrite only
/// the masked cells.
MatrixXd reimputation_phase(const MatrixXd& imputed, const MaskMatrix& mask, const FlowModel<double>& flow,
                            const GaussianParams<double>& base, int threads = 1);

/// Drives outer iterations over a scaled data set. Optionally carries a
/// held-out block that only goes through re-imputation.
class Engine {
 public:
  /// `data` must be scaled; masked cells are filled by the configured
  /// initial strategy. Throws std::invalid_argument listing config errors.
  Engine(TrainConfig config, const MatrixXd& data, const MaskMatrix& mask);

  static Engine from_state(EngineState state);

  /// Held-out rows, initially filled from the training rows' observed values.
  void set_holdout(const MatrixXd& data, const MaskMatrix& mask);

  void set_train_truth(MatrixXd truth) { train_truth_ = std::move(truth); }
  void set_holdout_truth(MatrixXd truth) { holdout_truth_ = std::move(truth); }
  void on_iteration(std::function<void(const TraceRecord&)> callback) { callback_ = std::move(callback); }

  /// Runs one outer iteration and returns its trace record.
  TraceRecord step();

  /// Runs the remaining outer iterations.
  ImputationRun run();

  const EngineState& state() const { return state_; }
  int completed_iterations() const { return state_.completed_iterations; }

 private:
  Engine() = default;

  EngineState state_;
  std::mt19937_64 rng_;
  std::optional<MatrixXd> train_truth_;
  std::optional<MatrixXd> holdout_truth_;
  std::function<void(const TraceRecord&)> callback_;
};

/// Convenience wrapper: initial imputation then config.outer_iterations iterations.
ImputationRun run(const MatrixXd& data, const MaskMatrix& mask, const TrainConfig& config,
                  const std::optional<MatrixXd>& truth = std::nullopt);

}  // namespace emflow
