#include "emflow/engine.hpp"

#include <chrono>
#include <numeric>
#include <sstream>

#include "emflow/masking.hpp"
#include "emflow/metrics.hpp"
#include "emflow/parallel.hpp"

namespace emflow {
namespace {

// Independent sub-streams of the run seed.
constexpr Index kShuffleStream = -1;
constexpr Index kInitialImputeStream = -2;
constexpr Index kHoldoutImputeStream = -3;
constexpr std::uint64_t kFlowSalt = 0x666c6f77ULL;

constexpr Index kReimputeChunk = 64;

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : "; ") + p;
  return out;
}

FlowModel<double> fresh_flow(const TrainConfig& config, Index p, int iteration) {
  auto flow = reinit_flow<double>(p, config.flow_depth, row_seed(config.seed ^ kFlowSalt, iteration), config.hidden_width);
  flow.scale_clamp = config.scale_clamp;
  return flow;
}

std::string serialize_rng(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

std::vector<std::string> TrainConfig::validate(Index rows) const {
  std::vector<std::string> errors;
  if (outer_iterations < 0) errors.push_back("outer_iterations must be >= 0");
  if (epochs_per_phase < 1) errors.push_back("epochs_per_phase must be >= 1");
  if (batch_size < 2) errors.push_back("batch_size must be >= 2");
  if (rows > 0 && batch_size > rows) {
    errors.push_back("batch_size (" + std::to_string(batch_size) + ") must not exceed the number of rows (" +
                     std::to_string(rows) + ")");
  }
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) errors.push_back("learning_rate must be finite and >= 0");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) errors.push_back("alpha must be finite and >= 0");
  if (flow_depth < 1) errors.push_back("flow_depth must be >= 1");
  if (hidden_width < 0) errors.push_back("hidden_width must be >= 0");
  if (!(scale_clamp > 0.0)) errors.push_back("scale_clamp must be > 0");
  if (threads < 1) errors.push_back("threads must be >= 1");
  if (initial_strategy == InitialStrategy::NearestNeighborGrid && !grid) {
    errors.push_back("initial_strategy nearest-neighbor-grid requires grid height and width");
  }
  for (auto& e : em.validate()) errors.push_back(std::move(e));
  return errors;
}

PhaseStats training_phase(const MatrixXd& imputed, const MaskMatrix& mask, FlowModel<double>& flow,
                          FlowOptimizer& optimizer, std::optional<OnlineEm<double>>& em, const TrainConfig& config,
                          double beta, std::mt19937_64& rng) {
  const Index n = imputed.rows();
  check_mask(mask, n, imputed.cols());
  if (n < 2) throw std::invalid_argument("training_phase: need at least two rows");
  const Index batch = std::min(config.batch_size, n);

  PhaseStats stats;
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});

  for (int epoch = 0; epoch < config.epochs_per_phase; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double l1_sum = 0.0, l2_sum = 0.0;
    int batches = 0;
    for (Index start = 0; start < n; start += batch) {
      const Index end = std::min(n, start + batch);
      const IndexList rows(order.begin() + start, order.begin() + end);
      const MatrixXd x_batch = imputed(rows, Eigen::all);
      const MaskMatrix m_batch = mask(rows, Eigen::all);
      try {
        if (!em) {
          em.emplace(OnlineEm<double>::init_from_batch(flow_inverse(flow, x_batch).values, config.em, beta));
        }
        double l1;
        if (config.freeze_flow) {
          l1 = loss_l1(x_batch, flow, em->params());
        } else {
          l1 = grad_step_l1(flow, optimizer.l1, em->params(), x_batch);
          ++stats.gradient_steps;
        }

        const MatrixXd latent = flow_inverse(flow, x_batch).values;
        const MatrixXd latent_imputed = em->update(latent, m_batch);
        ++stats.em_updates;

        double l2;
        if (config.freeze_flow) {
          const MatrixXd reconstructed = flow_forward(flow, latent_imputed).values;
          l2 = loss_l2(reconstructed, x_batch, m_batch, flow, em->params(), config.alpha);
        } else {
          l2 = grad_step_l2(flow, optimizer.l2, em->params(), latent_imputed, x_batch, m_batch, config.alpha);
          ++stats.gradient_steps;
        }
        if (!std::isfinite(l1) || !std::isfinite(l2)) throw NumericalError("engine", "non-finite loss");
        l1_sum += l1;
        l2_sum += l2;
        ++batches;
      } catch (const NumericalError& e) {
        std::ostringstream ctx;
        ctx << "epoch " << epoch + 1 << ", batch " << batches + 1 << ": " << e.what();
        throw NumericalError("engine.training_phase", ctx.str());
      }
    }
    stats.l1_per_epoch.push_back(l1_sum / batches);
    stats.l2_per_epoch.push_back(l2_sum / batches);
  }
  return stats;
}

MatrixXd reimputation_phase(const MatrixXd& imputed, const MaskMatrix& mask, const FlowModel<double>& flow,
                            const GaussianParams<double>& base, int threads) {
  check_mask(mask, imputed.rows(), imputed.cols());
  MatrixXd out = imputed;
  parallel_for_chunks(imputed.rows(), kReimputeChunk, threads, [&](Index begin, Index end) {
    const Index len = end - begin;
    const MaskMatrix m = mask.middleRows(begin, len);
    if ((m.array() == 0).all()) return;
    const MatrixXd latent = flow_inverse(flow, MatrixXd(imputed.middleRows(begin, len))).values;
    const MatrixXd latent_imputed = e_step(latent, m, base).imputed;
    const MatrixXd reconstructed = flow_forward(flow, latent_imputed).values;
    if (!reconstructed.allFinite()) {
      throw NumericalError("engine.reimputation_phase", "non-finite reconstruction in rows " + std::to_string(begin) +
                                                            ".." + std::to_string(end - 1));
    }
    for (Index j = 0; j < m.cols(); ++j) {
      for (Index i = 0; i < len; ++i) {
        if (m(i, j)) out(begin + i, j) = reconstructed(i, j);
      }
    }
  });
  return out;
}

Engine::Engine(TrainConfig config, const MatrixXd& data, const MaskMatrix& mask) {
  check_mask(mask, data.rows(), data.cols());
  if (data.cols() < 2) throw std::invalid_argument("engine: need at least two features");
  if (data.rows() < 2) throw std::invalid_argument("engine: need at least two rows");
  if (!data.allFinite()) throw std::invalid_argument("engine: data must be finite");
  const auto errors = config.validate(data.rows());
  if (!errors.empty()) throw std::invalid_argument("invalid config: " + join(errors));

  state_.config = std::move(config);
  const auto& cfg = state_.config;
  state_.mask = mask;
  state_.imputed = initial_impute(data, mask, cfg.initial_strategy, row_seed(cfg.seed, kInitialImputeStream), cfg.grid).values;
  state_.flow = fresh_flow(cfg, data.cols(), 1);
  state_.optimizer = FlowOptimizer::fresh(state_.flow, cfg.learning_rate);
  state_.base = GaussianParams<double>::standard(data.cols());
  rng_.seed(row_seed(cfg.seed, kShuffleStream));
  state_.rng_state = serialize_rng(rng_);
}

Engine Engine::from_state(EngineState state) {
  Engine engine;
  engine.state_ = std::move(state);
  std::istringstream is(engine.state_.rng_state);
  is >> engine.rng_;
  if (!is) throw std::invalid_argument("engine: corrupt RNG state");
  return engine;
}

void Engine::set_holdout(const MatrixXd& data, const MaskMatrix& mask) {
  check_mask(mask, data.rows(), data.cols());
  if (data.cols() != state_.imputed.cols()) throw std::invalid_argument("holdout: feature count mismatch");
  const auto& cfg = state_.config;
  state_.holdout_imputed = initial_impute_with_donors(data, mask, state_.imputed, state_.mask, cfg.initial_strategy,
                                                      row_seed(cfg.seed, kHoldoutImputeStream), cfg.grid)
                               .values;
  state_.holdout_mask = mask;
}

TraceRecord Engine::step() {
  const auto started = std::chrono::steady_clock::now();
  const auto& cfg = state_.config;
  const int iteration = state_.completed_iterations + 1;
  const double beta = cfg.em.beta_at(iteration);

  if (cfg.reinit_flow && iteration > 1) {
    state_.flow = fresh_flow(cfg, state_.imputed.cols(), iteration);
    state_.optimizer = FlowOptimizer::fresh(state_.flow, cfg.learning_rate);
  }
  if (cfg.em.reinit_each_iteration) {
    state_.em.reset();
  } else if (state_.em) {
    state_.em->set_beta(beta);
  }

  const PhaseStats stats =
      training_phase(state_.imputed, state_.mask, state_.flow, state_.optimizer, state_.em, cfg, beta, rng_);
  state_.base = state_.em->params();
  state_.imputed = reimputation_phase(state_.imputed, state_.mask, state_.flow, state_.base, cfg.threads);
  if (state_.holdout_imputed) {
    state_.holdout_imputed =
        reimputation_phase(*state_.holdout_imputed, *state_.holdout_mask, state_.flow, state_.base, cfg.threads);
  }

  TraceRecord rec;
  rec.iteration = iteration;
  rec.beta = beta;
  rec.l1 = std::accumulate(stats.l1_per_epoch.begin(), stats.l1_per_epoch.end(), 0.0) /
           static_cast<double>(stats.l1_per_epoch.size());
  rec.l2 = std::accumulate(stats.l2_per_epoch.begin(), stats.l2_per_epoch.end(), 0.0) /
           static_cast<double>(stats.l2_per_epoch.size());
  rec.l1_first_epoch = stats.l1_per_epoch.front();
  rec.l1_last_epoch = stats.l1_per_epoch.back();
  rec.gradient_steps = stats.gradient_steps;
  rec.em_updates = stats.em_updates;
  if (train_truth_ && (state_.mask.array() != 0).any()) {
    rec.train_rmse = rmse_missing(state_.imputed, *train_truth_, state_.mask);
  }
  if (holdout_truth_ && state_.holdout_imputed && (state_.holdout_mask->array() != 0).any()) {
    rec.test_rmse = rmse_missing(*state_.holdout_imputed, *holdout_truth_, *state_.holdout_mask);
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  state_.completed_iterations = iteration;
  state_.rng_state = serialize_rng(rng_);
  state_.trace.push_back(rec);
  if (callback_) callback_(rec);
  return rec;
}

ImputationRun Engine::run() {
  while (state_.completed_iterations < state_.config.outer_iterations) step();
  ImputationRun out;
  out.imputed = {state_.imputed, state_.mask};
  out.flow = state_.flow;
  out.base = state_.base;
  out.trace = state_.trace;
  out.holdout_imputed = state_.holdout_imputed;
  return out;
}

ImputationRun run(const MatrixXd& data, const MaskMatrix& mask, const TrainConfig& config,
                  const std::optional<MatrixXd>& truth) {
  Engine engine(config, data, mask);
  if (truth) engine.set_train_truth(*truth);
  return engine.run();
}

}  // namespace emflow
