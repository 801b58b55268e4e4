#include "doctest.h"

#include <filesystem>
#include <limits>

#include "emflow/checkpoint.hpp"
#include "emflow/masking.hpp"
#include "fixtures.hpp"

using namespace emflow;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "emflow_test_checkpoint";
  fs::create_directories(dir);
  return dir / name;
}

bool has_error(const ConfigError& e, const std::string& needle) {
  for (const auto& s : e.errors())
    if (s.find(needle) != std::string::npos) return true;
  return false;
}

TrainConfig resumable_config() {
  TrainConfig c;
  c.outer_iterations = 3;
  c.epochs_per_phase = 2;
  c.batch_size = 50;
  c.learning_rate = 1e-3;
  c.flow_depth = 2;
  c.hidden_width = 8;
  c.seed = 12;
  return c;
}

}  // namespace

TEST_CASE("matrices round trip bit for bit") {
  MatrixXd m(2, 3);
  m << 1.0 / 3.0, -0.0, 1e-300, std::numeric_limits<double>::denorm_min(), 123456789.123456789, -2.5e17;
  const Json j = matrix_to_json(m);
  CHECK(j["rows"] == 2);
  CHECK(matrix_from_json(Json::parse(j.dump())) == m);

  MaskMatrix mask = MaskMatrix::Zero(3, 2);
  mask(2, 0) = 1;
  CHECK(mask_from_json(Json::parse(mask_to_json(mask).dump())) == mask);

  Json bad = j;
  bad["data"].erase(0);
  CHECK_THROWS(matrix_from_json(bad));
}

TEST_CASE("flow and base round trip bit for bit") {
  const auto flow = random_flow<double>(5, 4, 3, 12, 0.4);
  std::mt19937_64 rng(1);
  GaussianParams<double> base{oracle::randn(5, 1, rng).col(0), oracle::random_spd(5, rng)};
  const fs::path path = temp_path("flow.json");
  write_json_file(path, flow_to_json(flow, base));

  GaussianParams<double> base_back;
  const auto back = flow_from_json(read_json_file(path), &base_back);
  CHECK(flatten_parameters(back) == flatten_parameters(flow));
  CHECK(back.scale_clamp == flow.scale_clamp);
  CHECK(base_back.mean == base.mean);
  CHECK(base_back.cov == base.cov);

  const MatrixXd x = oracle::randn(20, 5, rng);
  CHECK(flow_forward(back, x).values == flow_forward(flow, x).values);
  CHECK(flow_inverse(back, x).log_det == flow_inverse(flow, x).log_det);

  Json broken = flow_to_json(flow, base);
  broken["layers"][1]["scale_net"]["weights"][0] = matrix_to_json(MatrixXd::Zero(2, 2));
  CHECK_THROWS(flow_from_json(broken));
  Json wrong = flow_to_json(flow, base);
  wrong["format"] = "something-else";
  CHECK_THROWS(flow_from_json(wrong));
}

TEST_CASE("config round trip") {
  TrainConfig c = resumable_config();
  c.grid = GridShape{2, 3};
  c.initial_strategy = InitialStrategy::Median;
  c.em.beta_schedule = {{1, 0.5}, {4, 0.0}};
  c.em.superbatch_max = 77;
  c.freeze_flow = true;
  const Json j = config_to_json(c);
  const TrainConfig back = config_from_json(Json::parse(j.dump()));
  CHECK(config_to_json(back) == j);
  CHECK(back.grid->width == 3);
  CHECK(back.em.beta_schedule == c.em.beta_schedule);
}

TEST_CASE("partial config overrides the defaults") {
  TrainConfig defaults;
  defaults.seed = 99;
  const auto c = config_from_json(Json{{"epochs_per_phase", 3}, {"em", {{"step_scale", 0.5}}}}, defaults);
  CHECK(c.epochs_per_phase == 3);
  CHECK(c.em.step_scale == 0.5);
  CHECK(c.em.step_decay == 0.8);
  CHECK(c.seed == 99);
}

TEST_CASE("config errors are enumerated together") {
  const Json j = Json::parse(R"({
    "batch_size": "big",
    "alpha": -1,
    "learning_rate": "fast",
    "colour": "red",
    "initial_strategy": "mode",
    "reinit_flow": 3,
    "em": {"step_decay": 0.2, "extra": 1, "beta_schedule": [[1, 0.1], [1]]}
  })");
  try {
    config_from_json(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(has_error(e, "batch_size"));
    CHECK(has_error(e, "alpha"));
    CHECK(has_error(e, "learning_rate"));
    CHECK(has_error(e, "colour"));
    CHECK(has_error(e, "initial_strategy"));
    CHECK(has_error(e, "reinit_flow"));
    CHECK(has_error(e, "em.step_decay"));
    CHECK(has_error(e, "extra"));
    CHECK(has_error(e, "beta_schedule"));
    CHECK(e.errors().size() >= 9);
    CHECK(std::string(e.what()).find("invalid config") != std::string::npos);
  }
  CHECK_THROWS_AS(config_from_json(Json::array()), ConfigError);
}

TEST_CASE("trace records round trip") {
  TraceRecord r;
  r.iteration = 4;
  r.beta = 1e-3;
  r.l1 = -1.25;
  r.l2 = 3.5;
  r.gradient_steps = 80;
  r.em_updates = 40;
  r.train_rmse = 0.0757;
  const TraceRecord back = trace_from_json(Json::parse(trace_to_json(r).dump()));
  CHECK(back.iteration == 4);
  CHECK(back.l1 == -1.25);
  CHECK(back.train_rmse == 0.0757);
  CHECK(!back.test_rmse.has_value());
}

TEST_CASE("resuming from a checkpoint matches an uninterrupted run") {
  const Index n = 240, p = 4;
  const MatrixXd x = fixtures::nonlinear_data(3, n, p);
  const MaskMatrix mask = mcar_mask(n, p, 0.25, 4);

  for (bool carry_state : {false, true}) {
    CAPTURE(carry_state);
    TrainConfig c = resumable_config();
    if (carry_state) {
      c.reinit_flow = false;
      c.em.reinit_each_iteration = false;
      c.em.superbatch_max = 30;
    }
    Engine full(c, x.topRows(200), mask.topRows(200));
    full.set_holdout(x.bottomRows(40), mask.bottomRows(40));
    const auto expected = full.run();

    Engine first(c, x.topRows(200), mask.topRows(200));
    first.set_holdout(x.bottomRows(40), mask.bottomRows(40));
    first.step();
    const fs::path path = temp_path(carry_state ? "carry.json" : "fresh.json");
    save_checkpoint(path, first.state());

    Engine resumed = Engine::from_state(load_checkpoint(path));
    CHECK(resumed.completed_iterations() == 1);
    const auto got = resumed.run();
    CHECK(got.imputed.values == expected.imputed.values);
    CHECK(*got.holdout_imputed == *expected.holdout_imputed);
    CHECK(flatten_parameters(got.flow) == flatten_parameters(expected.flow));
    CHECK(got.base.cov == expected.base.cov);
    REQUIRE(got.trace.size() == 3);
    CHECK(got.trace[2].l1 == expected.trace[2].l1);
  }
}

TEST_CASE("corrupt checkpoints are rejected") {
  const fs::path path = temp_path("junk.json");
  write_json_file(path, Json{{"format", "emflow-flow"}});
  CHECK_THROWS(load_checkpoint(path));
  CHECK_THROWS(load_checkpoint(temp_path("missing.json")));
}
