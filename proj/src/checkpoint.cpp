#include "emflow/checkpoint.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace emflow {
namespace {

std::string join_lines(const std::vector<std::string>& errors) {
  std::string out;
  for (const auto& e : errors) out += (out.empty() ? "" : "\n") + e;
  return out;
}

Json index_list_to_json(const IndexList& idx) { return Json(idx); }

IndexList index_list_from_json(const Json& j) { return j.get<IndexList>(); }

Json net_to_json(const SmallNet<double>& net) {
  Json weights = Json::array(), biases = Json::array();
  for (std::size_t k = 0; k < 3; ++k) {
    weights.push_back(matrix_to_json(net.weight[k]));
    biases.push_back(matrix_to_json(net.bias[k]));
  }
  return {{"weights", weights}, {"biases", biases}};
}

SmallNet<double> net_from_json(const Json& j) {
  SmallNet<double> net;
  for (std::size_t k = 0; k < 3; ++k) {
    net.weight[k] = matrix_from_json(j.at("weights").at(k));
    const MatrixXd b = matrix_from_json(j.at("biases").at(k));
    if (b.cols() != 1) throw std::invalid_argument("checkpoint: bias must be a column");
    net.bias[k] = b.col(0);
  }
  if (!net.consistent()) throw std::invalid_argument("checkpoint: inconsistent network shapes");
  return net;
}

Json em_to_json(const OnlineEm<double>& em) {
  Json buffer = Json::array();
  for (const auto& b : em.buffer()) {
    buffer.push_back({{"row", matrix_to_json(b.row)},
                      {"mean", matrix_to_json(b.conditional.mean)},
                      {"cov", matrix_to_json(b.conditional.cov)},
                      {"missing", index_list_to_json(b.conditional.missing_idx)}});
  }
  return {{"raw", gaussian_to_json(em.raw_params())},
          {"step", em.step()},
          {"beta", em.beta()},
          {"buffer", buffer}};
}

OnlineEm<double> em_from_json(const Json& j, const EmConfig& config) {
  std::deque<OnlineEm<double>::BufferedRow> buffer;
  for (const auto& b : j.at("buffer")) {
    OnlineEm<double>::BufferedRow row;
    row.row = matrix_from_json(b.at("row")).col(0);
    row.conditional.mean = matrix_from_json(b.at("mean")).col(0);
    row.conditional.cov = matrix_from_json(b.at("cov"));
    row.conditional.missing_idx = index_list_from_json(b.at("missing"));
    buffer.push_back(std::move(row));
  }
  return OnlineEm<double>(config, gaussian_from_json(j.at("raw")), j.at("step").get<long long>(),
                          j.at("beta").get<double>(), std::move(buffer));
}

Json adam_to_json(const AdamState<double>& a) {
  return {{"learning_rate", a.learning_rate}, {"beta1", a.beta1},
          {"beta2", a.beta2},                 {"epsilon", a.epsilon},
          {"step", a.step},                   {"first_moment", matrix_to_json(a.first_moment)},
          {"second_moment", matrix_to_json(a.second_moment)}};
}

AdamState<double> adam_from_json(const Json& j) {
  AdamState<double> a;
  a.learning_rate = j.at("learning_rate").get<double>();
  a.beta1 = j.at("beta1").get<double>();
  a.beta2 = j.at("beta2").get<double>();
  a.epsilon = j.at("epsilon").get<double>();
  a.step = j.at("step").get<long long>();
  a.first_moment = matrix_from_json(j.at("first_moment")).col(0);
  a.second_moment = matrix_from_json(j.at("second_moment")).col(0);
  return a;
}

// Collects field errors while reading a config object.
class FieldReader {
 public:
  FieldReader(const Json& j, std::string prefix, std::vector<std::string>& errors)
      : j_(j), prefix_(std::move(prefix)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(label("") + "must be an object");
  }

  template <typename T>
  void integer(const char* key, T& target, bool non_negative = false) {
    const Json* v = find(key);
    if (!v) return;
    if (!v->is_number_integer() || (non_negative && v->is_number_integer() && !v->is_number_unsigned() && v->get<long long>() < 0)) {
      errors_.push_back(label(key) + (non_negative ? "must be a non-negative integer" : "must be an integer"));
      return;
    }
    target = v->get<T>();
  }

  void number(const char* key, double& target) {
    const Json* v = find(key);
    if (!v) return;
    if (!v->is_number()) {
      errors_.push_back(label(key) + "must be a number");
      return;
    }
    target = v->get<double>();
  }

  void boolean(const char* key, bool& target) {
    const Json* v = find(key);
    if (!v) return;
    if (!v->is_boolean()) {
      errors_.push_back(label(key) + "must be true or false");
      return;
    }
    target = v->get<bool>();
  }

  const Json* find(const char* key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  std::string label(const std::string& key) const {
    const std::string name = prefix_.empty() ? key : (key.empty() ? prefix_ : prefix_ + "." + key);
    return name.empty() ? "config " : name + " ";
  }

  void reject_unknown() {
    if (!j_.is_object()) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) errors_.push_back(label(key) + "is not a recognized field");
    }
  }

  std::vector<std::string>& errors() { return errors_; }

 private:
  const Json& j_;
  std::string prefix_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

}  // namespace

ConfigError::ConfigError(std::vector<std::string> errors)
    : std::invalid_argument("invalid config:\n" + join_lines(errors)), errors_(std::move(errors)) {}

Json matrix_to_json(const MatrixXd& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

MatrixXd matrix_from_json(const Json& j) {
  const Index rows = j.at("rows").get<Index>();
  const Index cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<Index>(data.size()) != rows * cols) {
    throw std::invalid_argument("checkpoint: matrix size does not match its data");
  }
  return Eigen::Map<const MatrixXd>(data.data(), rows, cols);
}

Json mask_to_json(const MaskMatrix& m) {
  std::vector<int> data(m.data(), m.data() + m.size());
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

MaskMatrix mask_from_json(const Json& j) {
  const Index rows = j.at("rows").get<Index>();
  const Index cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<int>>();
  if (rows < 0 || cols < 0 || static_cast<Index>(data.size()) != rows * cols) {
    throw std::invalid_argument("checkpoint: mask size does not match its data");
  }
  MaskMatrix m(rows, cols);
  for (Index k = 0; k < m.size(); ++k) {
    if (data[static_cast<std::size_t>(k)] != 0 && data[static_cast<std::size_t>(k)] != 1) {
      throw std::invalid_argument("checkpoint: mask entries must be 0 or 1");
    }
    m.data()[k] = static_cast<std::uint8_t>(data[static_cast<std::size_t>(k)]);
  }
  return m;
}

Json gaussian_to_json(const GaussianParams<double>& g) {
  return {{"mean", matrix_to_json(g.mean)}, {"cov", matrix_to_json(g.cov)}};
}

GaussianParams<double> gaussian_from_json(const Json& j) {
  GaussianParams<double> g;
  const MatrixXd mean = matrix_from_json(j.at("mean"));
  if (mean.cols() != 1) throw std::invalid_argument("checkpoint: mean must be a column");
  g.mean = mean.col(0);
  g.cov = matrix_from_json(j.at("cov"));
  if (g.cov.rows() != g.mean.size() || g.cov.cols() != g.mean.size()) {
    throw std::invalid_argument("checkpoint: covariance shape does not match mean");
  }
  return g;
}

Json flow_to_json(const FlowModel<double>& flow, const GaussianParams<double>& base) {
  Json layers = Json::array();
  for (const auto& layer : flow.layers) {
    layers.push_back({{"pass", index_list_to_json(layer.pass_idx)},
                      {"transform", index_list_to_json(layer.transform_idx)},
                      {"scale_net", net_to_json(layer.scale_net)},
                      {"shift_net", net_to_json(layer.shift_net)}});
  }
  return {{"format", "emflow-flow"},
          {"version", kCheckpointVersion},
          {"dim", flow.dim},
          {"depth", flow.depth()},
          {"partition", "alternating"},
          {"scale_clamp", flow.scale_clamp},
          {"layers", layers},
          {"base", gaussian_to_json(base)}};
}

FlowModel<double> flow_from_json(const Json& j, GaussianParams<double>* base) {
  if (j.value("format", "") != "emflow-flow") throw std::invalid_argument("checkpoint: not a flow document");
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw std::invalid_argument("checkpoint: unsupported flow version " + j.at("version").dump());
  }
  FlowModel<double> flow;
  flow.dim = j.at("dim").get<Index>();
  flow.scale_clamp = j.at("scale_clamp").get<double>();
  for (const auto& lj : j.at("layers")) {
    CouplingLayer<double> layer;
    layer.pass_idx = index_list_from_json(lj.at("pass"));
    layer.transform_idx = index_list_from_json(lj.at("transform"));
    layer.scale_net = net_from_json(lj.at("scale_net"));
    layer.shift_net = net_from_json(lj.at("shift_net"));
    const Index pass = static_cast<Index>(layer.pass_idx.size());
    const Index tr = static_cast<Index>(layer.transform_idx.size());
    if (pass + tr != flow.dim || layer.scale_net.input_dim() != pass || layer.scale_net.output_dim() != tr ||
        layer.shift_net.input_dim() != pass || layer.shift_net.output_dim() != tr) {
      throw std::invalid_argument("checkpoint: layer shapes do not match the partition");
    }
    flow.layers.push_back(std::move(layer));
  }
  if (flow.depth() != j.at("depth").get<Index>()) throw std::invalid_argument("checkpoint: depth mismatch");
  if (base) *base = gaussian_from_json(j.at("base"));
  return flow;
}

Json config_to_json(const TrainConfig& c) {
  Json schedule = Json::array();
  for (const auto& [it, beta] : c.em.beta_schedule) schedule.push_back({it, beta});
  Json grid = nullptr;
  if (c.grid) grid = {{"height", c.grid->height}, {"width", c.grid->width}};
  return {{"outer_iterations", c.outer_iterations},
          {"epochs_per_phase", c.epochs_per_phase},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"alpha", c.alpha},
          {"flow_depth", c.flow_depth},
          {"hidden_width", c.hidden_width},
          {"scale_clamp", c.scale_clamp},
          {"seed", c.seed},
          {"initial_strategy", to_string(c.initial_strategy)},
          {"grid", grid},
          {"reinit_flow", c.reinit_flow},
          {"freeze_flow", c.freeze_flow},
          {"threads", c.threads},
          {"em",
           {{"step_scale", c.em.step_scale},
            {"step_decay", c.em.step_decay},
            {"beta_schedule", schedule},
            {"superbatch_max", c.em.superbatch_max},
            {"reinit_each_iteration", c.em.reinit_each_iteration}}}};
}

TrainConfig config_from_json(const Json& j, const TrainConfig& defaults) {
  TrainConfig c = defaults;
  std::vector<std::string> errors;
  FieldReader r(j, "", errors);
  r.integer("outer_iterations", c.outer_iterations);
  r.integer("epochs_per_phase", c.epochs_per_phase);
  r.integer("batch_size", c.batch_size);
  r.number("learning_rate", c.learning_rate);
  r.number("alpha", c.alpha);
  r.integer("flow_depth", c.flow_depth);
  r.integer("hidden_width", c.hidden_width);
  r.number("scale_clamp", c.scale_clamp);
  r.integer("seed", c.seed, true);
  if (const Json* v = r.find("initial_strategy")) {
    try {
      c.initial_strategy = parse_initial_strategy(v->get<std::string>());
    } catch (const std::exception&) {
      errors.push_back("initial_strategy must be one of random-observed, median, nearest-neighbor-grid");
    }
  }
  if (const Json* v = r.find("grid")) {
    if (v->is_null()) {
      c.grid.reset();
    } else {
      GridShape g;
      FieldReader gr(*v, "grid", errors);
      gr.integer("height", g.height);
      gr.integer("width", g.width);
      gr.reject_unknown();
      if (g.height < 1 || g.width < 1) errors.push_back("grid height and width must be >= 1");
      c.grid = g;
    }
  }
  r.boolean("reinit_flow", c.reinit_flow);
  r.boolean("freeze_flow", c.freeze_flow);
  r.integer("threads", c.threads);
  if (const Json* v = r.find("em")) {
    FieldReader er(*v, "em", errors);
    er.number("step_scale", c.em.step_scale);
    er.number("step_decay", c.em.step_decay);
    er.integer("superbatch_max", c.em.superbatch_max);
    er.boolean("reinit_each_iteration", c.em.reinit_each_iteration);
    if (const Json* s = er.find("beta_schedule")) {
      std::vector<std::pair<int, double>> schedule;
      bool ok = s->is_array();
      if (ok) {
        for (const auto& e : *s) {
          if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number()) {
            ok = false;
            break;
          }
          schedule.emplace_back(e[0].get<int>(), e[1].get<double>());
        }
      }
      if (ok) {
        c.em.beta_schedule = std::move(schedule);
      } else {
        errors.push_back("em.beta_schedule must be a list of [iteration, beta] pairs");
      }
    }
    er.reject_unknown();
  }
  r.reject_unknown();
  for (auto& e : c.validate()) errors.push_back(std::move(e));
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return c;
}

Json trace_to_json(const TraceRecord& t) {
  Json j = {{"iteration", t.iteration},
            {"beta", t.beta},
            {"l1", t.l1},
            {"l2", t.l2},
            {"l1_first_epoch", t.l1_first_epoch},
            {"l1_last_epoch", t.l1_last_epoch},
            {"gradient_steps", t.gradient_steps},
            {"em_updates", t.em_updates},
            {"seconds", t.seconds}};
  j["train_rmse"] = t.train_rmse ? Json(*t.train_rmse) : Json(nullptr);
  j["test_rmse"] = t.test_rmse ? Json(*t.test_rmse) : Json(nullptr);
  return j;
}

TraceRecord trace_from_json(const Json& j) {
  TraceRecord t;
  t.iteration = j.at("iteration").get<int>();
  t.beta = j.at("beta").get<double>();
  t.l1 = j.at("l1").get<double>();
  t.l2 = j.at("l2").get<double>();
  t.l1_first_epoch = j.at("l1_first_epoch").get<double>();
  t.l1_last_epoch = j.at("l1_last_epoch").get<double>();
  t.gradient_steps = j.at("gradient_steps").get<long long>();
  t.em_updates = j.at("em_updates").get<long long>();
  t.seconds = j.at("seconds").get<double>();
  if (j.contains("train_rmse") && !j.at("train_rmse").is_null()) t.train_rmse = j.at("train_rmse").get<double>();
  if (j.contains("test_rmse") && !j.at("test_rmse").is_null()) t.test_rmse = j.at("test_rmse").get<double>();
  return t;
}

Json state_to_json(const EngineState& s) {
  Json trace = Json::array();
  for (const auto& t : s.trace) trace.push_back(trace_to_json(t));
  Json j = {{"format", "emflow-checkpoint"},
            {"version", kCheckpointVersion},
            {"config", config_to_json(s.config)},
            {"completed_iterations", s.completed_iterations},
            {"rng_state", s.rng_state},
            {"flow", flow_to_json(s.flow, s.base)},
            {"adam", {{"l1", adam_to_json(s.optimizer.l1)}, {"l2", adam_to_json(s.optimizer.l2)}}},
            {"imputed", matrix_to_json(s.imputed)},
            {"mask", mask_to_json(s.mask)},
            {"trace", trace}};
  j["em"] = s.em ? em_to_json(*s.em) : Json(nullptr);
  j["holdout_imputed"] = s.holdout_imputed ? matrix_to_json(*s.holdout_imputed) : Json(nullptr);
  j["holdout_mask"] = s.holdout_mask ? mask_to_json(*s.holdout_mask) : Json(nullptr);
  return j;
}

EngineState state_from_json(const Json& j) {
  if (j.value("format", "") != "emflow-checkpoint") throw std::invalid_argument("checkpoint: not an engine checkpoint");
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw std::invalid_argument("checkpoint: unsupported version " + j.at("version").dump());
  }
  EngineState s;
  s.config = config_from_json(j.at("config"));
  s.completed_iterations = j.at("completed_iterations").get<int>();
  s.rng_state = j.at("rng_state").get<std::string>();
  s.flow = flow_from_json(j.at("flow"), &s.base);
  s.optimizer.l1 = adam_from_json(j.at("adam").at("l1"));
  s.optimizer.l2 = adam_from_json(j.at("adam").at("l2"));
  for (const auto* a : {&s.optimizer.l1, &s.optimizer.l2}) {
    if (a->first_moment.size() != parameter_count(s.flow) || a->second_moment.size() != parameter_count(s.flow)) {
      throw std::invalid_argument("checkpoint: optimizer state does not match the flow");
    }
  }
  if (!j.at("em").is_null()) s.em.emplace(em_from_json(j.at("em"), s.config.em));
  s.imputed = matrix_from_json(j.at("imputed"));
  s.mask = mask_from_json(j.at("mask"));
  check_mask(s.mask, s.imputed.rows(), s.imputed.cols());
  if (!j.at("holdout_imputed").is_null()) {
    s.holdout_imputed = matrix_from_json(j.at("holdout_imputed"));
    s.holdout_mask = mask_from_json(j.at("holdout_mask"));
    check_mask(*s.holdout_mask, s.holdout_imputed->rows(), s.holdout_imputed->cols());
  }
  for (const auto& t : j.at("trace")) s.trace.push_back(trace_from_json(t));
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const EngineState& state) {
  write_json_file(path, state_to_json(state));
}

EngineState load_checkpoint(const std::filesystem::path& path) {
  try {
    return state_from_json(read_json_file(path));
  } catch (const Json::exception& e) {
    throw std::invalid_argument(path.string() + ": malformed checkpoint: " + e.what());
  }
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << j.dump(1) << '\n';
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

}  // namespace emflow
