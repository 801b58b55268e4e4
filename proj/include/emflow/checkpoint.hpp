#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "emflow/engine.hpp"

namespace emflow {

using Json = nlohmann::json;

inline constexpr int kCheckpointVersion = 1;

/// Thrown when a config document has problems; `errors()` has one entry per field.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> errors);
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

Json matrix_to_json(const MatrixXd& m);
MatrixXd matrix_from_json(const Json& j);
Json mask_to_json(const MaskMatrix& m);
MaskMatrix mask_from_json(const Json& j);

Json gaussian_to_json(const GaussianParams<double>& g);
GaussianParams<double> gaussian_from_json(const Json& j);

/// Flow plus the base it was trained against.
Json flow_to_json(const FlowModel<double>& flow, const GaussianParams<double>& base);
FlowModel<double> flow_from_json(const Json& j, GaussianParams<double>* base = nullptr);

Json config_to_json(const TrainConfig& config);
/// Overrides fields of `defaults` with those present in `j`. Unknown keys,
/// wrong types and failed validation are collected and thrown together.
TrainConfig config_from_json(const Json& j, const TrainConfig& defaults = {});

Json trace_to_json(const TraceRecord& record);
TraceRecord trace_from_json(const Json& j);

Json state_to_json(const EngineState& state);
EngineState state_from_json(const Json& j);

void save_checkpoint(const std::filesystem::path& path, const EngineState& state);
EngineState load_checkpoint(const std::filesystem::path& path);

Json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const Json& j);

}  // namespace emflow
