#pragma once

#include <filesystem>
#include <string>

#include "emflow/data_model.hpp"

namespace emflow {

struct CsvOptions {
  bool header = false;
  /// Cell text treated as missing, in addition to empty cells.
  std::string na_token = "NA";
  char delimiter = ',';
};

struct CsvTable {
  DataMatrix data;
  /// 1 where the cell was empty or equal to the NA token.
  MaskMatrix missing;
};

/// Parses a numeric table. Missing cells are stored as 0 and flagged in
/// `missing`. Throws std::runtime_error with file, line and column on
/// malformed input.
CsvTable read_csv(const std::filesystem::path& path, const CsvOptions& options = {});

/// Writes with round-trip precision (17 significant digits).
void write_csv(const std::filesystem::path& path, const MatrixXd& values,
               const std::vector<std::string>& header = {}, char delimiter = ',');

MaskMatrix read_mask_csv(const std::filesystem::path& path, bool header = false);
void write_mask_csv(const std::filesystem::path& path, const MaskMatrix& mask,
                    const std::vector<std::string>& header = {});

}  // namespace emflow
