#include "emflow/csv.hpp"

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace emflow {
namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split(const std::string& line, char delimiter) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, delimiter)) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == delimiter) cells.emplace_back();
  return cells;
}

std::string where(const std::filesystem::path& path, std::size_t line, std::size_t col) {
  std::ostringstream os;
  os << path.string() << ":" << line << ": column " << col + 1;
  return os.str();
}

std::vector<std::vector<std::string>> read_rows(const std::filesystem::path& path, char delimiter, bool header,
                                                std::vector<std::string>& names, std::vector<std::size_t>& line_numbers) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::size_t line_no = 0;
  bool header_pending = header;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split(line, delimiter);
    if (header_pending) {
      names = std::move(cells);
      header_pending = false;
      continue;
    }
    if (!rows.empty() && cells.size() != rows.front().size()) {
      std::ostringstream os;
      os << path.string() << ":" << line_no << ": expected " << rows.front().size() << " fields, found "
         << cells.size();
      throw std::runtime_error(os.str());
    }
    rows.push_back(std::move(cells));
    line_numbers.push_back(line_no);
  }
  if (rows.empty()) throw std::runtime_error(path.string() + ": no data rows");
  if (!names.empty() && names.size() != rows.front().size()) {
    throw std::runtime_error(path.string() + ": header has " + std::to_string(names.size()) + " fields, data has " +
                             std::to_string(rows.front().size()));
  }
  return rows;
}

}  // namespace

CsvTable read_csv(const std::filesystem::path& path, const CsvOptions& options) {
  std::vector<std::string> names;
  std::vector<std::size_t> line_numbers;
  const auto rows = read_rows(path, options.delimiter, options.header, names, line_numbers);
  const auto n = static_cast<Index>(rows.size());
  const auto p = static_cast<Index>(rows.front().size());

  CsvTable table;
  table.data.values = MatrixXd::Zero(n, p);
  table.data.feature_names = std::move(names);
  table.missing = MaskMatrix::Zero(n, p);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < p; ++j) {
      const std::string& cell = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      if (cell.empty() || cell == options.na_token) {
        table.missing(i, j) = 1;
        continue;
      }
      errno = 0;
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0' || errno == ERANGE || !std::isfinite(v)) {
        throw std::runtime_error(where(path, line_numbers[static_cast<std::size_t>(i)], static_cast<std::size_t>(j)) +
                                 ": not a finite number: '" + cell + "'");
      }
      table.data.values(i, j) = v;
    }
  }
  return table;
}

void write_csv(const std::filesystem::path& path, const MatrixXd& values, const std::vector<std::string>& header,
               char delimiter) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  if (!header.empty()) {
    for (std::size_t j = 0; j < header.size(); ++j) out << (j ? std::string(1, delimiter) : "") << header[j];
    out << '\n';
  }
  for (Index i = 0; i < values.rows(); ++i) {
    for (Index j = 0; j < values.cols(); ++j) {
      if (j) out << delimiter;
      out << values(i, j);
    }
    out << '\n';
  }
}

MaskMatrix read_mask_csv(const std::filesystem::path& path, bool header) {
  std::vector<std::string> names;
  std::vector<std::size_t> line_numbers;
  const auto rows = read_rows(path, ',', header, names, line_numbers);
  MaskMatrix mask(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < mask.rows(); ++i) {
    for (Index j = 0; j < mask.cols(); ++j) {
      const std::string& cell = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      if (cell != "0" && cell != "1") {
        throw std::runtime_error(where(path, line_numbers[static_cast<std::size_t>(i)], static_cast<std::size_t>(j)) +
                                 ": mask entries must be 0 or 1, got '" + cell + "'");
      }
      mask(i, j) = cell == "1" ? 1 : 0;
    }
  }
  return mask;
}

void write_mask_csv(const std::filesystem::path& path, const MaskMatrix& mask, const std::vector<std::string>& header) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (!header.empty()) {
    for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
    out << '\n';
  }
  for (Index i = 0; i < mask.rows(); ++i) {
    for (Index j = 0; j < mask.cols(); ++j) out << (j ? "," : "") << static_cast<int>(mask(i, j));
    out << '\n';
  }
}

}  // namespace emflow
