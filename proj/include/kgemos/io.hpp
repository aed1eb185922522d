#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kgemos/linalg.hpp"

namespace kgemos {

/// Numeric rows separated by commas and/or whitespace. Blank lines and
/// lines starting with '#' are skipped.
inline Matrix read_matrix(std::istream& in, const std::string& where = "<stream>") {
  std::vector<double> values;
  std::size_t cols = 0, rows = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    for (char& ch : line)
      if (ch == ',' || ch == ';') ch = ' ';
    std::istringstream ls(line);
    std::vector<double> row;
    std::string tok;
    while (ls >> tok) {
      if (row.empty() && tok[0] == '#') break;
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size())
        throw std::invalid_argument(where + ":" + std::to_string(line_no) + ": not a number: '" + tok + "'");
      row.push_back(v);
    }
    if (row.empty()) continue;
    if (rows == 0) cols = row.size();
    if (row.size() != cols)
      throw DimensionError(where + ":" + std::to_string(line_no) + ": expected " + std::to_string(cols) + " values, got " +
                           std::to_string(row.size()));
    values.insert(values.end(), row.begin(), row.end());
    ++rows;
  }
  return Matrix(rows, cols, std::move(values));
}

inline Matrix read_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_matrix(in, path.string());
}

/// Comma-separated rows at full double precision, optional header line.
inline void write_csv(std::ostream& out, const Matrix& m, const std::vector<std::string>& header = {}) {
  for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
  if (!header.empty()) out << '\n';
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out << (j ? "," : "") << m(i, j);
    out << '\n';
  }
}

}  // namespace kgemos
