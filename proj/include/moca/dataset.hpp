#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "moca/tensor.hpp"

namespace moca {

/// Observational data: covariates (n x p), binary treatment and outcome.
struct Dataset {
  Matrix x;
  Vector t;
  Vector y;

  Index size() const { return x.rows(); }
  Index features() const { return x.cols(); }

  /// Throws DimensionError on inconsistent lengths, DataError on non-binary T.
  void validate() const;
  Index treated_count() const;
  Dataset subset(std::span<const Index> rows) const;
};

bool is_binary(const Eigen::Ref<const Vector>& v);

/// Z-scoring fit on a training split. Binary (0/1) covariate columns and
/// constant columns are passed through unchanged.
struct Standardizer {
  Vector x_mean;
  Vector x_scale;
  Scalar y_mean = 0;
  Scalar y_scale = 1;

  static Standardizer identity(Index features);
  static Standardizer fit(const Dataset& data, bool covariates, bool outcome);

  Matrix transform_x(const Matrix& x) const;
  Vector transform_y(const Vector& y) const;
  Scalar restore_y(Scalar standardized) const { return y_mean + y_scale * standardized; }
};

/// Header plus raw text cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column position, or -1.
  int column(std::string_view name) const;
  /// Column position; SchemaError naming the column when absent.
  int require(std::string_view name) const;
  /// Cell parsed as a double; SchemaError when it is not numeric.
  double number(std::size_t row, int col) const;

  std::string source;
};

CsvTable read_csv(const std::filesystem::path& path);

/// Round-trippable text form of a double (17 significant digits).
std::string format_double(double v);

}  // namespace moca
