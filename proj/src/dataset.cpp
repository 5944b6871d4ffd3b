#include "moca/dataset.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "moca/errors.hpp"

namespace moca {

void Dataset::validate() const {
  if (t.size() != x.rows() || y.size() != x.rows()) {
    throw DimensionError("dataset: covariate, treatment and outcome lengths differ (" + std::to_string(x.rows()) +
                         ", " + std::to_string(t.size()) + ", " + std::to_string(y.size()) + ")");
  }
  if (!is_binary(t)) throw DataError("treatment must be binary (0/1)");
}

Index Dataset::treated_count() const { return static_cast<Index>((t.array() > 0.5).count()); }

Dataset Dataset::subset(std::span<const Index> rows) const {
  Dataset out;
  const Index n = static_cast<Index>(rows.size());
  out.x.resize(n, x.cols());
  out.t.resize(n);
  out.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    out.x.row(i) = x.row(rows[i]);
    out.t(i) = t(rows[i]);
    out.y(i) = y(rows[i]);
  }
  return out;
}

bool is_binary(const Eigen::Ref<const Vector>& v) {
  for (Index i = 0; i < v.size(); ++i) {
    if (v(i) != 0.0 && v(i) != 1.0) return false;
  }
  return true;
}

Standardizer Standardizer::identity(Index features) {
  Standardizer s;
  s.x_mean = Vector::Zero(features);
  s.x_scale = Vector::Ones(features);
  return s;
}

Standardizer Standardizer::fit(const Dataset& data, bool covariates, bool outcome) {
  Standardizer s = identity(data.features());
  const Index n = data.size();
  if (covariates && n > 1) {
    for (Index j = 0; j < data.features(); ++j) {
      const auto col = data.x.col(j);
      if (is_binary(col)) continue;
      const Scalar m = col.mean();
      const Scalar sd = std::sqrt((col.array() - m).square().sum() / static_cast<Scalar>(n - 1));
      if (!(sd > 0)) continue;
      s.x_mean(j) = m;
      s.x_scale(j) = sd;
    }
  }
  if (outcome && n > 1) {
    const Scalar m = data.y.mean();
    const Scalar sd = std::sqrt((data.y.array() - m).square().sum() / static_cast<Scalar>(n - 1));
    if (sd > 0) {
      s.y_mean = m;
      s.y_scale = sd;
    }
  }
  return s;
}

Matrix Standardizer::transform_x(const Matrix& x) const {
  if (x.cols() != x_mean.size()) throw DimensionError("standardizer: feature count mismatch");
  return ((x.rowwise() - x_mean.transpose()).array().rowwise() / x_scale.transpose().array()).matrix();
}

Vector Standardizer::transform_y(const Vector& y) const { return (y.array() - y_mean) / y_scale; }

int CsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return static_cast<int>(i);
  }
  return -1;
}

int CsvTable::require(std::string_view name) const {
  const int c = column(name);
  if (c < 0) throw SchemaError((source.empty() ? std::string("csv") : source) + ": missing column '" + std::string(name) + "'");
  return c;
}

double CsvTable::number(std::size_t row, int col) const {
  const std::string& f = rows.at(row).at(static_cast<std::size_t>(col));
  double v = 0;
  auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
  if (f.empty() || ec != std::errc() || ptr != f.data() + f.size()) {
    throw SchemaError(source + ": row " + std::to_string(row + 1) + ": non-numeric value '" + f + "' in column " +
                      header[static_cast<std::size_t>(col)]);
  }
  return v;
}

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '"' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '"' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  CsvTable table;
  table.source = path.string();
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(path.string() + ": missing header row");
  table.header = split(line);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split(line);
    if (fields.size() != table.header.size()) {
      throw SchemaError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(table.header.size()) + " fields, got " + std::to_string(fields.size()));
    }
    table.rows.push_back(std::move(fields));
  }
  return table;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace moca
