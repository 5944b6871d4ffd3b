#include "moca/simgen.hpp"

#include <cmath>
#include <fstream>

#include "moca/errors.hpp"
#include "moca/rng.hpp"

namespace moca {
namespace {

constexpr Index kHighDimFeatures = 300;

const std::vector<Scenario>& scenarios() {
  static const std::vector<Scenario> all = {
      {ScenarioKind::kLinear, "linear", 5, 0},
      {ScenarioKind::kNonlinear, "nonlinear", 5, 0},
      {ScenarioKind::kHidden, "hidden", 5, 1},
      {ScenarioKind::kHiddenMultiU, "hidden-multiU", 5, 3},
      {ScenarioKind::kTDist, "tdist", 5, 0},
      {ScenarioKind::kHighDim, "highdim", kHighDimFeatures, 0},
  };
  return all;
}

UnitMeans linear_means(const Scalar* x) {
  UnitMeans m;
  m.eta = -0.3 + 1.6 * x[0] - 2.0 * x[1] + 1.0 * x[2] + 1.2 * x[3] + 0.8 * x[4];
  m.mu0 = 1.0 + 1.0 * x[0] + 0.5 * x[1] - 0.5 * x[2] + 1.8 * x[3] - 0.2 * x[4];
  m.mu1 = 2.0 + 1.2 * x[0] + 0.3 * x[1] - 0.1 * x[2] + 0.2 * x[3] - 1.6 * x[4];
  m.cate = m.mu1 - m.mu0;
  return m;
}

UnitMeans nonlinear_means(const Scalar* x) {
  UnitMeans m;
  m.eta = -0.3 + 0.6 * x[0] - 2.0 * std::sin(x[1]) + 1.8 * x[2] * x[2] + x[3] * x[4];
  m.mu0 = 1.0 + x[0] + 0.5 * std::sin(x[1]) - 0.5 * x[2] * x[2] + 1.5 * x[3] * x[4];
  m.mu1 = 2.0 + 1.2 * std::cos(x[0]) + 0.8 * x[1] * x[2] - 0.3 * x[3] * x[3] + 0.5 * x[4];
  m.cate = m.mu1 - m.mu0;
  return m;
}

// Shared X part of both hidden scenarios; latent terms are added by the caller.
UnitMeans hidden_means(const Scalar* x) {
  UnitMeans m;
  m.eta = -0.3 + 1.2 * x[0] - 1.0 * x[1] + 0.8 * x[2] + 0.5 * x[3];
  m.mu0 = 1.0 + 1.0 * x[0] + 0.5 * x[1] - 0.5 * x[2] + 1.2 * x[3];
  m.mu1 = 2.0 + 1.0 * x[0] + 0.3 * x[1] - 0.2 * x[2] + 0.8 * x[4];
  m.cate = m.mu1 - m.mu0;
  return m;
}

}  // namespace

Scenario scenario_by_name(std::string_view name) {
  for (const Scenario& s : scenarios()) {
    if (s.name == name) return s;
  }
  throw ConfigError("unknown scenario '" + std::string(name) + "'");
}

const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const Scenario& s : scenarios()) out.push_back(s.name);
    return out;
  }();
  return names;
}

UnitMeans unit_means(const Scenario& sc, std::span<const Scalar> xs, std::span<const Scalar> u, const Matrix& beta) {
  if (static_cast<Index>(xs.size()) != sc.features || static_cast<Index>(u.size()) != sc.latent) {
    throw DimensionError("unit_means: expected " + std::to_string(sc.features) + " covariates and " +
                         std::to_string(sc.latent) + " latent values for " + sc.name);
  }
  const Scalar* x = xs.data();
  UnitMeans m{};
  switch (sc.kind) {
    case ScenarioKind::kLinear:
    case ScenarioKind::kTDist:
      m = linear_means(x);
      break;
    case ScenarioKind::kNonlinear:
      m = nonlinear_means(x);
      break;
    case ScenarioKind::kHidden:
      m = hidden_means(x);
      m.eta += 1.5 * u[0];
      m.mu0 += 3.0 * u[0];
      m.mu1 += 1.5 * u[0];
      break;
    case ScenarioKind::kHiddenMultiU:
      m = hidden_means(x);
      m.eta += 1.5 * u[0] + 1.0 * u[1] - 0.8 * u[2];
      m.mu0 += 3.0 * u[0] + 2.0 * u[1] - 1.0 * u[2];
      m.mu1 += 1.5 * u[0] + 1.0 * u[1] - 0.2 * u[2];
      break;
    case ScenarioKind::kHighDim: {
      if (beta.rows() != sc.features || beta.cols() != 2) throw DimensionError("unit_means: highdim needs a 300 x 2 beta");
      const Eigen::Map<const Vector> row(x, sc.features);
      m.eta = -2.0 + 1.6 * x[0] - 2.2 * x[1] + 3.1 * x[2] + 1.2 * x[3] + 2.1 * x[4];
      m.mu0 = 1.0 + row.dot(beta.col(0));
      m.mu1 = 2.0 + row.dot(beta.col(1));
      m.cate = m.mu1 - m.mu0;
      break;
    }
  }
  return m;
}

Matrix highdim_coefficients(std::uint64_t coefficient_seed) {
  Rng rng(coefficient_seed);
  Matrix beta(kHighDimFeatures, 2);
  for (Index j = 0; j < kHighDimFeatures; ++j) beta(j, 0) = rng.normal(0.0, 0.2);
  for (Index j = 0; j < kHighDimFeatures; ++j) beta(j, 1) = rng.normal(0.0, 0.2);
  return beta;
}

SimulatedDataset generate(std::string_view scenario, Index n, std::uint64_t seed, const SimOptions& options) {
  const Scenario sc = scenario_by_name(scenario);
  if (n < 2) throw ConfigError("generate: n must be at least 2");
  const Index p = sc.features;

  Rng rng(seed);
  Matrix beta;
  if (sc.kind == ScenarioKind::kHighDim) {
    beta = highdim_coefficients(options.redraw_coefficients ? derive_seed(seed, "beta") : options.coefficient_seed);
  }

  SimulatedDataset out;
  out.scenario = sc.name;
  out.seed = seed;
  Dataset& d = out.data;
  d.x.resize(n, p);
  d.t.resize(n);
  d.y.resize(n);
  out.mu0.resize(n);
  out.mu1.resize(n);
  out.y0.resize(n);
  out.y1.resize(n);
  out.cate.resize(n);
  out.propensity.resize(n);

  Scalar u[3] = {0, 0, 0};
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < p; ++j) d.x(i, j) = sc.kind == ScenarioKind::kTDist ? rng.student_t(3) : rng.normal();
    for (Index k = 0; k < sc.latent; ++k) u[k] = rng.normal();
    const UnitMeans m = unit_means(sc, std::span<const Scalar>(&d.x(i, 0), static_cast<std::size_t>(p)),
                                   std::span<const Scalar>(u, static_cast<std::size_t>(sc.latent)), beta);

    const Scalar e0 = rng.normal();
    const Scalar e1 = rng.normal();
    const Scalar ps = expit(m.eta);
    const Scalar t = rng.uniform() < ps ? 1.0 : 0.0;
    out.mu0(i) = m.mu0;
    out.mu1(i) = m.mu1;
    out.y0(i) = m.mu0 + e0;
    out.y1(i) = m.mu1 + e1;
    out.cate(i) = m.cate;
    out.propensity(i) = ps;
    d.t(i) = t;
    d.y(i) = t * out.y1(i) + (1.0 - t) * out.y0(i);
  }
  return out;
}

Scalar true_ate(std::string_view scenario) {
  switch (scenario_by_name(scenario).kind) {
    case ScenarioKind::kNonlinear:
      // E cos X = exp(-1/2), E sin X = 0, E X^2 = 1, E X4 X5 = 0 for X ~ N(0, 1).
      return 1.0 + 1.2 * std::exp(-0.5) - 0.3 + 0.5;
    default:
      return 1.0;
  }
}

void write_csv(const std::filesystem::path& path, const SimulatedDataset& sim, bool truth) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const Dataset& d = sim.data;
  for (Index j = 0; j < d.features(); ++j) out << 'x' << (j + 1) << ',';
  out << "t,y";
  if (truth) out << ",mu0,mu1,cate,ps";
  out << '\n';
  for (Index i = 0; i < d.size(); ++i) {
    for (Index j = 0; j < d.features(); ++j) out << format_double(d.x(i, j)) << ',';
    out << format_double(d.t(i)) << ',' << format_double(d.y(i));
    if (truth) {
      out << ',' << format_double(sim.mu0(i)) << ',' << format_double(sim.mu1(i)) << ','
          << format_double(sim.cate(i)) << ',' << format_double(sim.propensity(i));
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

SimulatedDataset read_simulated_csv(const std::filesystem::path& path) {
  const CsvTable table = read_csv(path);
  std::vector<int> xcols;
  for (int j = 1;; ++j) {
    const int c = table.column("x" + std::to_string(j));
    if (c < 0) break;
    xcols.push_back(c);
  }
  if (xcols.empty()) throw SchemaError(path.string() + ": missing column 'x1'");
  const int tc = table.require("t");
  const int yc = table.require("y");
  const Index n = static_cast<Index>(table.rows.size());
  SimulatedDataset sim;
  Dataset& d = sim.data;
  d.x.resize(n, static_cast<Index>(xcols.size()));
  d.t.resize(n);
  d.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    const auto r = static_cast<std::size_t>(i);
    for (std::size_t j = 0; j < xcols.size(); ++j) d.x(i, static_cast<Index>(j)) = table.number(r, xcols[j]);
    d.t(i) = table.number(r, tc);
    d.y(i) = table.number(r, yc);
  }
  auto optional = [&](const char* name, Vector& v) {
    const int c = table.column(name);
    if (c < 0) return;
    v.resize(n);
    for (Index i = 0; i < n; ++i) v(i) = table.number(static_cast<std::size_t>(i), c);
  };
  optional("mu0", sim.mu0);
  optional("mu1", sim.mu1);
  optional("cate", sim.cate);
  optional("ps", sim.propensity);
  d.validate();
  return sim;
}

}  // namespace moca
