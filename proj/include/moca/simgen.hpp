#pragma once

// Seeded generators for the six simulation scenarios.
//
// Every scenario draws, per unit and in this order: the covariates, the
// latent confounders (hidden scenarios only), the two outcome noises and the
// treatment uniform. X_j ~ N(0, 1) except tdist (t with 3 dof); Y(t) = mu_t
// + N(0, 1); T ~ Bernoulli(expit(eta)).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moca/dataset.hpp"

namespace moca {

enum class ScenarioKind { kLinear, kNonlinear, kHidden, kHiddenMultiU, kTDist, kHighDim };

struct Scenario {
  ScenarioKind kind;
  std::string name;
  Index features;
  Index latent;  // confounders drawn but not emitted
};

/// ConfigError for unknown names.
Scenario scenario_by_name(std::string_view name);
const std::vector<std::string>& scenario_names();

inline Scalar expit(Scalar x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

struct UnitMeans {
  Scalar eta;  // treatment logit
  Scalar mu0, mu1;
  Scalar cate;  // mu1 - mu0 without latent terms
};

/// Noise-free quantities of one unit. `u` holds the scenario's latent draws
/// (empty outside the hidden scenarios); `beta` is used by highdim only.
UnitMeans unit_means(const Scenario& sc, std::span<const Scalar> x, std::span<const Scalar> u, const Matrix& beta = {});

struct SimOptions {
  /// Seed of the highdim coefficient vectors. The harness derives it from
  /// the root seed so every replicate of an experiment shares one draw.
  std::uint64_t coefficient_seed = 0;
  /// Draw highdim coefficients from the replicate seed instead.
  bool redraw_coefficients = false;
};

struct SimulatedDataset {
  Dataset data;
  /// Conditional means given X and the latent confounders.
  Vector mu0, mu1;
  /// Potential outcomes; y = t*y1 + (1-t)*y0.
  Vector y0, y1;
  /// tau(x) = E[Y(1) - Y(0) | X = x], latent confounders averaged out.
  Vector cate;
  Vector propensity;
  std::string scenario;
  std::uint64_t seed = 0;
};

SimulatedDataset generate(std::string_view scenario, Index n, std::uint64_t seed, const SimOptions& options = {});

/// Population ATE in closed form.
Scalar true_ate(std::string_view scenario);

/// Highdim outcome coefficients (300 x 2: beta0, beta1) for a seed.
Matrix highdim_coefficients(std::uint64_t coefficient_seed);

/// Header x1..xp,t,y followed by mu0,mu1,cate,ps when `truth` is set.
void write_csv(const std::filesystem::path& path, const SimulatedDataset& sim, bool truth = true);

/// Reads x1..xp,t,y (truth columns are optional and filled when present).
SimulatedDataset read_simulated_csv(const std::filesystem::path& path);

}  // namespace moca
