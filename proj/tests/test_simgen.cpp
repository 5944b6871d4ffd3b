#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dgp_oracle.hpp"
#include "gradcheck.hpp"
#include "moca/errors.hpp"
#include "moca/simgen.hpp"

using namespace moca;
using moca::testing::oracle_moments;
using moca::testing::oracle_unit;

namespace {

Scalar column_variance(const Matrix& x, Index j) {
  const auto c = x.col(j).array();
  return (c - c.mean()).square().sum() / static_cast<Scalar>(x.rows() - 1);
}

}  // namespace

TEST(Simgen, ExpitPlugIn) {
  EXPECT_EQ(expit(0.0), 0.5);
  const Scalar zeros[5] = {0, 0, 0, 0, 0};
  const UnitMeans m = unit_means(scenario_by_name("linear"), zeros, {});
  EXPECT_DOUBLE_EQ(m.eta, -0.3);
  EXPECT_NEAR(expit(m.eta), 0.4256, 1e-4);
  EXPECT_EQ(m.mu0, 1.0);
  EXPECT_EQ(m.mu1, 2.0);
  EXPECT_NEAR(expit(-40.0), std::exp(-40.0), 1e-30);
}

TEST(Simgen, MeansMatchIndependentFormulas) {
  Rng rng(1);
  const Matrix beta = highdim_coefficients(2);
  for (const std::string& name : scenario_names()) {
    const Scenario sc = scenario_by_name(name);
    for (int s = 0; s < 20; ++s) {
      const Matrix x = moca::testing::random_matrix(1, sc.features, rng);
      const Matrix u = moca::testing::random_matrix(1, 3, rng);
      const UnitMeans m = unit_means(sc, std::span<const Scalar>(x.data(), static_cast<std::size_t>(sc.features)),
                                     std::span<const Scalar>(u.data(), static_cast<std::size_t>(sc.latent)), beta);
      const auto o = oracle_unit(name, x.data(), u.data(), &beta);
      EXPECT_NEAR(m.eta, o.eta, 1e-12) << name;
      EXPECT_NEAR(m.mu0, o.mu0, 1e-12) << name;
      EXPECT_NEAR(m.mu1, o.mu1, 1e-12) << name;
    }
  }
}

TEST(Simgen, ClosedFormTrueAte) {
  EXPECT_EQ(true_ate("linear"), 1.0);
  EXPECT_EQ(true_ate("tdist"), 1.0);
  EXPECT_EQ(true_ate("hidden"), 1.0);
  EXPECT_EQ(true_ate("hidden-multiU"), 1.0);
  EXPECT_EQ(true_ate("highdim"), 1.0);
  EXPECT_NEAR(true_ate("nonlinear"), 1 + 1.2 * std::exp(-0.5) + 0.2, 1e-15);
  EXPECT_NEAR(true_ate("nonlinear"), 1.9278, 1e-4);
}

TEST(Simgen, MonteCarloAgreesWithClosedForm) {
  const Matrix beta = highdim_coefficients(3);
  for (const std::string& name : scenario_names()) {
    const auto mc = oracle_moments(name, name == "highdim" ? 20000 : 200000, 4, &beta);
    EXPECT_LT(std::abs(mc.ate - true_ate(name)), 3 * mc.ate_se) << name;
  }
}

TEST(Simgen, ConsistencyIdentityHoldsExactly) {
  for (const std::string& name : scenario_names()) {
    const SimulatedDataset sim = generate(name, 500, 5);
    for (Index i = 0; i < 500; ++i) {
      const Scalar t = sim.data.t(i);
      ASSERT_EQ(sim.data.y(i), t * sim.y1(i) + (1 - t) * sim.y0(i)) << name << " row " << i;
    }
    EXPECT_TRUE(is_binary(sim.data.t));
  }
}

TEST(Simgen, CovariateMoments) {
  const Index n = 100000;
  for (const std::string name : {"linear", "tdist"}) {
    const SimulatedDataset sim = generate(name, n, 6);
    const Scalar target = name == std::string("tdist") ? 3.0 : 1.0;
    for (Index j = 0; j < 5; ++j) {
      EXPECT_LT(std::abs(sim.data.x.col(j).mean()), 4 / std::sqrt(static_cast<Scalar>(n))) << name;
      EXPECT_NEAR(column_variance(sim.data.x, j), target, name == std::string("tdist") ? 0.5 : 0.03) << name;
    }
  }
}

TEST(Simgen, TreatmentRateMatchesOracle) {
  const Index n = 100000;
  for (const std::string name : {"linear", "nonlinear", "hidden", "hidden-multiU", "tdist"}) {
    const SimulatedDataset sim = generate(name, n, 7);
    const auto mc = oracle_moments(name, 400000, 8);
    const Scalar se = std::sqrt(mc.treated * (1 - mc.treated) / n + 0.25 / 400000);
    EXPECT_LT(std::abs(sim.data.t.mean() - mc.treated), 4 * se) << name;
  }
}

TEST(Simgen, SameSeedSameBits) {
  for (const std::string& name : scenario_names()) {
    const SimulatedDataset a = generate(name, 50, 9), b = generate(name, 50, 9);
    EXPECT_EQ(a.data.x, b.data.x);
    EXPECT_EQ(a.data.y, b.data.y);
    EXPECT_EQ(a.data.t, b.data.t);
    EXPECT_NE(generate(name, 50, 10).data.y, a.data.y);
  }
}

TEST(Simgen, HiddenScenariosDropLatentColumns) {
  for (const std::string name : {"hidden", "hidden-multiU"}) {
    const SimulatedDataset sim = generate(name, 200, 11);
    EXPECT_EQ(sim.data.features(), 5);
    // With U set to zero the X part alone misses the recorded propensity.
    const Scenario sc = scenario_by_name(name);
    const std::vector<Scalar> zero(static_cast<std::size_t>(sc.latent), 0.0);
    Index differs = 0;
    for (Index i = 0; i < 200; ++i) {
      const Matrix row = sim.data.x.row(i);
      const UnitMeans m = unit_means(sc, std::span<const Scalar>(row.data(), 5), zero);
      if (std::abs(expit(m.eta) - sim.propensity(i)) > 1e-9) ++differs;
      EXPECT_NEAR(sim.cate(i), m.cate, 1e-12);
    }
    EXPECT_GT(differs, 190);
  }
}

TEST(Simgen, HighDimCoefficients) {
  const SimulatedDataset a = generate("highdim", 20, 12, {.coefficient_seed = 99});
  const SimulatedDataset b = generate("highdim", 20, 13, {.coefficient_seed = 99});
  EXPECT_EQ(a.data.features(), 300);
  // Same beta across replicates: mu1 - mu0 - 1 is linear in x with the same slope.
  const Matrix beta = highdim_coefficients(99);
  const Vector slope = beta.col(1) - beta.col(0);
  EXPECT_LT((a.cate - (a.data.x * slope).array().matrix() - Vector::Ones(20)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((b.cate - (b.data.x * slope).array().matrix() - Vector::Ones(20)).cwiseAbs().maxCoeff(), 1e-12);

  const SimulatedDataset c = generate("highdim", 20, 12, {.coefficient_seed = 99, .redraw_coefficients = true});
  EXPECT_EQ(c.data.x, a.data.x);
  EXPECT_NE(c.cate, a.cate);

  const Scalar sd = std::sqrt(beta.array().square().mean());
  EXPECT_NEAR(sd, 0.2, 0.02);
}

TEST(Simgen, Errors) {
  EXPECT_THROW(generate("quadratic", 10, 1), ConfigError);
  EXPECT_THROW(scenario_by_name(""), ConfigError);
  EXPECT_THROW(generate("linear", 1, 1), ConfigError);
  const Scalar x[3] = {0, 0, 0};
  EXPECT_THROW(unit_means(scenario_by_name("linear"), x, {}), DimensionError);
}

TEST(Simgen, CsvRoundTripIsBitwise) {
  const SimulatedDataset sim = generate("nonlinear", 40, 14);
  const auto path = std::filesystem::temp_directory_path() / "moca_simgen_roundtrip.csv";
  write_csv(path, sim);
  const SimulatedDataset back = read_simulated_csv(path);
  EXPECT_EQ(back.data.x, sim.data.x);
  EXPECT_EQ(back.data.t, sim.data.t);
  EXPECT_EQ(back.data.y, sim.data.y);
  EXPECT_EQ(back.mu0, sim.mu0);
  EXPECT_EQ(back.cate, sim.cate);
  EXPECT_EQ(back.propensity, sim.propensity);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "x1,x2,x3,x4,x5,t,y,mu0,mu1,cate,ps");
  std::filesystem::remove(path);
}
