#pragma once

// Experiment orchestration behind the command-line tool: configuration,
// simulated-data export, replicate benchmarks, real-data runs with pooling.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "moca/baselines.hpp"
#include "moca/metrics.hpp"
#include "moca/moca_model.hpp"
#include "moca/serialize.hpp"
#include "moca/shared_rep.hpp"
#include "moca/simgen.hpp"

namespace moca {

inline constexpr int kConfigVersion = 1;

const std::vector<std::string>& method_names();
bool is_neural_method(std::string_view method);

struct ClassicalConfig {
  Scalar ridge_lambda = 1e-6;
  Scalar clip = kDefaultClip;
};

Json to_json(const ClassicalConfig& c);
ClassicalConfig classical_config_from_json(const Json& j, ClassicalConfig base = {});

/// Method hyperparameters resolve in this order, later entries winning:
/// built-in defaults, settings[family], settings[method],
/// scenario_overrides[scenario][family], scenario_overrides[scenario][method].
/// Families are "classical" (ipw, aipw, xlearner), "moca" (moca-oneway,
/// moca-twoway) and "shared_rep" (tarnet, dragonnet).
struct ExperimentConfig {
  int version = kConfigVersion;
  std::vector<std::string> scenarios{"linear"};
  std::vector<std::string> methods = method_names();
  Index n = 1000;  // per split
  int replicates = 50;
  int neural_replicates = 20;  // 0: same as replicates
  std::uint64_t seed = 1;
  int jobs = 1;
  std::string output_dir = "results";
  bool redraw_highdim_coefficients = false;
  /// Adds Wald intervals from influence-function scores to IPW/AIPW real-data rows.
  bool influence_ci = false;
  Json settings = Json::object();
  Json scenario_overrides = default_scenario_overrides();

  static Json default_scenario_overrides();
  void validate() const;
  int replicates_for(std::string_view method) const;
};

Json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const Json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// Full configuration with every method's resolved default hyperparameters.
Json describe_config(const ExperimentConfig& c);

ClassicalConfig classical_settings(const ExperimentConfig& c, std::string_view scenario, std::string_view method);
MocaConfig moca_settings(const ExperimentConfig& c, std::string_view scenario, std::string_view method);
SharedRepConfig shared_rep_settings(const ExperimentConfig& c, std::string_view scenario, std::string_view method);

struct MethodOutput {
  Scalar ate = 0;
  Vector cate;  // empty for IPW
};

/// Fits `method` and estimates on `eval`. Neural methods use `validation` for
/// early stopping; classical methods ignore it.
MethodOutput run_method(std::string_view method, const ExperimentConfig& config, std::string_view scenario,
                        const Dataset& train, const Dataset* validation, const Dataset& eval, std::uint64_t seed);

struct ReplicateSplits {
  SimulatedDataset train, validation, test;
};

/// Per-replicate data stream: derive_seed(root, scenario, replicate), then one
/// stream per split. Methods never draw from these streams.
std::uint64_t replicate_seed(std::uint64_t root, std::string_view scenario, int replicate);
ReplicateSplits make_splits(const ExperimentConfig& c, std::string_view scenario, int replicate);

/// Writes <out>/<scenario>_r<k>_{train,validation,test}.csv; returns the paths.
std::vector<std::filesystem::path> run_simulate(const ExperimentConfig& c, const std::filesystem::path& out);

struct ReplicateRecord {
  std::string scenario;
  std::string method;
  int replicate = 0;
  std::uint64_t seed = 0;
  Index n = 0;
  bool ok = false;
  std::string error;
  Scalar ate = 0;
  Scalar ate_bias = 0;
  std::optional<Scalar> cate_bias;  // mean(predicted - true CATE)
  std::optional<Scalar> cate_rmse;
  double seconds = 0;
};

struct SummaryRow {
  std::string scenario;
  std::string method;
  Index n = 0;
  Index replicates = 0;  // successful
  Summary ate_bias;
  Scalar ate_rmse = 0;
  std::optional<Scalar> cate_bias_mean, cate_bias_sd, cate_rmse_mean;
  Index failures = 0;
};

/// Runs every (scenario, replicate, method) on `config.jobs` workers. Records
/// come back in (scenario, replicate, method) order whatever the schedule.
std::vector<ReplicateRecord> run_benchmark(const ExperimentConfig& config);
/// Rows in (scenario, method) config order; failed replicates are counted, not summarized.
std::vector<SummaryRow> summarize_records(const std::vector<ReplicateRecord>& records, const ExperimentConfig& config);

void write_results_csv(const std::filesystem::path& path, const std::vector<ReplicateRecord>& records);
void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows);

enum class RealSchema { kIhdp, kDehejiaWahba };
RealSchema parse_real_schema(std::string_view name);

struct RealData {
  std::string name;
  Dataset data;
  std::optional<Scalar> true_ate;  // IHDP: mean(mu1 - mu0)
};

/// Validates column presence (SchemaError naming the column) and binary
/// treatment (DataError).
RealData load_real_data(const std::filesystem::path& path, RealSchema schema);

struct RealRow {
  std::string dataset;
  std::string method;
  Index runs = 0;
  Scalar ate = 0;
  std::optional<Scalar> bias;
  std::optional<PooledEstimate> pooled;
  std::optional<Scalar> ci_low, ci_high;
  Index failures = 0;
  std::string error;
};

/// ML methods are refit `runs` times (seed j, 80/20 train/validation split)
/// and pooled; IPW and AIPW are fit once on all rows. UsageError when runs < 2.
std::vector<RealRow> run_real(const RealData& data, const ExperimentConfig& config, int runs);
void write_real_csv(const std::filesystem::path& path, const std::vector<RealRow>& rows);

struct PoolRow {
  std::string method;
  PooledEstimate pooled;
};

/// Input columns method, tau, u. SchemaError for missing columns, UsageError
/// when a method has fewer than two rows. Rows in sorted method order.
std::vector<PoolRow> run_pool(const CsvTable& table);
void write_pool_csv(const std::filesystem::path& path, const std::vector<PoolRow>& rows);
void write_pool_csv(std::ostream& out, const std::vector<PoolRow>& rows);

}  // namespace moca
