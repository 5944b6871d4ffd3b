// moca_cli: simulate | benchmark | real | pool | print-config

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "moca/errors.hpp"
#include "moca/harness.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> jobs;
  std::vector<std::string> scenarios;
  std::vector<std::string> methods;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "Experiment config (JSON)");
  cmd->add_option("--seed", f.seed, "Root seed");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--jobs", f.jobs, "Worker threads");
  cmd->add_option("--scenario", f.scenarios, "Scenario (repeatable)");
  cmd->add_option("--method", f.methods, "Method (repeatable)");
}

moca::ExperimentConfig resolve(const CommonFlags& f) {
  moca::ExperimentConfig c = f.config_path.empty() ? moca::ExperimentConfig{} : moca::load_experiment_config(f.config_path);
  if (f.seed) c.seed = *f.seed;
  if (f.jobs) c.jobs = *f.jobs;
  if (!f.out.empty()) c.output_dir = f.out;
  if (!f.scenarios.empty()) c.scenarios = f.scenarios;
  if (!f.methods.empty()) c.methods = f.methods;
  c.validate();
  return c;
}

int run(int argc, char** argv) {
  CLI::App app{"Modular one-way causal attention: simulation, benchmarks and real-data runs"};
  app.require_subcommand(1);

  CommonFlags sim_f, bench_f, real_f, cfg_f;
  auto* sim = app.add_subcommand("simulate", "Write train/validation/test CSVs per replicate");
  add_common(sim, sim_f);
  std::optional<int> sim_reps;
  std::optional<moca::Index> sim_n;
  sim->add_option("--replicates", sim_reps, "Replicates per scenario");
  sim->add_option("--n", sim_n, "Rows per split");

  auto* bench = app.add_subcommand("benchmark", "Fit every method on every replicate; write results and summary");
  add_common(bench, bench_f);
  std::optional<int> bench_reps, bench_neural;
  std::optional<moca::Index> bench_n;
  bench->add_option("--replicates", bench_reps, "Replicates per scenario");
  bench->add_option("--neural-replicates", bench_neural, "Replicates for neural methods (0: same)");
  bench->add_option("--n", bench_n, "Rows per split");

  auto* real = app.add_subcommand("real", "Estimate the ATE on IHDP or Dehejia-Wahba data with pooled refits");
  add_common(real, real_f);
  std::string data_path, schema;
  int runs = 5;
  real->add_option("--data", data_path, "Input CSV")->required();
  real->add_option("--schema", schema, "ihdp or dw")->required();
  real->add_option("--runs", runs, "Refits per ML method (>= 2)");

  auto* pool = app.add_subcommand("pool", "Rubin-pool per-run estimates (columns method,tau,u)");
  std::string pool_in, pool_out;
  pool->add_option("--input", pool_in, "Per-run CSV")->required();
  pool->add_option("--out", pool_out, "Output directory (stdout when omitted)");

  auto* print = app.add_subcommand("print-config", "Print the effective configuration with resolved defaults");
  add_common(print, cfg_f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (sim->parsed()) {
    moca::ExperimentConfig c = resolve(sim_f);
    if (sim_reps) c.replicates = *sim_reps;
    if (sim_n) c.n = *sim_n;
    const auto files = moca::run_simulate(c, c.output_dir);
    std::cout << "wrote " << files.size() << " files to " << c.output_dir << '\n';
  } else if (bench->parsed()) {
    moca::ExperimentConfig c = resolve(bench_f);
    if (bench_reps) c.replicates = *bench_reps;
    if (bench_neural) c.neural_replicates = *bench_neural;
    if (bench_n) c.n = *bench_n;
    const auto records = moca::run_benchmark(c);
    const auto summary = moca::summarize_records(records, c);
    const std::filesystem::path out = c.output_dir;
    moca::write_results_csv(out / "results.csv", records);
    moca::write_summary_csv(out / "summary.csv", summary);
    std::ifstream in(out / "summary.csv");
    std::cout << in.rdbuf();
  } else if (real->parsed()) {
    moca::ExperimentConfig c = resolve(real_f);
    const moca::RealData data = moca::load_real_data(data_path, moca::parse_real_schema(schema));
    std::cerr << data.name << ": " << data.data.size() << " rows, " << data.data.treated_count() << " treated, "
              << data.data.size() - data.data.treated_count() << " controls\n";
    const auto rows = moca::run_real(data, c, runs);
    const std::filesystem::path path = std::filesystem::path(c.output_dir) / ("real_" + data.name + ".csv");
    moca::write_real_csv(path, rows);
    std::ifstream in(path);
    std::cout << in.rdbuf();
  } else if (pool->parsed()) {
    const auto rows = moca::run_pool(moca::read_csv(pool_in));
    if (pool_out.empty()) {
      moca::write_pool_csv(std::cout, rows);
    } else {
      moca::write_pool_csv(std::filesystem::path(pool_out) / "pooled.csv", rows);
    }
  } else if (print->parsed()) {
    std::cout << moca::describe_config(resolve(cfg_f)).dump(2) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const moca::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const moca::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const moca::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << '\n';
    return 3;
  } catch (const moca::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const moca::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
