#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "moca/errors.hpp"
#include "moca/harness.hpp"

using namespace moca;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("moca_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

Json tiny_neural_settings() {
  return Json{{"moca", {{"epochs_treatment", 2}, {"epochs_outcome", 2}, {"width", 8}, {"ffn_width", 16},
                        {"head_hidden", 8}, {"gate_hidden", 8}}},
              {"shared_rep", {{"epochs", 2}, {"width", 16}}}};
}

ExperimentConfig small_benchmark() {
  ExperimentConfig c;
  c.scenarios = {"linear"};
  c.n = 40;
  c.replicates = 10;
  c.neural_replicates = 0;
  c.seed = 11;
  c.settings = tiny_neural_settings();
  return c;
}

int run_cli(const std::string& args, std::string* out = nullptr) {
  const fs::path capture = fs::temp_directory_path() / ("moca_cli_stdout_" + std::to_string(::getpid()) + ".txt");
  const std::string cmd = std::string("\"") + MOCA_CLI_PATH + "\" " + args + " >\"" + capture.string() + "\" 2>/dev/null";
  const int status = std::system(cmd.c_str());
  if (out) *out = slurp(capture);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Synthetic files in the IHDP and Dehejia-Wahba layouts.
void write_ihdp(const fs::path& p, Index n, bool binary = true, bool drop_mu1 = false) {
  std::mt19937_64 gen(5);
  std::normal_distribution<double> z;
  std::ofstream out(p);
  out.precision(17);
  out << "treatment,y_factual,y_cfactual,mu0";
  if (!drop_mu1) out << ",mu1";
  for (int j = 1; j <= 25; ++j) out << ",x" << j;
  out << '\n';
  for (Index i = 0; i < n; ++i) {
    const int t = i % 3 == 0 ? 1 : 0;
    std::vector<double> x(25);
    for (double& v : x) v = z(gen);
    const double mu0 = x[0], mu1 = x[0] + 4.0;
    out << (binary ? std::to_string(t) : "0.5") << ',' << (t ? mu1 : mu0) + 0.1 * z(gen) << ','
        << (t ? mu0 : mu1) << ',' << mu0;
    if (!drop_mu1) out << ',' << mu1;
    for (double v : x) out << ',' << v;
    out << '\n';
  }
}

void write_dw(const fs::path& p, Index n) {
  std::mt19937_64 gen(6);
  std::normal_distribution<double> z;
  std::ofstream out(p);
  out << "treated,age,education,black,hispanic,married,nodegree,re74,re75,u74,u75,re78\n";
  for (Index i = 0; i < n; ++i) {
    const int t = i % 4 == 0 ? 1 : 0;
    out << t << ',' << 25 + 5 * z(gen) << ',' << 10 + z(gen) << ',' << (i % 2) << ',' << (i % 5 == 0) << ','
        << (i % 3 == 0) << ',' << (i % 2 == 1) << ',' << 1000 * std::abs(z(gen)) << ',' << 1000 * std::abs(z(gen))
        << ',' << (i % 7 == 0) << ',' << (i % 6 == 0) << ',' << 5000 + 1500 * t + 500 * z(gen) << '\n';
  }
}

}  // namespace

// ---- configuration ---------------------------------------------------------

TEST(Config, DefaultsValidate) {
  const ExperimentConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.methods.size(), 7u);
  EXPECT_EQ(c.replicates_for("ipw"), 50);
  EXPECT_EQ(c.replicates_for("tarnet"), 20);
  EXPECT_EQ(c.replicates_for("moca-oneway"), 20);
}

TEST(Config, NeuralReplicatesZeroMeansAll) {
  ExperimentConfig c;
  c.replicates = 7;
  c.neural_replicates = 0;
  EXPECT_EQ(c.replicates_for("dragonnet"), 7);
  c.neural_replicates = 30;
  EXPECT_EQ(c.replicates_for("dragonnet"), 7);
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = small_benchmark();
  c.methods = {"aipw", "tarnet"};
  const ExperimentConfig back = experiment_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, UnknownKeysAndValuesRejected) {
  Json j = to_json(ExperimentConfig{});
  j["replicats"] = 3;
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);

  j = to_json(ExperimentConfig{});
  j["methods"] = {"ipw", "causal-forest"};
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);

  j = to_json(ExperimentConfig{});
  j["scenarios"] = {"quadratic"};
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);

  j = to_json(ExperimentConfig{});
  j["settings"] = {{"moca", {{"widht", 8}}}};
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);

  j = to_json(ExperimentConfig{});
  j["version"] = 2;
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);

  j = to_json(ExperimentConfig{});
  j.erase("version");
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
}

TEST(Config, LayeringLaterWins) {
  ExperimentConfig c;
  c.settings = {{"shared_rep", {{"epochs", 10}, {"alpha", 0.5}}}, {"dragonnet", {{"epochs", 20}}}};
  c.scenario_overrides = {{"hidden", {{"shared_rep", {{"alpha", 2.0}}}, {"tarnet", {{"epochs", 3}}}}}};
  EXPECT_EQ(shared_rep_settings(c, "linear", "tarnet").epochs, 10);
  EXPECT_EQ(shared_rep_settings(c, "linear", "dragonnet").epochs, 20);
  EXPECT_EQ(shared_rep_settings(c, "hidden", "dragonnet").alpha, 2.0);
  EXPECT_EQ(shared_rep_settings(c, "hidden", "tarnet").epochs, 3);
  EXPECT_EQ(shared_rep_settings(c, "linear", "tarnet").alpha, 0.5);
  EXPECT_TRUE(shared_rep_settings(c, "linear", "dragonnet").propensity_head);
  EXPECT_FALSE(shared_rep_settings(c, "linear", "tarnet").propensity_head);
}

TEST(Config, MethodFixesFeedbackMode) {
  ExperimentConfig c;
  c.settings = {{"moca", {{"mode", "two-way"}}}};
  EXPECT_EQ(moca_settings(c, "linear", "moca-oneway").mode, FeedbackMode::kOneWay);
  EXPECT_EQ(moca_settings(c, "linear", "moca-twoway").mode, FeedbackMode::kTwoWay);
}

TEST(Config, HighdimRidgeOverride) {
  const ExperimentConfig c;
  EXPECT_EQ(classical_settings(c, "highdim", "aipw").ridge_lambda, 1.0);
  EXPECT_EQ(classical_settings(c, "linear", "aipw").ridge_lambda, 1e-6);
}

TEST(Config, DescribeIncludesResolvedDefaults) {
  const Json d = describe_config(ExperimentConfig{});
  ASSERT_TRUE(d.contains("resolved_defaults"));
  for (const std::string& m : method_names()) EXPECT_TRUE(d["resolved_defaults"].contains(m)) << m;
  EXPECT_EQ(d["resolved_defaults"]["moca-oneway"]["width"], 16);
}

// ---- simulate --------------------------------------------------------------

TEST(Simulate, WritesEverySplit) {
  const fs::path dir = scratch("sim");
  ExperimentConfig c;
  c.n = 100;
  c.replicates = 2;
  const auto files = run_simulate(c, dir);
  ASSERT_EQ(files.size(), 6u);
  EXPECT_TRUE(fs::exists(dir / "linear_r0_train.csv"));
  EXPECT_TRUE(fs::exists(dir / "linear_r1_validation.csv"));
  EXPECT_TRUE(fs::exists(dir / "linear_r1_test.csv"));
  for (const fs::path& f : files) EXPECT_EQ(read_csv(f).rows.size(), 100u) << f;
}

TEST(Simulate, RerunIsByteIdentical) {
  const fs::path a = scratch("sim_a"), b = scratch("sim_b");
  ExperimentConfig c;
  c.n = 50;
  c.replicates = 1;
  c.scenarios = {"linear", "hidden"};
  run_simulate(c, a);
  run_simulate(c, b);
  for (const char* f : {"linear_r0_train.csv", "hidden_r0_test.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f));
  EXPECT_NE(slurp(a / "linear_r0_train.csv"), slurp(a / "linear_r0_test.csv"));
}

TEST(Simulate, HighdimHas300Covariates) {
  const fs::path dir = scratch("sim_hd");
  ExperimentConfig c;
  c.scenarios = {"highdim"};
  c.n = 20;
  c.replicates = 1;
  run_simulate(c, dir);
  const CsvTable t = read_csv(dir / "highdim_r0_train.csv");
  const auto xs = std::count_if(t.header.begin(), t.header.end(), [](const std::string& h) { return h[0] == 'x'; });
  EXPECT_EQ(xs, 300);
}

// ---- benchmark -------------------------------------------------------------

TEST(Benchmark, OneRecordPerMethodAndReplicate) {
  const ExperimentConfig c = small_benchmark();
  const auto records = run_benchmark(c);
  ASSERT_EQ(records.size(), 70u);
  for (const ReplicateRecord& r : records) {
    EXPECT_TRUE(r.ok) << r.method << ": " << r.error;
    EXPECT_EQ(r.n, 40);
    EXPECT_EQ(r.cate_bias.has_value(), r.method != "ipw") << r.method;
  }
  const auto summary = summarize_records(records, c);
  ASSERT_EQ(summary.size(), 7u);
  for (const SummaryRow& s : summary) {
    EXPECT_EQ(s.replicates, 10);
    EXPECT_EQ(s.failures, 0);
    EXPECT_GE(s.ate_rmse, std::abs(s.ate_bias.mean) - 1e-12);
  }
}

TEST(Benchmark, NeuralReplicatesCapNeuralMethods) {
  ExperimentConfig c = small_benchmark();
  c.replicates = 4;
  c.neural_replicates = 2;
  c.methods = {"ipw", "tarnet"};
  const auto records = run_benchmark(c);
  EXPECT_EQ(std::count_if(records.begin(), records.end(), [](auto& r) { return r.method == "ipw"; }), 4);
  EXPECT_EQ(std::count_if(records.begin(), records.end(), [](auto& r) { return r.method == "tarnet"; }), 2);
}

TEST(Benchmark, FailuresAreRecordedNotFatal) {
  ExperimentConfig c;
  c.scenarios = {"highdim"};
  c.methods = {"aipw"};
  c.n = 50;
  c.replicates = 2;
  c.scenario_overrides = {{"highdim", {{"classical", {{"ridge_lambda", 0.0}}}}}};
  const auto records = run_benchmark(c);
  ASSERT_EQ(records.size(), 2u);
  for (const ReplicateRecord& r : records) {
    EXPECT_FALSE(r.ok);
    EXPECT_FALSE(r.error.empty());
  }
  const auto summary = summarize_records(records, c);
  ASSERT_EQ(summary.size(), 1u);
  EXPECT_EQ(summary[0].failures, 2);
  EXPECT_EQ(summary[0].replicates, 0);

  const fs::path dir = scratch("fail");
  write_results_csv(dir / "results.csv", records);
  const CsvTable t = read_csv(dir / "results.csv");
  EXPECT_EQ(t.rows[0][static_cast<std::size_t>(t.require("status"))], "failed");
  EXPECT_EQ(t.rows[0][static_cast<std::size_t>(t.require("ate"))], "");
}

TEST(Benchmark, WorkerCountDoesNotChangeOutput) {
  ExperimentConfig c = small_benchmark();
  c.replicates = 3;
  c.methods = {"ipw", "aipw", "xlearner", "moca-oneway", "dragonnet"};
  const fs::path dir = scratch("jobs");
  std::string summaries[2];
  int i = 0;
  for (int jobs : {1, 3}) {
    c.jobs = jobs;
    const auto records = run_benchmark(c);
    write_summary_csv(dir / "summary.csv", summarize_records(records, c));
    summaries[i++] = slurp(dir / "summary.csv");
  }
  EXPECT_EQ(summaries[0], summaries[1]);
}

TEST(Benchmark, ClassicalLinearIsNearlyUnbiased) {
  ExperimentConfig c;
  c.methods = {"aipw", "xlearner"};
  c.n = 1000;
  c.replicates = 10;
  const auto summary = summarize_records(run_benchmark(c), c);
  for (const SummaryRow& s : summary) EXPECT_LT(std::abs(s.ate_bias.mean), 0.1) << s.method;
}

// ---- real data -------------------------------------------------------------

TEST(Real, IhdpLoadsAndKnowsTruth) {
  const fs::path dir = scratch("ihdp");
  write_ihdp(dir / "ihdp.csv", 60);
  const RealData d = load_real_data(dir / "ihdp.csv", RealSchema::kIhdp);
  EXPECT_EQ(d.name, "ihdp");
  EXPECT_EQ(d.data.size(), 60);
  EXPECT_EQ(d.data.features(), 25);
  ASSERT_TRUE(d.true_ate.has_value());
  EXPECT_NEAR(*d.true_ate, 4.0, 1e-12);
}

TEST(Real, MissingColumnIsNamed) {
  const fs::path dir = scratch("ihdp_missing");
  write_ihdp(dir / "ihdp.csv", 10, true, true);
  try {
    load_real_data(dir / "ihdp.csv", RealSchema::kIhdp);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("mu1"), std::string::npos) << e.what();
  }
}

TEST(Real, NonBinaryTreatmentRejected) {
  const fs::path dir = scratch("ihdp_nonbinary");
  write_ihdp(dir / "ihdp.csv", 10, false);
  EXPECT_THROW(load_real_data(dir / "ihdp.csv", RealSchema::kIhdp), DataError);
}

TEST(Real, UnknownSchema) { EXPECT_THROW(parse_real_schema("lalonde"), ConfigError); }

TEST(Real, DehejiaWahbaHasNoBias) {
  const fs::path dir = scratch("dw");
  write_dw(dir / "dw.csv", 80);
  const RealData d = load_real_data(dir / "dw.csv", RealSchema::kDehejiaWahba);
  EXPECT_EQ(d.data.features(), 10);
  EXPECT_FALSE(d.true_ate.has_value());

  ExperimentConfig c;
  c.methods = {"ipw", "aipw", "xlearner"};
  const auto rows = run_real(d, c, 3);
  ASSERT_EQ(rows.size(), 3u);
  for (const RealRow& r : rows) {
    EXPECT_TRUE(r.error.empty()) << r.method << ": " << r.error;
    EXPECT_FALSE(r.bias.has_value());
  }
  EXPECT_EQ(rows[0].runs, 1);
  EXPECT_FALSE(rows[0].pooled.has_value());
  EXPECT_EQ(rows[2].runs, 3);
  ASSERT_TRUE(rows[2].pooled.has_value());
  EXPECT_LE(*rows[2].ci_low, rows[2].ate);

  write_real_csv(dir / "real_dw.csv", rows);
  const CsvTable t = read_csv(dir / "real_dw.csv");
  EXPECT_EQ(t.rows[0][static_cast<std::size_t>(t.require("bias"))], "");
}

TEST(Real, IhdpPooledRunsReportBias) {
  const fs::path dir = scratch("ihdp_run");
  write_ihdp(dir / "ihdp.csv", 90);
  const RealData d = load_real_data(dir / "ihdp.csv", RealSchema::kIhdp);
  ExperimentConfig c;
  c.methods = {"aipw", "tarnet"};
  c.settings = tiny_neural_settings();
  c.influence_ci = true;
  const auto rows = run_real(d, c, 2);
  for (const RealRow& r : rows) {
    EXPECT_TRUE(r.error.empty()) << r.method << ": " << r.error;
    ASSERT_TRUE(r.bias.has_value());
    EXPECT_TRUE(r.ci_low.has_value());
  }
  EXPECT_NEAR(*rows[0].bias, 0.0, 0.5);
  EXPECT_EQ(rows[1].runs, 2);
}

TEST(Real, OneRunCannotBePooled) {
  const fs::path dir = scratch("dw_one");
  write_dw(dir / "dw.csv", 20);
  const RealData d = load_real_data(dir / "dw.csv", RealSchema::kDehejiaWahba);
  EXPECT_THROW(run_real(d, ExperimentConfig{}, 1), UsageError);
}

// ---- pool ------------------------------------------------------------------

TEST(Pool, FixtureAndOrderInvariance) {
  const fs::path dir = scratch("pool");
  spit(dir / "a.csv", "method,tau,u\nm,1,0.5\nm,3,0.5\nz,2,1\nz,2,1\nz,2,1\n");
  spit(dir / "b.csv", "method,tau,u\nz,2,1\nm,3,0.5\nz,2,1\nm,1,0.5\nz,2,1\n");
  const auto rows = run_pool(read_csv(dir / "a.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].method, "m");
  EXPECT_EQ(rows[0].pooled.tau_bar, 2.0);
  EXPECT_EQ(rows[0].pooled.total, 3.5);
  EXPECT_EQ(rows[1].pooled.between, 0.0);

  std::ostringstream a, b;
  write_pool_csv(a, rows);
  write_pool_csv(b, run_pool(read_csv(dir / "b.csv")));
  EXPECT_EQ(a.str(), b.str());
}

TEST(Pool, SchemaAndCountErrors) {
  const fs::path dir = scratch("pool_err");
  spit(dir / "no_u.csv", "method,tau\nm,1\nm,2\n");
  EXPECT_THROW(run_pool(read_csv(dir / "no_u.csv")), SchemaError);
  spit(dir / "single.csv", "method,tau,u\nm,1,0.5\nm,2,0.5\nk,1,1\n");
  EXPECT_THROW(run_pool(read_csv(dir / "single.csv")), UsageError);
  spit(dir / "empty.csv", "method,tau,u\n");
  EXPECT_THROW(run_pool(read_csv(dir / "empty.csv")), UsageError);
  spit(dir / "text.csv", "method,tau,u\nm,one,0.5\nm,2,0.5\n");
  EXPECT_THROW(run_pool(read_csv(dir / "text.csv")), SchemaError);
}

// ---- command line ----------------------------------------------------------

TEST(Cli, PrintConfigIsJson) {
  std::string out;
  ASSERT_EQ(run_cli("print-config --seed 9 --method ipw", &out), 0);
  const Json j = Json::parse(out);
  EXPECT_EQ(j["seed"], 9);
  EXPECT_EQ(j["methods"], Json({"ipw"}));
  EXPECT_TRUE(j.contains("resolved_defaults"));
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli");
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("print-config --method causal-forest"), 2);
  spit(dir / "bad.json", "{\"version\": 1, \"replicats\": 3}");
  EXPECT_EQ(run_cli("print-config --config \"" + (dir / "bad.json").string() + "\""), 2);
  EXPECT_EQ(run_cli("print-config --config \"" + (dir / "absent.json").string() + "\""), 4);

  spit(dir / "no_u.csv", "method,tau\nm,1\nm,2\n");
  EXPECT_EQ(run_cli("pool --input \"" + (dir / "no_u.csv").string() + "\""), 3);
  spit(dir / "one.csv", "method,tau,u\nm,1,0.5\n");
  EXPECT_EQ(run_cli("pool --input \"" + (dir / "one.csv").string() + "\""), 2);
  EXPECT_EQ(run_cli("pool --input \"" + (dir / "absent.csv").string() + "\""), 4);

  write_ihdp(dir / "ihdp.csv", 10, false);
  EXPECT_EQ(run_cli("real --schema ihdp --data \"" + (dir / "ihdp.csv").string() + "\""), 3);
  write_dw(dir / "dw.csv", 20);
  EXPECT_EQ(run_cli("real --schema dw --runs 1 --data \"" + (dir / "dw.csv").string() + "\""), 2);
}

TEST(Cli, PoolWritesStdoutOrFile) {
  const fs::path dir = scratch("cli_pool");
  spit(dir / "runs.csv", "method,tau,u\nm,1,0.5\nm,3,0.5\n");
  std::string out;
  ASSERT_EQ(run_cli("pool --input \"" + (dir / "runs.csv").string() + "\"", &out), 0);
  EXPECT_EQ(out.substr(0, out.find('\n')), "method,runs,tau_bar,within,between,total,ci_low,ci_high");
  ASSERT_EQ(run_cli("pool --input \"" + (dir / "runs.csv").string() + "\" --out \"" + dir.string() + "\""), 0);
  EXPECT_EQ(slurp(dir / "pooled.csv"), out);
}

TEST(Cli, SimulateAndBenchmark) {
  const fs::path dir = scratch("cli_bench");
  ASSERT_EQ(run_cli("simulate --n 30 --replicates 1 --out \"" + dir.string() + "\""), 0);
  EXPECT_TRUE(fs::exists(dir / "linear_r0_train.csv"));

  std::string out;
  ASSERT_EQ(run_cli("benchmark --n 60 --replicates 2 --method ipw --method aipw --out \"" + dir.string() + "\"",
                    &out),
            0);
  EXPECT_EQ(read_csv(dir / "results.csv").rows.size(), 4u);
  EXPECT_EQ(read_csv(dir / "summary.csv").rows.size(), 2u);
  EXPECT_EQ(out, slurp(dir / "summary.csv"));
}
