#include "moca/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <cmath>
#include <map>
#include <numeric>
#include <thread>

#include "moca/errors.hpp"
#include "moca/rng.hpp"

namespace moca {
namespace {

std::string family_of(std::string_view method) {
  if (method == "ipw" || method == "aipw" || method == "xlearner") return "classical";
  if (method == "moca-oneway" || method == "moca-twoway") return "moca";
  if (method == "tarnet" || method == "dragonnet") return "shared_rep";
  throw ConfigError("unknown method '" + std::string(method) + "'");
}

// settings[family] <- settings[method] <- overrides[scenario][family] <- overrides[scenario][method]
Json resolved_patch(const ExperimentConfig& c, std::string_view scenario, std::string_view method) {
  const std::string family = family_of(method);
  Json patch = Json::object();
  auto apply = [&patch](const Json& section, const std::string& key) {
    if (!section.is_object()) return;
    auto it = section.find(key);
    if (it != section.end()) patch.merge_patch(*it);
  };
  apply(c.settings, family);
  apply(c.settings, std::string(method));
  if (auto it = c.scenario_overrides.find(std::string(scenario)); it != c.scenario_overrides.end()) {
    apply(*it, family);
    apply(*it, std::string(method));
  }
  return patch;
}

std::string cell(const std::optional<Scalar>& v) { return v ? format_double(*v) : std::string(); }

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::vector<Index> rows_where(const Vector& t, int arm) { return arm_rows(t, arm); }

Dataset take(const Dataset& d, const std::vector<Index>& rows) { return d.subset(rows); }

}  // namespace

const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names = {"ipw",         "aipw",   "xlearner", "moca-oneway",
                                                 "moca-twoway", "tarnet", "dragonnet"};
  return names;
}

bool is_neural_method(std::string_view method) { return family_of(method) != "classical"; }

Json to_json(const ClassicalConfig& c) { return Json{{"ridge_lambda", c.ridge_lambda}, {"clip", c.clip}}; }

ClassicalConfig classical_config_from_json(const Json& j, ClassicalConfig c) {
  require_known_keys(j, {"ridge_lambda", "clip"}, "classical config");
  try {
    if (j.contains("ridge_lambda")) c.ridge_lambda = j.at("ridge_lambda").get<Scalar>();
    if (j.contains("clip")) c.clip = j.at("clip").get<Scalar>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("classical config: numeric values expected");
  }
  if (c.ridge_lambda < 0) throw ConfigError("classical config: ridge_lambda must be non-negative");
  if (!(c.clip >= 0 && c.clip < 0.5)) throw ConfigError("classical config: clip must lie in [0, 0.5)");
  return c;
}

Json ExperimentConfig::default_scenario_overrides() {
  return Json{{"highdim", {{"classical", {{"ridge_lambda", 1.0}}}}}};
}

void ExperimentConfig::validate() const {
  if (version != kConfigVersion) {
    throw ConfigError("config version " + std::to_string(version) + " not supported (expected " +
                      std::to_string(kConfigVersion) + ")");
  }
  if (replicates < 1) throw ConfigError("replicates must be at least 1");
  if (neural_replicates < 0) throw ConfigError("neural_replicates must be non-negative");
  if (n < 2) throw ConfigError("n must be at least 2");
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
  if (methods.empty()) throw ConfigError("no methods selected");
  for (const std::string& m : methods) family_of(m);
  for (const std::string& s : scenarios) scenario_by_name(s);
  if (!settings.is_object()) throw ConfigError("'settings' must be an object");
  if (!scenario_overrides.is_object()) throw ConfigError("'scenario_overrides' must be an object");
  auto check_sections = [](const Json& section, const std::string& where) {
    for (auto it = section.begin(); it != section.end(); ++it) {
      const std::string& key = it.key();
      if (key != "classical" && key != "moca" && key != "shared_rep") family_of(key);
      if (!it->is_object()) throw ConfigError(where + "." + key + " must be an object");
    }
  };
  check_sections(settings, "settings");
  for (auto it = scenario_overrides.begin(); it != scenario_overrides.end(); ++it) {
    if (!it->is_object()) throw ConfigError("scenario_overrides." + it.key() + " must be an object");
    check_sections(*it, "scenario_overrides." + it.key());
  }
  // Resolving every combination surfaces bad keys before any work starts.
  for (const std::string& s : scenarios) {
    for (const std::string& m : methods) {
      const std::string family = family_of(m);
      if (family == "classical") classical_settings(*this, s, m);
      if (family == "moca") moca_settings(*this, s, m);
      if (family == "shared_rep") shared_rep_settings(*this, s, m);
    }
  }
}

int ExperimentConfig::replicates_for(std::string_view method) const {
  if (is_neural_method(method) && neural_replicates > 0) return std::min(neural_replicates, replicates);
  return replicates;
}

Json to_json(const ExperimentConfig& c) {
  return Json{{"version", c.version},
              {"scenarios", c.scenarios},
              {"methods", c.methods},
              {"n", c.n},
              {"replicates", c.replicates},
              {"neural_replicates", c.neural_replicates},
              {"seed", c.seed},
              {"jobs", c.jobs},
              {"output_dir", c.output_dir},
              {"redraw_highdim_coefficients", c.redraw_highdim_coefficients},
              {"influence_ci", c.influence_ci},
              {"settings", c.settings},
              {"scenario_overrides", c.scenario_overrides}};
}

ExperimentConfig experiment_config_from_json(const Json& j) {
  require_known_keys(j,
                     {"version", "scenarios", "methods", "n", "replicates", "neural_replicates", "seed", "jobs",
                      "output_dir", "redraw_highdim_coefficients", "influence_ci", "settings", "scenario_overrides"},
                     "experiment config");
  ExperimentConfig c;
  try {
    if (!j.contains("version")) throw ConfigError("experiment config: missing 'version'");
    c.version = j.at("version").get<int>();
    if (j.contains("scenarios")) c.scenarios = j.at("scenarios").get<std::vector<std::string>>();
    if (j.contains("methods")) c.methods = j.at("methods").get<std::vector<std::string>>();
    if (j.contains("n")) c.n = j.at("n").get<Index>();
    if (j.contains("replicates")) c.replicates = j.at("replicates").get<int>();
    if (j.contains("neural_replicates")) c.neural_replicates = j.at("neural_replicates").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("jobs")) c.jobs = j.at("jobs").get<int>();
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("redraw_highdim_coefficients")) {
      c.redraw_highdim_coefficients = j.at("redraw_highdim_coefficients").get<bool>();
    }
    if (j.contains("influence_ci")) c.influence_ci = j.at("influence_ci").get<bool>();
    if (j.contains("settings")) c.settings = j.at("settings");
    if (j.contains("scenario_overrides")) c.scenario_overrides = j.at("scenario_overrides");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

Json describe_config(const ExperimentConfig& c) {
  Json out = to_json(c);
  Json resolved = Json::object();
  for (const std::string& m : method_names()) {
    const std::string family = family_of(m);
    if (family == "classical") resolved[m] = to_json(classical_settings(c, "", m));
    if (family == "moca") resolved[m] = to_json(moca_settings(c, "", m));
    if (family == "shared_rep") resolved[m] = to_json(shared_rep_settings(c, "", m));
  }
  out["resolved_defaults"] = resolved;
  return out;
}

ClassicalConfig classical_settings(const ExperimentConfig& c, std::string_view scenario, std::string_view method) {
  return classical_config_from_json(resolved_patch(c, scenario, method));
}

MocaConfig moca_settings(const ExperimentConfig& c, std::string_view scenario, std::string_view method) {
  MocaConfig base;
  base.mode = method == "moca-twoway" ? FeedbackMode::kTwoWay : FeedbackMode::kOneWay;
  MocaConfig out = moca_config_from_json(resolved_patch(c, scenario, method), base);
  out.mode = base.mode;
  return out;
}

SharedRepConfig shared_rep_settings(const ExperimentConfig& c, std::string_view scenario, std::string_view method) {
  SharedRepConfig out = shared_rep_config_from_json(resolved_patch(c, scenario, method));
  out.propensity_head = method == "dragonnet";
  return out;
}

MethodOutput run_method(std::string_view method, const ExperimentConfig& config, std::string_view scenario,
                        const Dataset& train, const Dataset* validation, const Dataset& eval, std::uint64_t seed) {
  MethodOutput out;
  const std::string family = family_of(method);
  if (family == "classical") {
    const ClassicalConfig cc = classical_settings(config, scenario, method);
    if (method == "xlearner") {
      const XLearner xl = fit_x_learner(train, cc.ridge_lambda, cc.clip);
      out.cate = xl.cate(eval.x);
      out.ate = out.cate.mean();
      return out;
    }
    train.validate();
    const PropensityModel ps = fit_logistic(train.x, train.t, cc.ridge_lambda, cc.clip);
    const Vector e = ps.predict(eval.x);
    if (method == "ipw") {
      out.ate = ipw_ate(eval.t, eval.y, e);
      return out;
    }
    const auto treated = rows_where(train.t, 1);
    const auto control = rows_where(train.t, 0);
    if (treated.empty() || control.empty()) throw DataError("aipw: both arms must be non-empty");
    const Dataset d1 = take(train, treated);
    const Dataset d0 = take(train, control);
    const Vector m0 = fit_ols(d0.x, d0.y, cc.ridge_lambda).predict(eval.x);
    const Vector m1 = fit_ols(d1.x, d1.y, cc.ridge_lambda).predict(eval.x);
    out.ate = aipw_ate(eval.t, eval.y, e, m0, m1);
    out.cate = m1 - m0;
    return out;
  }
  if (family == "moca") {
    MocaConfig mc = moca_settings(config, scenario, method);
    mc.seed = seed;
    const MocaModel model = fit(train, validation, mc);
    EstimateResult r = estimate(model, eval.x);
    out.ate = r.ate;
    out.cate = std::move(r.cate);
    return out;
  }
  SharedRepConfig sc = shared_rep_settings(config, scenario, method);
  sc.seed = seed;
  const SharedRepModel model = fit_shared_rep(train, validation, sc);
  EstimateResult r = estimate(model, eval.x);
  out.ate = r.ate;
  out.cate = std::move(r.cate);
  return out;
}

std::uint64_t replicate_seed(std::uint64_t root, std::string_view scenario, int replicate) {
  return derive_seed(derive_seed(root, "scenario", fnv1a(scenario)), "replicate", static_cast<std::uint64_t>(replicate));
}

ReplicateSplits make_splits(const ExperimentConfig& c, std::string_view scenario, int replicate) {
  const std::uint64_t rs = replicate_seed(c.seed, scenario, replicate);
  SimOptions opt;
  opt.coefficient_seed = derive_seed(c.seed, "highdim-coefficients");
  opt.redraw_coefficients = c.redraw_highdim_coefficients;
  return {generate(scenario, c.n, derive_seed(rs, "train"), opt),
          generate(scenario, c.n, derive_seed(rs, "validation"), opt),
          generate(scenario, c.n, derive_seed(rs, "test"), opt)};
}

std::vector<std::filesystem::path> run_simulate(const ExperimentConfig& c, const std::filesystem::path& out) {
  c.validate();
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  for (const std::string& s : c.scenarios) {
    for (int r = 0; r < c.replicates; ++r) {
      const ReplicateSplits sp = make_splits(c, s, r);
      const std::string stem = s + "_r" + std::to_string(r) + "_";
      for (auto [split, data] : {std::pair{"train", &sp.train}, {"validation", &sp.validation}, {"test", &sp.test}}) {
        const auto path = out / (stem + split + ".csv");
        write_csv(path, *data);
        written.push_back(path);
      }
    }
  }
  return written;
}

std::vector<ReplicateRecord> run_benchmark(const ExperimentConfig& config) {
  config.validate();
  struct Task {
    std::string scenario;
    int replicate;
  };
  std::vector<Task> tasks;
  for (const std::string& s : config.scenarios) {
    for (int r = 0; r < config.replicates; ++r) tasks.push_back({s, r});
  }
  std::vector<std::vector<ReplicateRecord>> results(tasks.size());

  auto run_task = [&](const Task& task) {
    std::vector<ReplicateRecord> records;
    std::optional<ReplicateSplits> splits;
    std::string data_error;
    try {
      splits = make_splits(config, task.scenario, task.replicate);
    } catch (const std::exception& e) {
      data_error = e.what();
    }
    const Scalar truth = true_ate(task.scenario);
    for (const std::string& method : config.methods) {
      if (task.replicate >= config.replicates_for(method)) continue;
      ReplicateRecord rec;
      rec.scenario = task.scenario;
      rec.method = method;
      rec.replicate = task.replicate;
      rec.seed = derive_seed(replicate_seed(config.seed, task.scenario, task.replicate), method);
      rec.n = config.n;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        if (!splits) throw DataError(data_error);
        const MethodOutput out = run_method(method, config, task.scenario, splits->train.data,
                                            &splits->validation.data, splits->test.data, rec.seed);
        if (!std::isfinite(out.ate)) throw NumericError("non-finite ATE estimate");
        rec.ate = out.ate;
        rec.ate_bias = ate_bias(out.ate, truth);
        if (out.cate.size() > 0) {
          rec.cate_bias = (out.cate - splits->test.cate).mean();
          rec.cate_rmse = cate_rmse(out.cate, splits->test.cate);
        }
        rec.ok = true;
      } catch (const std::exception& e) {
        rec.ok = false;
        rec.error = e.what();
      }
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      records.push_back(std::move(rec));
    }
    return records;
  };

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) results[i] = run_task(tasks[i]);
  };
  const int workers = std::max(1, std::min<int>(config.jobs, static_cast<int>(tasks.size())));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  }

  std::vector<ReplicateRecord> all;
  for (auto& r : results) std::move(r.begin(), r.end(), std::back_inserter(all));
  return all;
}

std::vector<SummaryRow> summarize_records(const std::vector<ReplicateRecord>& records, const ExperimentConfig& config) {
  std::vector<SummaryRow> rows;
  for (const std::string& s : config.scenarios) {
    for (const std::string& m : config.methods) {
      SummaryRow row;
      row.scenario = s;
      row.method = m;
      row.n = config.n;
      std::vector<Scalar> bias, cbias, crmse;
      for (const ReplicateRecord& r : records) {
        if (r.scenario != s || r.method != m) continue;
        if (!r.ok) {
          ++row.failures;
          continue;
        }
        bias.push_back(r.ate_bias);
        if (r.cate_bias) cbias.push_back(*r.cate_bias);
        if (r.cate_rmse) crmse.push_back(*r.cate_rmse);
      }
      row.replicates = static_cast<Index>(bias.size());
      if (!bias.empty()) {
        row.ate_bias = summarize(bias);
        row.ate_rmse = rmse(bias, 0.0);
      }
      if (!cbias.empty()) {
        const Summary cs = summarize(cbias);
        row.cate_bias_mean = cs.mean;
        row.cate_bias_sd = cs.sd;
        row.cate_rmse_mean = summarize(crmse).mean;
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void write_results_csv(const std::filesystem::path& path, const std::vector<ReplicateRecord>& records) {
  std::ofstream out = open_out(path);
  out << "scenario,method,replicate,seed,n,status,ate,ate_bias,cate_bias,cate_rmse,seconds,error\n";
  for (const ReplicateRecord& r : records) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << r.scenario << ',' << r.method << ',' << r.replicate << ',' << r.seed << ',' << r.n << ','
        << (r.ok ? "ok" : "failed") << ',' << (r.ok ? format_double(r.ate) : "") << ','
        << (r.ok ? format_double(r.ate_bias) : "") << ',' << cell(r.cate_bias) << ',' << cell(r.cate_rmse) << ','
        << format_double(r.seconds) << ',' << err << '\n';
  }
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows) {
  std::ofstream out = open_out(path);
  out << "scenario,method,n,replicates,ate_bias_mean,ate_bias_median,ate_bias_sd,ate_rmse_mean,cate_bias_mean,"
         "cate_bias_sd,cate_rmse_mean,failures\n";
  for (const SummaryRow& r : rows) {
    const bool any = r.replicates > 0;
    auto num = [any](Scalar v) { return any ? format_double(v) : std::string(); };
    out << r.scenario << ',' << r.method << ',' << r.n << ',' << r.replicates << ',' << num(r.ate_bias.mean) << ','
        << num(r.ate_bias.median) << ',' << num(r.ate_bias.sd) << ',' << num(r.ate_rmse) << ','
        << cell(r.cate_bias_mean) << ',' << cell(r.cate_bias_sd) << ',' << cell(r.cate_rmse_mean) << ','
        << r.failures << '\n';
  }
}

// ---- real data ------------------------------------------------------------

RealSchema parse_real_schema(std::string_view name) {
  if (name == "ihdp") return RealSchema::kIhdp;
  if (name == "dw" || name == "dehejia-wahba") return RealSchema::kDehejiaWahba;
  throw ConfigError("unknown schema '" + std::string(name) + "' (expected ihdp or dw)");
}

RealData load_real_data(const std::filesystem::path& path, RealSchema schema) {
  const CsvTable table = read_csv(path);
  const Index n = static_cast<Index>(table.rows.size());
  RealData out;
  std::vector<int> xcols;
  int tcol = 0, ycol = 0;
  if (schema == RealSchema::kIhdp) {
    out.name = "ihdp";
    tcol = table.require("treatment");
    ycol = table.require("y_factual");
    table.require("y_cfactual");
    const int mu0 = table.require("mu0");
    const int mu1 = table.require("mu1");
    for (int j = 1; j <= 25; ++j) {
      const std::string lower = "x" + std::to_string(j);
      const std::string upper = "X" + std::to_string(j);
      const int c = table.column(lower) >= 0 ? table.column(lower) : table.column(upper);
      if (c < 0) table.require(upper);
      xcols.push_back(c);
    }
    Scalar total = 0;
    for (Index i = 0; i < n; ++i) {
      total += table.number(static_cast<std::size_t>(i), mu1) - table.number(static_cast<std::size_t>(i), mu0);
    }
    if (n > 0) out.true_ate = total / static_cast<Scalar>(n);
  } else {
    out.name = "dw";
    tcol = table.require("treated");
    ycol = table.require("re78");
    for (const char* name : {"age", "education", "black", "hispanic", "married", "nodegree", "re74", "re75", "u74",
                             "u75"}) {
      xcols.push_back(table.require(name));
    }
  }
  if (n < 2) throw DataError(path.string() + ": fewer than two rows");
  Dataset& d = out.data;
  d.x.resize(n, static_cast<Index>(xcols.size()));
  d.t.resize(n);
  d.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    const auto r = static_cast<std::size_t>(i);
    for (std::size_t j = 0; j < xcols.size(); ++j) d.x(i, static_cast<Index>(j)) = table.number(r, xcols[j]);
    d.t(i) = table.number(r, tcol);
    d.y(i) = table.number(r, ycol);
  }
  if (!is_binary(d.t)) throw DataError(path.string() + ": treatment column must be binary (0/1)");
  return out;
}

std::vector<RealRow> run_real(const RealData& data, const ExperimentConfig& config, int runs) {
  if (runs < 2) throw UsageError("pooling needs at least 2 runs (got " + std::to_string(runs) + ")");
  for (const std::string& m : config.methods) family_of(m);
  std::vector<RealRow> rows;
  const Dataset& d = data.data;
  for (const std::string& method : config.methods) {
    RealRow row;
    row.dataset = data.name;
    row.method = method;
    try {
      if (method == "ipw" || method == "aipw") {
        const ClassicalConfig cc = classical_settings(config, data.name, method);
        const PropensityModel ps = fit_logistic(d.x, d.t, cc.ridge_lambda, cc.clip);
        const Vector e = ps.predict(d.x);
        Vector scores;
        if (method == "ipw") {
          scores = (d.t.array() * d.y.array() / e.array() - (1 - d.t.array()) * d.y.array() / (1 - e.array()))
                       .matrix();
        } else {
          const auto treated = rows_where(d.t, 1);
          const auto control = rows_where(d.t, 0);
          if (treated.empty() || control.empty()) throw DataError("aipw: both arms must be non-empty");
          const Dataset d1 = take(d, treated), d0 = take(d, control);
          scores = aipw_scores(d.t, d.y, e, fit_ols(d0.x, d0.y, cc.ridge_lambda).predict(d.x),
                               fit_ols(d1.x, d1.y, cc.ridge_lambda).predict(d.x));
        }
        row.runs = 1;
        row.ate = scores.mean();
        if (config.influence_ci) {
          const Scalar nn = static_cast<Scalar>(scores.size());
          const Scalar se = std::sqrt((scores.array() - row.ate).square().sum() / (nn - 1) / nn);
          row.ci_low = row.ate - kNormalQuantile975 * se;
          row.ci_high = row.ate + kNormalQuantile975 * se;
        }
      } else {
        std::vector<RunEstimate> estimates;
        for (int j = 0; j < runs; ++j) {
          const std::uint64_t seed = derive_seed(config.seed, method, static_cast<std::uint64_t>(j));
          std::vector<Index> order(static_cast<std::size_t>(d.size()));
          std::iota(order.begin(), order.end(), Index{0});
          Rng rng(derive_seed(seed, "split"));
          for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
          const std::size_t cut = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(order.size())));
          const Dataset train = take(d, std::vector<Index>(order.begin(), order.begin() + static_cast<long>(cut)));
          const Dataset valid = take(d, std::vector<Index>(order.begin() + static_cast<long>(cut), order.end()));
          try {
            const MethodOutput out = run_method(method, config, data.name, train, &valid, d, seed);
            estimates.push_back({out.ate, within_run_variance(out.cate)});
          } catch (const std::exception& e) {
            ++row.failures;
            row.error = e.what();
          }
        }
        if (estimates.size() < 2) throw NumericError("fewer than two successful runs: " + row.error);
        row.runs = static_cast<Index>(estimates.size());
        row.pooled = rubin_pool(estimates);
        row.ate = row.pooled->tau_bar;
        row.ci_low = row.pooled->ci_low;
        row.ci_high = row.pooled->ci_high;
      }
      if (data.true_ate) row.bias = row.ate - *data.true_ate;
    } catch (const std::exception& e) {
      row.error = e.what();
      row.runs = 0;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_real_csv(const std::filesystem::path& path, const std::vector<RealRow>& rows) {
  std::ofstream out = open_out(path);
  out << "dataset,method,runs,ate,bias,within,between,total,ci_low,ci_high,failures,error\n";
  for (const RealRow& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    const bool ok = r.runs > 0;
    auto p = [&](Scalar PooledEstimate::*f) { return r.pooled ? format_double((*r.pooled).*f) : std::string(); };
    out << r.dataset << ',' << r.method << ',' << r.runs << ',' << (ok ? format_double(r.ate) : "") << ','
        << cell(r.bias) << ',' << p(&PooledEstimate::within) << ',' << p(&PooledEstimate::between) << ','
        << p(&PooledEstimate::total) << ',' << cell(r.ci_low) << ',' << cell(r.ci_high) << ',' << r.failures << ','
        << err << '\n';
  }
}

std::vector<PoolRow> run_pool(const CsvTable& table) {
  const int mc = table.require("method");
  const int tc = table.require("tau");
  const int uc = table.require("u");
  std::map<std::string, std::vector<RunEstimate>> groups;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    groups[table.rows[i][static_cast<std::size_t>(mc)]].push_back({table.number(i, tc), table.number(i, uc)});
  }
  if (groups.empty()) throw UsageError("pool: at least 2 rows required, got 0");
  std::vector<PoolRow> rows;
  for (const auto& [method, runs] : groups) {
    if (runs.size() < 2) {
      throw UsageError("pool: method '" + method + "' has " + std::to_string(runs.size()) +
                       " row(s); at least 2 required");
    }
    rows.push_back({method, rubin_pool(runs)});
  }
  return rows;
}

void write_pool_csv(const std::filesystem::path& path, const std::vector<PoolRow>& rows) {
  std::ofstream out = open_out(path);
  write_pool_csv(out, rows);
}

void write_pool_csv(std::ostream& out, const std::vector<PoolRow>& rows) {
  out << "method,runs,tau_bar,within,between,total,ci_low,ci_high\n";
  for (const PoolRow& r : rows) {
    const PooledEstimate& p = r.pooled;
    out << r.method << ',' << p.runs << ',' << format_double(p.tau_bar) << ',' << format_double(p.within) << ','
        << format_double(p.between) << ',' << format_double(p.total) << ',' << format_double(p.ci_low) << ','
        << format_double(p.ci_high) << '\n';
  }
}

}  // namespace moca
