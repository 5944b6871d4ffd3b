#include "moca/serialize.hpp"

#include <fstream>

#include "moca/errors.hpp"

namespace moca {
namespace {

template <typename T>
void read_field(const Json& j, const char* key, T& out, std::string_view context) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string(context) + ": bad value for '" + key + "'");
  }
}

Json matrix_json(const Matrix& m) {
  Json values = Json::array();
  for (Index i = 0; i < m.size(); ++i) values.push_back(m.data()[i]);
  return values;
}

}  // namespace

void require_known_keys(const Json& j, std::initializer_list<std::string_view> allowed, std::string_view context) {
  if (!j.is_object()) throw ConfigError(std::string(context) + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (std::string_view a : allowed) known = known || it.key() == a;
    if (!known) throw ConfigError(std::string(context) + ": unknown key '" + it.key() + "'");
  }
}

Json to_json(const MocaConfig& c) {
  return Json{{"features", c.features},
              {"width", c.width},
              {"heads", c.heads},
              {"depth", c.depth},
              {"ffn_width", c.ffn_width},
              {"gate_temperature", c.gate_temperature},
              {"gate_hidden", c.gate_hidden},
              {"head_hidden", c.head_hidden},
              {"lr_treatment", c.lr_treatment},
              {"lr_outcome", c.lr_outcome},
              {"epochs_treatment", c.epochs_treatment},
              {"epochs_outcome", c.epochs_outcome},
              {"batch_size", c.batch_size},
              {"patience", c.patience},
              {"seed", c.seed},
              {"mode", to_string(c.mode)},
              {"joint_weight", c.joint_weight},
              {"standardize_covariates", c.standardize_covariates},
              {"standardize_outcome", c.standardize_outcome},
              {"track_frozen_treatment", c.track_frozen_treatment}};
}

MocaConfig moca_config_from_json(const Json& j, MocaConfig c) {
  constexpr std::string_view ctx = "moca config";
  require_known_keys(j,
                     {"features", "width", "heads", "depth", "ffn_width", "gate_temperature", "gate_hidden",
                      "head_hidden", "lr_treatment", "lr_outcome", "epochs_treatment", "epochs_outcome", "batch_size",
                      "patience", "seed", "mode", "joint_weight", "standardize_covariates", "standardize_outcome",
                      "track_frozen_treatment"},
                     ctx);
  read_field(j, "features", c.features, ctx);
  read_field(j, "width", c.width, ctx);
  read_field(j, "heads", c.heads, ctx);
  read_field(j, "depth", c.depth, ctx);
  read_field(j, "ffn_width", c.ffn_width, ctx);
  read_field(j, "gate_temperature", c.gate_temperature, ctx);
  read_field(j, "gate_hidden", c.gate_hidden, ctx);
  read_field(j, "head_hidden", c.head_hidden, ctx);
  read_field(j, "lr_treatment", c.lr_treatment, ctx);
  read_field(j, "lr_outcome", c.lr_outcome, ctx);
  read_field(j, "epochs_treatment", c.epochs_treatment, ctx);
  read_field(j, "epochs_outcome", c.epochs_outcome, ctx);
  read_field(j, "batch_size", c.batch_size, ctx);
  read_field(j, "patience", c.patience, ctx);
  read_field(j, "seed", c.seed, ctx);
  if (auto it = j.find("mode"); it != j.end()) {
    if (!it->is_string()) throw ConfigError("moca config: 'mode' must be a string");
    c.mode = parse_feedback_mode(it->get<std::string>());
  }
  read_field(j, "joint_weight", c.joint_weight, ctx);
  read_field(j, "standardize_covariates", c.standardize_covariates, ctx);
  read_field(j, "standardize_outcome", c.standardize_outcome, ctx);
  read_field(j, "track_frozen_treatment", c.track_frozen_treatment, ctx);
  return c;
}

Json to_json(const SharedRepConfig& c) {
  return Json{{"features", c.features},
              {"width", c.width},
              {"depth", c.depth},
              {"head_hidden", c.head_hidden},
              {"propensity_head", c.propensity_head},
              {"alpha", c.alpha},
              {"learning_rate", c.learning_rate},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"patience", c.patience},
              {"seed", c.seed},
              {"standardize_covariates", c.standardize_covariates},
              {"standardize_outcome", c.standardize_outcome}};
}

SharedRepConfig shared_rep_config_from_json(const Json& j, SharedRepConfig c) {
  constexpr std::string_view ctx = "shared-rep config";
  require_known_keys(j,
                     {"features", "width", "depth", "head_hidden", "propensity_head", "alpha", "learning_rate",
                      "epochs", "batch_size", "patience", "seed", "standardize_covariates", "standardize_outcome"},
                     ctx);
  read_field(j, "features", c.features, ctx);
  read_field(j, "width", c.width, ctx);
  read_field(j, "depth", c.depth, ctx);
  read_field(j, "head_hidden", c.head_hidden, ctx);
  read_field(j, "propensity_head", c.propensity_head, ctx);
  read_field(j, "alpha", c.alpha, ctx);
  read_field(j, "learning_rate", c.learning_rate, ctx);
  read_field(j, "epochs", c.epochs, ctx);
  read_field(j, "batch_size", c.batch_size, ctx);
  read_field(j, "patience", c.patience, ctx);
  read_field(j, "seed", c.seed, ctx);
  read_field(j, "standardize_covariates", c.standardize_covariates, ctx);
  read_field(j, "standardize_outcome", c.standardize_outcome, ctx);
  return c;
}

Json to_json(const ParameterStore& store) {
  Json out = Json::array();
  for (const Parameter* p : store.all()) {
    out.push_back(Json{{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()},
                       {"values", matrix_json(p->value)}});
  }
  return out;
}

void load_parameters(const Json& j, ParameterStore& store) {
  if (!j.is_array()) throw SchemaError("model: 'parameters' must be an array");
  if (j.size() != store.size()) {
    throw SchemaError("model: expected " + std::to_string(store.size()) + " parameters, found " +
                      std::to_string(j.size()));
  }
  for (const Json& entry : j) {
    const std::string name = entry.at("name").get<std::string>();
    Parameter* p = store.find(name);
    if (p == nullptr) throw SchemaError("model: unknown parameter '" + name + "'");
    const Index rows = entry.at("rows").get<Index>();
    const Index cols = entry.at("cols").get<Index>();
    const Json& values = entry.at("values");
    if (rows != p->value.rows() || cols != p->value.cols() || static_cast<Index>(values.size()) != rows * cols) {
      throw SchemaError("model: shape mismatch for '" + name + "'");
    }
    for (Index i = 0; i < rows * cols; ++i) p->value.data()[i] = values[static_cast<std::size_t>(i)].get<double>();
  }
}

Json to_json(const MocaModel& model) {
  const Standardizer& s = model.standardizer();
  Json params = to_json(model.treatment().parameters());
  for (const Json& p : to_json(model.outcome().parameters())) params.push_back(p);
  return Json{{"format", "moca-model"},
              {"version", kModelFormatVersion},
              {"config", to_json(model.config())},
              {"standardizer",
               {{"x_mean", matrix_json(s.x_mean)},
                {"x_scale", matrix_json(s.x_scale)},
                {"y_mean", s.y_mean},
                {"y_scale", s.y_scale}}},
              {"parameters", params}};
}

MocaModel moca_model_from_json(const Json& j) {
  try {
    if (j.at("format") != "moca-model") throw SchemaError("model: not a moca-model document");
    if (j.at("version").get<int>() != kModelFormatVersion) {
      throw SchemaError("model: unsupported format version " + j.at("version").dump());
    }
    MocaModel model(moca_config_from_json(j.at("config")));
    const Json& sj = j.at("standardizer");
    Standardizer& s = model.standardizer();
    const Index p = model.config().features;
    if (sj.at("x_mean").size() != static_cast<std::size_t>(p) || sj.at("x_scale").size() != static_cast<std::size_t>(p)) {
      throw SchemaError("model: standardizer length mismatch");
    }
    for (Index i = 0; i < p; ++i) {
      s.x_mean(i) = sj.at("x_mean")[static_cast<std::size_t>(i)].get<double>();
      s.x_scale(i) = sj.at("x_scale")[static_cast<std::size_t>(i)].get<double>();
    }
    s.y_mean = sj.at("y_mean").get<double>();
    s.y_scale = sj.at("y_scale").get<double>();

    const Json& params = j.at("parameters");
    const std::size_t nt = model.treatment().parameters().size();
    if (params.size() != nt + model.outcome().parameters().size()) throw SchemaError("model: parameter count mismatch");
    load_parameters(Json(std::vector<Json>(params.begin(), params.begin() + static_cast<long>(nt))),
                    model.treatment().parameters());
    load_parameters(Json(std::vector<Json>(params.begin() + static_cast<long>(nt), params.end())),
                    model.outcome().parameters());
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("model: malformed document: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const MocaModel& model) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(model).dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

MocaModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  return moca_model_from_json(j);
}

}  // namespace moca
