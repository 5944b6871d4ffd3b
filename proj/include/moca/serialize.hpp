#pragma once

// JSON forms of the hyperparameter structs and of fitted MOCA models.
//
// Model document: {"format": "moca-model", "version": 1, "config": {...},
// "standardizer": {...}, "parameters": [{"name", "rows", "cols", "values"}]}
// with values row-major. Doubles are written in shortest round-trip form, so
// save followed by load reproduces every parameter bit for bit.

#include <filesystem>

#include <json.hpp>

#include "moca/moca_model.hpp"
#include "moca/shared_rep.hpp"

namespace moca {

using Json = nlohmann::ordered_json;

inline constexpr int kModelFormatVersion = 1;

Json to_json(const MocaConfig& c);
/// Applies the keys present in `j` on top of `base`. Unknown keys and
/// wrongly typed values raise ConfigError.
MocaConfig moca_config_from_json(const Json& j, MocaConfig base = {});

Json to_json(const SharedRepConfig& c);
SharedRepConfig shared_rep_config_from_json(const Json& j, SharedRepConfig base = {});

Json to_json(const ParameterStore& store);
/// Overwrites values of the named parameters; SchemaError on any name or
/// shape mismatch.
void load_parameters(const Json& j, ParameterStore& store);

Json to_json(const MocaModel& model);
MocaModel moca_model_from_json(const Json& j);

void save_model(const std::filesystem::path& path, const MocaModel& model);
MocaModel load_model(const std::filesystem::path& path);

/// Keys of `j` must all appear in `allowed`; ConfigError naming the first stray key otherwise.
void require_known_keys(const Json& j, std::initializer_list<std::string_view> allowed, std::string_view context);

}  // namespace moca
