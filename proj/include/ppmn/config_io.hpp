#pragma once

#include <initializer_list>
#include <string>

#include "json.hpp"

#include "ppmn/model.hpp"
#include "ppmn/objectives.hpp"
#include "ppmn/scene.hpp"

namespace ppmn {

// JSON mirrors of the config structs. Readers accept partial objects
// (missing keys keep their defaults) but reject unknown keys and wrong
// types with ConfigError.

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const LossConfig& c);
LossConfig loss_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const SceneConfig& c);
SceneConfig scene_config_from_json(const nlohmann::json& j);

// Throws ConfigError naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& where);

}  // namespace ppmn
