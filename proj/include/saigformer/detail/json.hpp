#pragma once

// JSON conversions for library types; pulls in nlohmann/json.

#include <json.hpp>

#include "saigformer/config.hpp"

namespace saig::detail {

nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace saig::detail
