#pragma once

#include "json.hpp"
#include "xmodal/model.hpp"

namespace xmodal {

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace xmodal
