#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "capsule/augment.hpp"
#include "capsule/capsnet.hpp"
#include "capsule/dataset.hpp"

namespace capsule {

/// Throws std::invalid_argument naming `section.key` for any key not in
/// `allowed`, or if `value` is not an object.
void reject_unknown_keys(const nlohmann::json& value, std::initializer_list<std::string_view> allowed,
                         const std::string& section);

/// True for integers >= 0, whether stored signed (built in code) or
/// unsigned (parsed from text).
inline bool is_non_negative_integer(const nlohmann::json& value) {
  return value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
}

nlohmann::json model_config_to_json(const ModelConfig& config);
/// Missing keys keep the values of `defaults`.
ModelConfig model_config_from_json(const nlohmann::json& value, const ModelConfig& defaults = {});

nlohmann::json augment_policy_to_json(const AugmentPolicy& policy);
AugmentPolicy augment_policy_from_json(const nlohmann::json& value);

nlohmann::json split_spec_to_json(const SplitSpec& spec);
SplitSpec split_spec_from_json(const nlohmann::json& value, const SplitSpec& defaults = {});

} // namespace capsule
