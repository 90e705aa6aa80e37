#include "capsule/serialization.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace capsule {

using nlohmann::json;

void reject_unknown_keys(const json& value, std::initializer_list<std::string_view> allowed,
                         const std::string& section) {
  if (!value.is_object()) throw std::invalid_argument(fmt::format("{} must be an object", section));
  for (const auto& [key, _] : value.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw std::invalid_argument(fmt::format("unknown key {}.{}", section, key));
    }
  }
}

namespace {

template <typename T>
void read_field(const json& object, const char* key, T& out, const std::string& section) {
  const auto it = object.find(key);
  if (it == object.end()) return;
  try {
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!is_non_negative_integer(*it)) throw std::invalid_argument("expected a non-negative integer");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw std::invalid_argument("expected true or false");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw std::invalid_argument("expected a number");
    }
    out = it->get<T>();
  } catch (const std::exception& e) {
    throw std::invalid_argument(fmt::format("{}.{}: {}", section, key, e.what()));
  }
}

} // namespace

json model_config_to_json(const ModelConfig& c) {
  return {{"input_side", c.input_side},
          {"conv_filters", c.conv_filters},
          {"conv_kernel", c.conv_kernel},
          {"primary_caps_channels", c.primary_caps_channels},
          {"primary_caps_dim", c.primary_caps_dim},
          {"primary_kernel", c.primary_kernel},
          {"primary_stride", c.primary_stride},
          {"num_classes", c.num_classes},
          {"class_caps_dim", c.class_caps_dim},
          {"routing_iterations", c.routing_iterations},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& value, const ModelConfig& defaults) {
  const std::string section = "model";
  reject_unknown_keys(value,
                      {"input_side", "conv_filters", "conv_kernel", "primary_caps_channels",
                       "primary_caps_dim", "primary_kernel", "primary_stride", "num_classes",
                       "class_caps_dim", "routing_iterations", "seed"},
                      section);
  ModelConfig c = defaults;
  read_field(value, "input_side", c.input_side, section);
  read_field(value, "conv_filters", c.conv_filters, section);
  read_field(value, "conv_kernel", c.conv_kernel, section);
  read_field(value, "primary_caps_channels", c.primary_caps_channels, section);
  read_field(value, "primary_caps_dim", c.primary_caps_dim, section);
  read_field(value, "primary_kernel", c.primary_kernel, section);
  read_field(value, "primary_stride", c.primary_stride, section);
  read_field(value, "num_classes", c.num_classes, section);
  read_field(value, "class_caps_dim", c.class_caps_dim, section);
  read_field(value, "routing_iterations", c.routing_iterations, section);
  read_field(value, "seed", c.seed, section);
  return c;
}

json augment_policy_to_json(const AugmentPolicy& p) {
  return {{"regime", regime_name(p.regime)},
          {"rotation_max_deg", p.rotation_max_deg},
          {"width_shift_frac", p.width_shift_frac},
          {"height_shift_frac", p.height_shift_frac},
          {"shear_frac", p.shear_frac},
          {"zoom_frac", p.zoom_frac},
          {"flip_horizontal", p.flip_horizontal},
          {"flip_vertical", p.flip_vertical}};
}

AugmentPolicy augment_policy_from_json(const json& value) {
  const std::string section = "augment";
  reject_unknown_keys(value,
                      {"regime", "rotation_max_deg", "width_shift_frac", "height_shift_frac",
                       "shear_frac", "zoom_frac", "flip_horizontal", "flip_vertical"},
                      section);
  AugmentPolicy p;
  if (const auto it = value.find("regime"); it != value.end()) {
    if (!it->is_string()) throw std::invalid_argument("augment.regime must be a string");
    p.regime = parse_regime(it->get<std::string>());
  }
  read_field(value, "rotation_max_deg", p.rotation_max_deg, section);
  read_field(value, "width_shift_frac", p.width_shift_frac, section);
  read_field(value, "height_shift_frac", p.height_shift_frac, section);
  read_field(value, "shear_frac", p.shear_frac, section);
  read_field(value, "zoom_frac", p.zoom_frac, section);
  read_field(value, "flip_horizontal", p.flip_horizontal, section);
  read_field(value, "flip_vertical", p.flip_vertical, section);
  p.validate();
  return p;
}

json split_spec_to_json(const SplitSpec& s) {
  return {{"train", s.train_count},
          {"val", s.val_count},
          {"test", s.test_count},
          {"stratified", s.stratified},
          {"seed", s.seed}};
}

SplitSpec split_spec_from_json(const json& value, const SplitSpec& defaults) {
  const std::string section = "split";
  reject_unknown_keys(value, {"train", "val", "test", "stratified", "seed"}, section);
  SplitSpec s = defaults;
  read_field(value, "train", s.train_count, section);
  read_field(value, "val", s.val_count, section);
  read_field(value, "test", s.test_count, section);
  read_field(value, "stratified", s.stratified, section);
  read_field(value, "seed", s.seed, section);
  return s;
}

} // namespace capsule
