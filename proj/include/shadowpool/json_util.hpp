#pragma once

#include <json.hpp>

#include "shadowpool/pool.hpp"

namespace shadowpool {

inline nlohmann::ordered_json architecture_to_json(const PoolArchitecture& arch) {
  return nlohmann::ordered_json{{"input_dim", arch.input_dim},
                                {"stem_widths", arch.stem_widths},
                                {"expert_layers", arch.expert_layers},
                                {"experts_per_layer", arch.experts_per_layer},
                                {"expert_widths", arch.expert_widths},
                                {"head_widths", arch.head_widths},
                                {"classes", arch.classes}};
}

inline PoolArchitecture architecture_from_json(const nlohmann::json& j) {
  PoolArchitecture arch;
  arch.input_dim = j.at("input_dim").get<size_t>();
  arch.stem_widths = j.at("stem_widths").get<std::vector<size_t>>();
  arch.expert_layers = j.at("expert_layers").get<size_t>();
  arch.experts_per_layer = j.at("experts_per_layer").get<size_t>();
  arch.expert_widths = j.at("expert_widths").get<std::vector<size_t>>();
  arch.head_widths = j.at("head_widths").get<std::vector<size_t>>();
  arch.classes = j.at("classes").get<size_t>();
  return arch;
}

}  // namespace shadowpool
