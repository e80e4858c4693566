// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "great/encoder.hpp"

namespace great {

/// Model configuration plus optimizer settings, as stored in config files.
struct RunConfig {
  ModelConfig model;
  double lr = 1e-2;
  std::size_t steps = 2000;
  std::size_t batch_size = 4;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"patch", c.patch},         {"channels", c.channels},
          {"nodes", c.nodes},         {"graph_depth", c.graph_depth},
          {"heads", c.heads},         {"layers", c.layers},
          {"interaction", to_string(c.interaction)},
          {"mlp_ratio", c.mlp_ratio}, {"classes", c.classes},
          {"height", c.height},       {"width", c.width},
          {"in_channels", c.in_channels}, {"seed", c.seed}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = to_json(c.model);
  j["lr"] = c.lr;
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  return j;
}

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    if constexpr (std::is_unsigned_v<T>) {
      const auto& v = j.at(key);
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ConfigError(std::string(key) + " must be a non-negative integer");
      }
    }
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config field \"") + key + "\" has the wrong type");
  }
}

}  // namespace detail

/// Parses a config object; absent keys keep defaults, unknown keys are rejected.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"patch",  "channels", "nodes",     "graph_depth", "heads",
                                           "layers", "interaction", "mlp_ratio", "classes", "height",
                                           "width",  "in_channels", "seed",   "lr",          "steps",
                                           "batch_size"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key \"" + key + "\"");
  }
  RunConfig c;
  ModelConfig& m = c.model;
  detail::read_field(j, "patch", m.patch);
  detail::read_field(j, "channels", m.channels);
  detail::read_field(j, "nodes", m.nodes);
  detail::read_field(j, "graph_depth", m.graph_depth);
  detail::read_field(j, "heads", m.heads);
  detail::read_field(j, "layers", m.layers);
  if (j.contains("interaction")) {
    if (!j.at("interaction").is_string()) throw ConfigError("config field \"interaction\" must be a string");
    m.interaction = parse_interaction(j.at("interaction").get<std::string>());
  }
  detail::read_field(j, "mlp_ratio", m.mlp_ratio);
  detail::read_field(j, "classes", m.classes);
  detail::read_field(j, "height", m.height);
  detail::read_field(j, "width", m.width);
  detail::read_field(j, "in_channels", m.in_channels);
  detail::read_field(j, "seed", m.seed);
  detail::read_field(j, "lr", c.lr);
  detail::read_field(j, "steps", c.steps);
  detail::read_field(j, "batch_size", c.batch_size);
  if (!(c.lr >= 0.0)) throw ConfigError("lr must be non-negative");
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  m.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace great
