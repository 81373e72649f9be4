#pragma once

#include <string>

#include <json.hpp>

#include "zipmap/errors.hpp"

namespace zipmap {

// j[key] as V, or ConfigError naming "path.key" when it is missing or mistyped.
template <typename V>
V require_key(const nlohmann::json& j, const std::string& key, const std::string& path) {
  const std::string full = path.empty() ? key : path + "." + key;
  if (!j.is_object() || !j.contains(key)) throw ConfigError("missing config key '" + full + "'");
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + full + "' has the wrong type");
  }
}

template <typename V>
V optional_key(const nlohmann::json& j, const std::string& key, const std::string& path, V fallback) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  return require_key<V>(j, key, path);
}

}  // namespace zipmap
