#pragma once

// Keyed access into parsed configs. Failures carry the dotted key path.

#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "crag/core.hpp"

namespace crag {

inline std::string join_key(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

inline const nlohmann::json& require_key(const nlohmann::json& j, const std::string& key,
                                         const std::string& path) {
  const std::string full = join_key(path, key);
  require(j.is_object(), ErrorCode::ParseError, "config key '" + path + "': expected an object");
  auto it = j.find(key);
  require(it != j.end(), ErrorCode::ParseError, "config key '" + full + "' is missing");
  return *it;
}

template <typename T>
T get_key(const nlohmann::json& j, const std::string& key, const std::string& path) {
  const nlohmann::json& v = require_key(j, key, path);
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::ParseError,
                "config key '" + join_key(path, key) + "' has the wrong type");
  }
}

template <typename T>
T get_key(const nlohmann::json& j, const std::string& key, const std::string& path,
          const T& fallback) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  return get_key<T>(j, key, path);
}

/// Runs `check` and rethrows any invariant failure under the given key.
template <typename F>
void check_key(const std::string& key, F&& check) {
  try {
    check();
  } catch (const Error& e) {
    throw Error(ErrorCode::ParseError, "config key '" + key + "': " + e.what());
  }
}

}  // namespace crag
