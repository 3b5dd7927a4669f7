#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "modalseg/errors.hpp"

namespace modalseg {

using nlohmann::json;

/// Throws ConfigError if j is not an object or has a key outside `allowed`.
inline void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> allowed,
                                std::string_view section) {
  if (!j.is_object()) throw ConfigError(std::string(section) + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(std::string(section) + ": unknown key \"" + key + "\"");
  }
}

/// Reads j[key] into out when present; type errors become ConfigError.
template <class T>
void read_optional(const json& j, const char* key, T& out, std::string_view section) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(section) + "." + key + ": wrong type");
  }
}

}  // namespace modalseg
