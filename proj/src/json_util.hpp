// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

// Strict JSON readers shared by the config parsers. Errors carry the key path.

#pragma once

#include <set>
#include <string>
#include <type_traits>

#include "json.hpp"
#include "umv2/errors.hpp"

namespace umv2::detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError(path + "." + k + ": unknown key");
  }
}

template <typename V>
void read(const nlohmann::json& j, const std::string& path, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path + "." + key + ": wrong type (" + j.at(key).dump() + ")");
  }
  if constexpr (std::is_integral_v<V>) {
    if (j.at(key).is_number_float() || (std::is_unsigned_v<V> && j.at(key).is_number_integer() &&
                                        !j.at(key).is_number_unsigned())) {
      throw ConfigError(path + "." + key + ": expected a non-negative integer");
    }
  }
}

template <typename E>
void read_enum(const nlohmann::json& j, const std::string& path, const char* key, E& out,
               E (*parse)(const std::string&)) {
  if (!j.contains(key)) return;
  std::string s;
  read(j, path, key, s);
  try {
    out = parse(s);
  } catch (const ConfigError& e) {
    throw ConfigError(path + "." + key + ": " + e.what());
  }
}

}  // namespace umv2::detail
