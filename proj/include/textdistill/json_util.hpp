// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "textdistill/error.hpp"

namespace textdistill::json_util {

inline void require_object(const nlohmann::json& j, std::string_view section) {
  if (!j.is_object()) throw Error(Errc::InvalidConfig, std::string(section) + " must be a JSON object");
}

/// Strict schemas: any key outside `allowed` is a configuration error.
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                                std::string_view section) {
  require_object(j, section);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw Error(Errc::InvalidConfig, "unknown key '" + it.key() + "' in " + std::string(section));
    }
  }
}

/// Overwrites `out` when `key` is present; type errors become InvalidConfig.
template <class U>
void read(const nlohmann::json& j, const char* key, U& out, std::string_view section) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<U>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string(section) + "." + key + ": " + e.what());
  }
}

}  // namespace textdistill::json_util
