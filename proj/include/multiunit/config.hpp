// Copyright 2026 The multiunit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include "multiunit/base.hpp"

namespace multiunit {

// `key = value` configuration with `#` comments and dotted keys:
//
//   # model geometry
//   model.dim = 64
//   model.taps = phoneme:3:0.1
//
// Later assignments override earlier ones; CLI flags override file values by
// merging on top.
class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse_text(const std::string& text, const std::string& context = "config") {
    KeyValues kv;
    std::size_t lineno = 0;
    for (const std::string& raw : split(text, '\n')) {
      ++lineno;
      std::string line = raw;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(context + " line " + std::to_string(lineno) +
                          ": expected 'key = value', got '" + trim(raw) + "'");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty())
        throw ConfigError(context + " line " + std::to_string(lineno) + ": empty key");
      kv.values_[key] = value;
    }
    return kv;
  }

  static KeyValues parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_text(text, path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  // `other` wins on conflicts.
  void merge(const KeyValues& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing required config key '" + key + "'");
    return it->second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  long long get_int(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return checked_int(it->second, key);
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return checked_double(it->second, key);
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const long long v = checked_int(it->second, key);
    if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative");
    return static_cast<std::uint64_t>(v);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "' must be a boolean, got '" + v + "'");
  }

  std::vector<long long> get_int_list(const std::string& key,
                                      std::vector<long long> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<long long> out;
    for (const std::string& part : split(it->second, ',')) {
      const std::string p = trim(part);
      if (p.empty()) continue;
      out.push_back(checked_int(p, key));
    }
    return out;
  }

  std::vector<double> get_double_list(const std::string& key, std::vector<double> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    for (const std::string& part : split(it->second, ',')) {
      const std::string p = trim(part);
      if (p.empty()) continue;
      out.push_back(checked_double(p, key));
    }
    return out;
  }

  const std::map<std::string, std::string>& all() const { return values_; }

  // Deterministic serialization (sorted keys), parseable by parse_text.
  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  static long long checked_int(const std::string& s, const std::string& key) {
    try {
      return parse_int(s, key);
    } catch (const FormatError&) {
      throw ConfigError("config key '" + key + "' must be an integer, got '" + s + "'");
    }
  }

  static double checked_double(const std::string& s, const std::string& key) {
    try {
      return parse_double(s, key);
    } catch (const FormatError&) {
      throw ConfigError("config key '" + key + "' must be a number, got '" + s + "'");
    }
  }

  std::map<std::string, std::string> values_;
};

// Last-resort seed override: flags beat config beats MULTIUNIT_SEED beats the
// built-in default.
inline std::uint64_t seed_from_env(std::uint64_t fallback) {
  const char* env = std::getenv("MULTIUNIT_SEED");
  if (!env || !*env) return fallback;
  try {
    return static_cast<std::uint64_t>(parse_int(env, "MULTIUNIT_SEED"));
  } catch (const FormatError&) {
    throw ConfigError("MULTIUNIT_SEED must be an integer, got '" + std::string(env) + "'");
  }
}

}  // namespace multiunit
