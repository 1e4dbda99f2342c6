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

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace multiunit {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Error taxonomy. Every failure mode surfaced to callers is one of these, so
// tests can match on the exact kind.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/size mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid argument values (empty input, out-of-range id, too-short sequence).
class InputError : public Error {
 public:
  using Error::Error;
};

// A word or character has no entry in the lexicon / mapping table.
class OovError : public Error {
 public:
  OovError(const std::string& word, const std::string& where)
      : Error("out-of-vocabulary item '" + word + "' in " + where), word_(word) {}
  const std::string& word() const { return word_; }

 private:
  std::string word_;
};

// Label sequence cannot be aligned to the lattice (too few frames).
class InfeasibleAlignmentError : public Error {
 public:
  using Error::Error;
};

// Bad or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or mismatched data at runtime (ids, score columns, parallel lists).
class DataError : public Error {
 public:
  using Error::Error;
};

// Corrupt or wrong-version file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Object used in a state it does not support (e.g. optimizer step without grads).
class StateError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Small shared value types.
// ---------------------------------------------------------------------------

using TokenSequence = std::vector<int>;

// T x m acoustic feature frames, row-major.
struct FeatureMatrix {
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  double at(std::size_t t, std::size_t d) const { return values[t * dim + d]; }
  double& at(std::size_t t, std::size_t d) { return values[t * dim + d]; }
};

// ---------------------------------------------------------------------------
// Log-space arithmetic.
// ---------------------------------------------------------------------------

inline double log_sum_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = a > b ? a : b;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double log_sum_exp(double a, double b, double c) {
  return log_sum_exp(log_sum_exp(a, b), c);
}

// ---------------------------------------------------------------------------
// String helpers.
// ---------------------------------------------------------------------------

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split(std::string_view s, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == delim) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

// Split on runs of whitespace; never yields empty tokens.
inline std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t start = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > start) out.emplace_back(s.substr(start, i - start));
  }
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// Shortest round-trippable decimal form of a double.
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("cannot parse '" + s + "' as a number in " + context);
  }
}

inline long long parse_int(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("cannot parse '" + s + "' as an integer in " + context);
  }
}

// ---------------------------------------------------------------------------
// Little-endian binary IO.
// ---------------------------------------------------------------------------

inline void write_raw(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw IoError("write failed");
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_raw(os, &v, 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_raw(os, &v, 8); }
inline void write_f32(std::ostream& os, float v) { write_raw(os, &v, 4); }
inline void write_f64(std::ostream& os, double v) { write_raw(os, &v, 8); }

inline void read_raw(std::istream& is, void* p, std::size_t n, const std::string& what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw FormatError("truncated file while reading " + what);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v;
  read_raw(is, &v, 4, what);
  return v;
}

inline std::uint64_t read_u64(std::istream& is, const std::string& what) {
  std::uint64_t v;
  read_raw(is, &v, 8, what);
  return v;
}

inline float read_f32(std::istream& is, const std::string& what) {
  float v;
  read_raw(is, &v, 4, what);
  return v;
}

inline double read_f64(std::istream& is, const std::string& what) {
  double v;
  read_raw(is, &v, 8, what);
  return v;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << text;
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace multiunit
