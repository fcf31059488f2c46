#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace permgen {

// ----------------------------- errors -----------------------------
// Error categories map onto the CLI exit codes: config 1, data/IO 2, numeric 3.

class error : public std::runtime_error {
 public:
  explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

class config_error : public error {
 public:
  explicit config_error(const std::string& msg) : error(msg) {}
};

class data_error : public error {
 public:
  explicit data_error(const std::string& msg) : error(msg) {}
};

// Malformed token sequence (unmatched sentence delimiters etc).
// `position` is the zero-based index of the first offending token.
class grammar_error : public data_error {
 public:
  grammar_error(const std::string& msg, std::size_t position)
      : data_error(msg + " (position " + std::to_string(position) + ")"), position(position) {}
  std::size_t position;
};

class numeric_error : public error {
 public:
  explicit numeric_error(const std::string& msg) : error(msg) {}
};

// Dimension mismatches and API misuse.
class shape_error : public error {
 public:
  explicit shape_error(const std::string& msg) : error(msg) {}
};

// ----------------------------- logging -----------------------------
// Controlled by PERMGEN_LOG={error,info,debug}; default info.

enum class LogLevel : int { error = 0, info = 1, debug = 2 };

inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("PERMGEN_LOG");
    if (env == nullptr) return LogLevel::info;
    std::string_view v(env);
    if (v == "error") return LogLevel::error;
    if (v == "debug") return LogLevel::debug;
    return LogLevel::info;
  }();
  return level;
}

inline void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::info) std::cerr << "[permgen] " << msg << "\n";
}

inline void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::debug) std::cerr << "[permgen:debug] " << msg << "\n";
}

// ----------------------------- rng -----------------------------

using Rng = std::mt19937_64;

// Unbiased integer in [0, n) via rejection. Hand-rolled so that draw
// sequences are identical across standard library implementations.
inline std::uint64_t rand_below(Rng& rng, std::uint64_t n) {
  if (n == 0) throw shape_error("rand_below: n must be positive");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

// Uniform double in [0, 1) with 53 random bits.
inline double rand_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller (no cached spare: one value per two draws,
// keeps the stream layout trivial to reason about).
inline double rand_normal(Rng& rng) {
  double u1 = rand_unit(rng);
  while (u1 <= 0.0) u1 = rand_unit(rng);
  const double u2 = rand_unit(rng);
  constexpr double two_pi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

// ----------------------------- hashing -----------------------------

inline std::uint64_t fnv1a64(const void* bytes, std::size_t len,
                             std::uint64_t seed = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(s.data(), s.size());
}

inline std::string hex_u64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// ----------------------------- small helpers -----------------------------

template <typename T>
std::string join_ints(const std::vector<T>& v, const char* sep = ",") {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) os << sep;
    os << v[i];
  }
  return os.str();
}

}  // namespace permgen
