#pragma once

#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "permgen/common.hpp"

namespace permgen {

// ---- special-token registry ----
// Fixed id prefix, independent of the trained vocabulary. Sentence markers
// exist for indices 1..kTmax.

inline constexpr int kTmax = 10;
inline constexpr int kLmax = 64;  // per-sentence budget incl. both markers

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kUnkId = 2;
inline constexpr int kEopId = 3;
inline constexpr int kReservedCount = 4 + 2 * kTmax;  // 24

/// <B-t>, t in 1..kTmax.
inline constexpr int begin_id(int t) { return 3 + t; }
/// <E-t>, t in 1..kTmax.
inline constexpr int end_id(int t) { return 3 + kTmax + t; }

inline constexpr bool is_begin_id(int id) { return id >= begin_id(1) && id <= begin_id(kTmax); }
inline constexpr bool is_end_id(int id) { return id >= end_id(1) && id <= end_id(kTmax); }
inline constexpr bool is_reserved_id(int id) { return id >= 0 && id < kReservedCount; }

inline constexpr int begin_index(int id) { return id - 3; }
inline constexpr int end_index(int id) { return id - 3 - kTmax; }

inline std::string reserved_token_string(int id) {
  switch (id) {
    case kPadId: return "<PAD>";
    case kBosId: return "<BOS>";
    case kUnkId: return "<UNK>";
    case kEopId: return "<EOP>";
    default:
      if (is_begin_id(id)) return "<B-" + std::to_string(begin_index(id)) + ">";
      if (is_end_id(id)) return "<E-" + std::to_string(end_index(id)) + ">";
      throw config_error("reserved_token_string: id " + std::to_string(id) + " is not reserved");
  }
}

/// True if `lowercased` collides with a reserved token string. Tokenization
/// lowercases everything, so the comparison is against lowercase forms.
inline bool looks_reserved(const std::string& lowercased) {
  static const std::vector<std::string> lowered = [] {
    std::vector<std::string> v;
    for (int id = 0; id < kReservedCount; ++id) {
      std::string s = reserved_token_string(id);
      for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      v.push_back(std::move(s));
    }
    return v;
  }();
  for (const auto& s : lowered)
    if (s == lowercased) return true;
  return false;
}

/// Bijective token <-> id map with the reserved prefix always occupying
/// ids [0, kReservedCount). Immutable once built.
class Vocabulary {
 public:
  Vocabulary() {
    for (int id = 0; id < kReservedCount; ++id) push(reserved_token_string(id));
  }

  /// Appends a normal token; id is assigned sequentially. Build-time only.
  int add(const std::string& token) {
    auto it = token_to_id_.find(token);
    if (it != token_to_id_.end()) return it->second;
    return push(token);
  }

  int size() const { return static_cast<int>(id_to_token_.size()); }

  /// Lookup with <UNK> fallback for unknown normal tokens.
  int id_of(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }

  const std::string& token_of(int id) const {
    if (id < 0 || id >= size()) {
      throw data_error("token_of: id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(size()));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return id_to_token_; }

  /// FNV-1a over all token strings; used to pair checkpoints with the
  /// vocabulary they were trained against.
  std::uint64_t hash() const {
    std::uint64_t h = fnv1a64(std::string_view{});
    for (const auto& t : id_to_token_) {
      h = fnv1a64(t.data(), t.size(), h);
      h = fnv1a64("\n", 1, h);
    }
    return h;
  }

  /// One token per line, line number = id. Reserved prefix included so the
  /// file alone reconstructs the full map.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot open vocabulary file for writing: " + path);
    for (const auto& t : id_to_token_) out << t << '\n';
    if (!out) throw data_error("short write to vocabulary file: " + path);
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open vocabulary file: " + path);
    Vocabulary v;
    std::string line;
    int id = 0;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (id < kReservedCount) {
        if (line != v.id_to_token_[static_cast<std::size_t>(id)]) {
          throw data_error("vocabulary file " + path + " line " + std::to_string(id + 1) +
                           ": expected reserved token " + v.id_to_token_[static_cast<std::size_t>(id)] +
                           ", found \"" + line + "\"");
        }
      } else {
        if (line.empty()) throw data_error("vocabulary file " + path + " line " +
                                           std::to_string(id + 1) + ": empty token");
        if (v.contains(line)) throw data_error("vocabulary file " + path + " line " +
                                               std::to_string(id + 1) + ": duplicate token \"" + line + "\"");
        v.push(line);
      }
      ++id;
    }
    if (id < kReservedCount) {
      throw data_error("vocabulary file " + path + " truncated: " + std::to_string(id) +
                       " lines, reserved prefix needs " + std::to_string(kReservedCount));
    }
    return v;
  }

 private:
  int push(const std::string& token) {
    const int id = size();
    token_to_id_.emplace(token, id);
    id_to_token_.push_back(token);
    return id;
  }

  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

}  // namespace permgen
