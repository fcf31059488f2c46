#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "permgen/common.hpp"
#include "permgen/vocab.hpp"

namespace permgen {

// ---- tokenization ----

/// Lowercase, split on whitespace, detach .,!?;:'" as standalone tokens.
/// Angle brackets and hyphens are NOT split, so a reserved-looking string
/// like "<b-3>" survives as one token and can be rejected downstream.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  static const std::string punct = ".,!?;:'\"";
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (punct.find(static_cast<char>(c)) != std::string::npos) {
      flush();
      out.push_back(std::string(1, static_cast<char>(c)));
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

inline std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

/// Lossy convenience splitter for raw-text import: breaks on . ? !
/// keeping the terminator with its sentence. CLI-only; corpus files are
/// expected to arrive pre-segmented.
inline std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    cur.push_back(c);
    if (c == '.' || c == '?' || c == '!') {
      // trim leading whitespace
      std::size_t b = cur.find_first_not_of(" \t\r\n");
      if (b != std::string::npos) out.push_back(cur.substr(b));
      cur.clear();
    }
  }
  std::size_t b = cur.find_first_not_of(" \t\r\n");
  if (b != std::string::npos) out.push_back(cur.substr(b));
  return out;
}

// ---- corpus records ----

/// Pre-numericalization record: tokenized strings straight from JSONL.
struct RawParagraph {
  std::vector<std::string> input_tokens;
  std::vector<std::vector<std::string>> sentence_tokens;
  int line_no = 0;
};

/// Numericalized training/eval record. X lives in source_tokens, Y in
/// sentences. Reserved ids never appear in either.
struct Paragraph {
  std::vector<int> source_tokens;
  std::vector<std::vector<int>> sentences;
  int T() const { return static_cast<int>(sentences.size()); }
};

struct CorpusStats {
  std::size_t examples = 0;
  double mean_input_tokens = 0.0;
  double mean_output_tokens = 0.0;
  double mean_output_sentences = 0.0;
};

namespace detail {

inline void validate_raw(const RawParagraph& r, const std::string& where) {
  if (r.sentence_tokens.empty()) throw data_error(where + ": no sentences");
  if (static_cast<int>(r.sentence_tokens.size()) > kTmax) {
    throw data_error(where + ": " + std::to_string(r.sentence_tokens.size()) +
                     " sentences exceeds the maximum of " + std::to_string(kTmax));
  }
  for (std::size_t s = 0; s < r.sentence_tokens.size(); ++s) {
    const auto& body = r.sentence_tokens[s];
    if (body.empty()) throw data_error(where + ": sentence " + std::to_string(s + 1) + " is empty");
    if (static_cast<int>(body.size()) > kLmax - 2) {
      throw data_error(where + ": sentence " + std::to_string(s + 1) + " has " +
                       std::to_string(body.size()) + " tokens, limit is " +
                       std::to_string(kLmax - 2));
    }
    for (const auto& tok : body) {
      if (looks_reserved(tok)) {
        throw data_error(where + ": sentence " + std::to_string(s + 1) +
                         " contains reserved token string \"" + tok + "\"");
      }
    }
  }
  for (const auto& tok : r.input_tokens) {
    if (looks_reserved(tok)) {
      throw data_error(where + ": input contains reserved token string \"" + tok + "\"");
    }
  }
}

}  // namespace detail

/// Parse one JSONL record {"input": string | string-list, "sentences":
/// string-list}. String-list inputs are joined with a literal ";" token.
inline RawParagraph parse_record(const std::string& line, int line_no) {
  const std::string where = "line " + std::to_string(line_no);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw data_error(where + ": malformed JSON: " + e.what());
  }
  if (!j.is_object()) throw data_error(where + ": expected a JSON object");
  if (!j.contains("input")) throw data_error(where + ": missing \"input\" field");
  if (!j.contains("sentences")) throw data_error(where + ": missing \"sentences\" field");

  RawParagraph r;
  r.line_no = line_no;
  const auto& input = j["input"];
  if (input.is_string()) {
    r.input_tokens = tokenize(input.get<std::string>());
  } else if (input.is_array()) {
    bool first = true;
    for (const auto& item : input) {
      if (!item.is_string()) throw data_error(where + ": \"input\" array must hold strings");
      if (!first) r.input_tokens.push_back(";");
      first = false;
      auto toks = tokenize(item.get<std::string>());
      r.input_tokens.insert(r.input_tokens.end(), toks.begin(), toks.end());
    }
  } else {
    throw data_error(where + ": \"input\" must be a string or string array");
  }

  const auto& sents = j["sentences"];
  if (!sents.is_array()) throw data_error(where + ": \"sentences\" must be an array");
  for (const auto& s : sents) {
    if (!s.is_string()) throw data_error(where + ": \"sentences\" array must hold strings");
    r.sentence_tokens.push_back(tokenize(s.get<std::string>()));
  }
  detail::validate_raw(r, where);
  return r;
}

inline std::vector<RawParagraph> load_jsonl_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open corpus file: " + path);
  std::vector<RawParagraph> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(parse_record(line, line_no));
  }
  if (out.empty()) throw data_error("corpus file " + path + " holds no records");
  return out;
}

/// Frequency-ordered vocabulary over input and sentence tokens. Ties break
/// lexicographically so two builds over the same corpus are identical.
inline Vocabulary build_vocabulary(const std::vector<RawParagraph>& corpus, int min_freq = 1) {
  if (corpus.empty()) throw data_error("build_vocabulary: empty corpus");
  if (min_freq < 1) throw config_error("build_vocabulary: min_freq must be >= 1");
  std::map<std::string, std::int64_t> freq;
  for (const auto& r : corpus) {
    for (const auto& t : r.input_tokens) ++freq[t];
    for (const auto& s : r.sentence_tokens)
      for (const auto& t : s) ++freq[t];
  }
  std::vector<std::pair<std::string, std::int64_t>> items(freq.begin(), freq.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [tok, n] : items)
    if (n >= min_freq) v.add(tok);
  return v;
}

/// Map a validated raw record onto vocabulary ids. Unknown tokens fall back
/// to <UNK>.
inline Paragraph numericalize(const RawParagraph& r, const Vocabulary& v) {
  Paragraph p;
  p.source_tokens.reserve(r.input_tokens.size());
  for (const auto& t : r.input_tokens) p.source_tokens.push_back(v.id_of(t));
  for (const auto& s : r.sentence_tokens) {
    std::vector<int> ids;
    ids.reserve(s.size());
    for (const auto& t : s) ids.push_back(v.id_of(t));
    p.sentences.push_back(std::move(ids));
  }
  return p;
}

inline std::vector<Paragraph> numericalize_all(const std::vector<RawParagraph>& raw,
                                               const Vocabulary& v) {
  std::vector<Paragraph> out;
  out.reserve(raw.size());
  for (const auto& r : raw) out.push_back(numericalize(r, v));
  return out;
}

inline CorpusStats corpus_stats(const std::vector<Paragraph>& corpus) {
  CorpusStats s;
  s.examples = corpus.size();
  if (corpus.empty()) return s;
  double in_toks = 0, out_toks = 0, out_sents = 0;
  for (const auto& p : corpus) {
    in_toks += static_cast<double>(p.source_tokens.size());
    out_sents += static_cast<double>(p.sentences.size());
    for (const auto& sent : p.sentences) out_toks += static_cast<double>(sent.size());
  }
  s.mean_input_tokens = in_toks / static_cast<double>(corpus.size());
  s.mean_output_tokens = out_toks / static_cast<double>(corpus.size());
  s.mean_output_sentences = out_sents / static_cast<double>(corpus.size());
  return s;
}

}  // namespace permgen
