#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "permgen/common.hpp"
#include "permgen/corpus.hpp"

namespace permgen {

// ---- bundled fixture corpora ----
// Small enough to memorize on one core, varied enough that sentence content
// is a function of (input, sentence index).

/// Eight fixed three-sentence paragraphs, sentences of at most six tokens,
/// around forty distinct words. Used by the memorization checks.
inline const std::vector<std::string>& toy_overfit_jsonl() {
  static const std::vector<std::string> lines = {
      R"({"input":"cat sun","sentences":["the cat sat .","the sun rose .","it was warm ."]})",
      R"({"input":"dog wind","sentences":["the dog ran .","the wind blew .","it was cold ."]})",
      R"({"input":"bird moon","sentences":["a bird flew home .","the moon rose .","the night was quiet ."]})",
      R"({"input":"fox day","sentences":["the fox slept .","the day was long .","the sun fell ."]})",
      R"({"input":"boat river","sentences":["a boat drifted .","the river was slow .","they came back ."]})",
      R"({"input":"tree garden","sentences":["the tree grew tall .","the garden was green .","a bird sang ."]})",
      R"({"input":"cat dog","sentences":["the cat ran home .","the dog slept .","they were happy ."]})",
      R"({"input":"fox night","sentences":["the moon fell .","the fox ran fast .","the night was cold ."]})",
  };
  return lines;
}

inline std::vector<RawParagraph> toy_overfit_corpus() {
  std::vector<RawParagraph> out;
  int line_no = 0;
  for (const auto& line : toy_overfit_jsonl()) out.push_back(parse_record(line, ++line_no));
  return out;
}

/// Generated compositional corpus: paragraphs of 3..5 template sentences
/// "the <subject> <verb> [<adverb>] ." over disjoint subjects, keyword input
/// listing the subjects. About thirty distinct words total.
inline std::vector<RawParagraph> make_toy_corpus(int n, Rng& rng) {
  if (n < 1) throw config_error("make_toy_corpus: need at least one paragraph");
  static const std::vector<std::string> subjects = {"cat",  "dog",  "bird",   "fox",  "boat", "tree",
                                                    "river", "moon", "sun",   "wind", "garden", "night"};
  static const std::vector<std::string> verbs = {"sat",     "ran",  "flew", "slept", "drifted",
                                                 "grew",    "fell", "rose", "blew",  "sang"};
  static const std::vector<std::string> adverbs = {"slowly", "quietly", "quickly",
                                                   "softly", "gently",  "boldly"};
  std::vector<RawParagraph> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int T = 3 + static_cast<int>(rand_below(rng, 3));
    // distinct subjects per paragraph
    std::vector<int> pick(subjects.size());
    for (std::size_t k = 0; k < pick.size(); ++k) pick[k] = static_cast<int>(k);
    for (std::size_t k = 0; k < static_cast<std::size_t>(T); ++k) {
      const std::size_t j = k + static_cast<std::size_t>(rand_below(rng, pick.size() - k));
      std::swap(pick[k], pick[j]);
    }
    RawParagraph r;
    r.line_no = i + 1;
    std::vector<std::string> keywords;
    for (int t = 0; t < T; ++t) {
      const auto& subj = subjects[static_cast<std::size_t>(pick[static_cast<std::size_t>(t)])];
      const auto& verb = verbs[rand_below(rng, verbs.size())];
      std::vector<std::string> sent = {"the", subj, verb};
      if (rand_below(rng, 2) == 0) sent.push_back(adverbs[rand_below(rng, adverbs.size())]);
      sent.push_back(".");
      r.sentence_tokens.push_back(std::move(sent));
      keywords.push_back(subj);
    }
    for (std::size_t k = 0; k < keywords.size(); ++k) {
      if (k) r.input_tokens.push_back(";");
      r.input_tokens.push_back(keywords[k]);
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Serialize raw paragraphs back to the corpus file format.
inline void write_jsonl(const std::string& path, const std::vector<RawParagraph>& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open file for writing: " + path);
  for (const auto& r : corpus) {
    nlohmann::json j;
    j["input"] = detokenize(r.input_tokens);
    std::vector<std::string> sents;
    for (const auto& s : r.sentence_tokens) sents.push_back(detokenize(s));
    j["sentences"] = sents;
    out << j.dump() << '\n';
  }
  if (!out) throw data_error("short write to " + path);
}

}  // namespace permgen
