#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "permgen/common.hpp"
#include "permgen/corpus.hpp"
#include "permgen/vocab.hpp"

namespace permgen {

// ---- sentence orderings ----

/// A rearrangement of 1..T. Element values are 1-based sentence indices.
struct SentenceOrder {
  std::vector<int> order;

  int T() const { return static_cast<int>(order.size()); }

  bool is_identity() const {
    for (int i = 0; i < T(); ++i)
      if (order[static_cast<std::size_t>(i)] != i + 1) return false;
    return true;
  }

  void validate(int expected_T) const {
    if (T() != expected_T) {
      throw data_error("sentence order has " + std::to_string(T()) + " entries for a paragraph of " +
                       std::to_string(expected_T) + " sentences");
    }
    std::vector<bool> seen(static_cast<std::size_t>(expected_T) + 1, false);
    for (int v : order) {
      if (v < 1 || v > expected_T || seen[static_cast<std::size_t>(v)]) {
        throw data_error("sentence order [" + join_ints(order) + "] is not a rearrangement of 1.." +
                         std::to_string(expected_T));
      }
      seen[static_cast<std::size_t>(v)] = true;
    }
  }
};

inline SentenceOrder identity_order(int T) {
  SentenceOrder o;
  o.order.resize(static_cast<std::size_t>(T));
  std::iota(o.order.begin(), o.order.end(), 1);
  return o;
}

inline void check_T(int T) {
  if (T < 1 || T > kTmax) {
    throw data_error("sentence count " + std::to_string(T) + " outside [1, " +
                     std::to_string(kTmax) + "]");
  }
}

/// All T! orders, lexicographic.
inline std::vector<SentenceOrder> all_orders(int T) {
  check_T(T);
  std::vector<SentenceOrder> out;
  SentenceOrder o = identity_order(T);
  do {
    out.push_back(o);
  } while (std::next_permutation(o.order.begin(), o.order.end()));
  return out;
}

/// Uniform draw over all T! orders (Fisher-Yates).
inline SentenceOrder random_order(int T, Rng& rng) {
  check_T(T);
  SentenceOrder o = identity_order(T);
  for (int i = T - 1; i > 0; --i) {
    const int j = static_cast<int>(rand_below(rng, static_cast<std::uint64_t>(i) + 1));
    std::swap(o.order[static_cast<std::size_t>(i)], o.order[static_cast<std::size_t>(j)]);
  }
  return o;
}

// ---- decoder sequence construction ----

/// Flat decoder-side token sequence with hierarchical positions. global_pos
/// is the sentence index a token belongs to (0 for <BOS>, kTmax+1 for
/// <EOP>); local_pos counts 1.. within each segment, marker tokens included.
struct DecoderSequence {
  std::vector<int> tokens;
  std::vector<int> global_pos;
  std::vector<int> local_pos;
  struct Span {
    int sentence_index;
    int start;  // position of <B-t>
    int end;    // one past <E-t>
  };
  std::vector<Span> segment_spans;

  std::size_t length() const { return tokens.size(); }
};

inline DecoderSequence build_decoder_sequence(const Paragraph& p, const SentenceOrder& pi) {
  check_T(p.T());
  pi.validate(p.T());
  DecoderSequence d;
  std::size_t total = 2;  // <BOS> and <EOP>
  for (const auto& s : p.sentences) total += s.size() + 2;
  d.tokens.reserve(total);
  d.global_pos.reserve(total);
  d.local_pos.reserve(total);

  d.tokens.push_back(kBosId);
  d.global_pos.push_back(0);
  d.local_pos.push_back(0);

  for (int t : pi.order) {
    const auto& body = p.sentences[static_cast<std::size_t>(t - 1)];
    if (static_cast<int>(body.size()) > kLmax - 2) {
      throw data_error("sentence " + std::to_string(t) + " has " + std::to_string(body.size()) +
                       " tokens, limit is " + std::to_string(kLmax - 2));
    }
    DecoderSequence::Span span{t, static_cast<int>(d.tokens.size()), 0};
    int local = 1;
    d.tokens.push_back(begin_id(t));
    d.global_pos.push_back(t);
    d.local_pos.push_back(local++);
    for (int id : body) {
      if (is_reserved_id(id)) {
        throw data_error("reserved id " + std::to_string(id) + " inside sentence " + std::to_string(t));
      }
      d.tokens.push_back(id);
      d.global_pos.push_back(t);
      d.local_pos.push_back(local++);
    }
    d.tokens.push_back(end_id(t));
    d.global_pos.push_back(t);
    d.local_pos.push_back(local);
    span.end = static_cast<int>(d.tokens.size());
    d.segment_spans.push_back(span);
  }

  d.tokens.push_back(kEopId);
  d.global_pos.push_back(kTmax + 1);
  d.local_pos.push_back(1);
  return d;
}

// ---- parsing generated sequences ----

/// One recovered sentence: its declared index and body token ids.
struct ParsedSegment {
  int sentence_index;
  std::vector<int> body;
};

/// Strict grammar walk over a generated or built token list:
///   [<BOS>] (<B-t> body <E-t>)+ [<EOP>]
/// Segments must not nest or interleave; sentence indices must be distinct.
/// Returns segments in the order they appear. Throws grammar_error carrying
/// the zero-based position of the first offending token (input length if the
/// sequence ends mid-segment).
inline std::vector<ParsedSegment> parse_segments(const std::vector<int>& tokens) {
  std::vector<ParsedSegment> out;
  std::vector<bool> seen(static_cast<std::size_t>(kTmax) + 1, false);
  int open = 0;  // sentence index of the open segment, 0 = none
  bool after_eop = false;
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    const int id = tokens[pos];
    if (after_eop) throw grammar_error("token after <EOP>", pos);
    if (id == kBosId) {
      if (pos != 0) throw grammar_error("<BOS> may only open the sequence", pos);
      continue;
    }
    if (id == kPadId) throw grammar_error("<PAD> inside a decoded sequence", pos);
    if (id == kEopId) {
      if (open != 0) throw grammar_error("<EOP> closes sentence " + std::to_string(open) +
                                         " without <E-" + std::to_string(open) + ">", pos);
      after_eop = true;
      continue;
    }
    if (is_begin_id(id)) {
      const int t = begin_index(id);
      if (open != 0) {
        throw grammar_error("<B-" + std::to_string(t) + "> while sentence " + std::to_string(open) +
                            " is still open", pos);
      }
      if (seen[static_cast<std::size_t>(t)]) {
        throw grammar_error("duplicate sentence index " + std::to_string(t), pos);
      }
      seen[static_cast<std::size_t>(t)] = true;
      open = t;
      out.push_back(ParsedSegment{t, {}});
      continue;
    }
    if (is_end_id(id)) {
      const int t = end_index(id);
      if (open == 0) throw grammar_error("<E-" + std::to_string(t) + "> with no open sentence", pos);
      if (t != open) {
        throw grammar_error("<E-" + std::to_string(t) + "> closes sentence " + std::to_string(open), pos);
      }
      open = 0;
      continue;
    }
    // normal token (or <UNK>)
    if (open == 0) throw grammar_error("token outside any sentence segment", pos);
    out.back().body.push_back(id);
  }
  if (open != 0) {
    throw grammar_error("sequence ends with sentence " + std::to_string(open) + " still open",
                        tokens.size());
  }
  return out;
}

/// Bodies sorted by ascending sentence index. Index gaps are allowed; at
/// least one segment is required.
inline std::vector<std::vector<int>> parse_and_reorder(const std::vector<int>& tokens) {
  auto segs = parse_segments(tokens);
  if (segs.empty()) throw grammar_error("no sentence segments", 0);
  std::sort(segs.begin(), segs.end(),
            [](const ParsedSegment& a, const ParsedSegment& b) { return a.sentence_index < b.sentence_index; });
  std::vector<std::vector<int>> out;
  out.reserve(segs.size());
  for (auto& s : segs) out.push_back(std::move(s.body));
  return out;
}

}  // namespace permgen
