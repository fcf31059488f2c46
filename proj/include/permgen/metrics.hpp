#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "permgen/common.hpp"

namespace permgen {

/// Metrics consume pre-tokenized plain strings; they know nothing about
/// vocabularies or models.
using TokenList = std::vector<std::string>;

struct HypothesisGroup {
  std::vector<TokenList> hypotheses;  // K candidates, ranked
  TokenList reference;
};
using HypothesisSet = std::vector<HypothesisGroup>;

struct MetricReport {
  std::map<std::string, double> scalars;
  std::vector<std::map<std::string, double>> per_source;
  std::map<std::string, std::string> config;
};

namespace detail {

inline void check_order(int N) {
  if (N < 1 || N > 4) throw config_error("BLEU order must be in {1..4}, got " + std::to_string(N));
}

/// k-grams as joined keys; '\x1f' cannot occur inside a token.
inline std::map<std::string, std::int64_t> ngram_counts(const TokenList& toks, int k) {
  std::map<std::string, std::int64_t> counts;
  if (k < 1 || static_cast<std::size_t>(k) > toks.size()) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(k) <= toks.size(); ++i) {
    std::string key = toks[i];
    for (int j = 1; j < k; ++j) {
      key += '\x1f';
      key += toks[i + static_cast<std::size_t>(j)];
    }
    counts[key] += 1;
  }
  return counts;
}

inline std::int64_t ngram_total(const TokenList& toks, int k) {
  return static_cast<std::int64_t>(toks.size()) >= k
             ? static_cast<std::int64_t>(toks.size()) - k + 1
             : 0;
}

struct PrecisionTally {
  std::int64_t matched = 0;
  std::int64_t total = 0;
};

/// Clipped n-gram matches of hyp against one or more references
/// (multi-reference clipping takes the per-gram maximum across references).
inline PrecisionTally clipped_matches(const TokenList& hyp, const std::vector<TokenList>& refs, int n) {
  PrecisionTally t;
  t.total = ngram_total(hyp, n);
  auto hyp_counts = ngram_counts(hyp, n);
  std::map<std::string, std::int64_t> ref_max;
  for (const auto& ref : refs) {
    for (const auto& [gram, c] : ngram_counts(ref, n)) {
      auto& slot = ref_max[gram];
      slot = std::max(slot, c);
    }
  }
  for (const auto& [gram, c] : hyp_counts) {
    auto it = ref_max.find(gram);
    if (it != ref_max.end()) t.matched += std::min(c, it->second);
  }
  return t;
}

inline double brevity_penalty(double c, double r) {
  if (c <= 0.0) return 0.0;
  return c >= r ? 1.0 : std::exp(1.0 - r / c);
}

/// Effective reference length: closest to the hypothesis length, ties toward
/// the shorter reference.
inline std::int64_t effective_ref_len(std::int64_t c, const std::vector<TokenList>& refs) {
  std::int64_t best = static_cast<std::int64_t>(refs.front().size());
  for (const auto& ref : refs) {
    const auto len = static_cast<std::int64_t>(ref.size());
    const auto d_new = std::abs(len - c), d_old = std::abs(best - c);
    if (d_new < d_old || (d_new == d_old && len < best)) best = len;
  }
  return best;
}

inline double sentence_bleu_multi(const TokenList& hyp, const std::vector<TokenList>& refs, int N,
                                  bool add_one_smoothing) {
  check_order(N);
  if (hyp.empty()) return 0.0;  // convention
  double log_sum = 0.0;
  for (int n = 1; n <= N; ++n) {
    const auto tally = clipped_matches(hyp, refs, n);
    double p;
    if (tally.matched > 0) {
      p = static_cast<double>(tally.matched) / static_cast<double>(tally.total);
    } else if (add_one_smoothing) {
      p = static_cast<double>(tally.matched + 1) / static_cast<double>(tally.total + 1);
    } else {
      return 0.0;
    }
    log_sum += std::log(p);
  }
  const auto c = static_cast<std::int64_t>(hyp.size());
  const auto r = effective_ref_len(c, refs);
  return brevity_penalty(static_cast<double>(c), static_cast<double>(r)) * std::exp(log_sum / N);
}

}  // namespace detail

// ---- accuracy ----

/// Corpus-level BLEU-N: modified n-gram precisions aggregated over the whole
/// corpus before the geometric mean, times the brevity penalty.
inline double bleu_corpus(const std::vector<TokenList>& hyps, const std::vector<TokenList>& refs, int N) {
  detail::check_order(N);
  if (hyps.empty()) throw data_error("bleu_corpus: empty corpus");
  if (hyps.size() != refs.size()) {
    throw data_error("bleu_corpus: " + std::to_string(hyps.size()) + " hypotheses vs " +
                     std::to_string(refs.size()) + " references");
  }
  double log_sum = 0.0;
  for (int n = 1; n <= N; ++n) {
    std::int64_t matched = 0, total = 0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const auto tally = detail::clipped_matches(hyps[i], {refs[i]}, n);
      matched += tally.matched;
      total += tally.total;
    }
    if (total == 0) continue;  // no n-gram slots at this order: carries no information
    if (matched == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
  }
  std::int64_t c = 0, r = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    c += static_cast<std::int64_t>(hyps[i].size());
    r += static_cast<std::int64_t>(refs[i].size());
  }
  return detail::brevity_penalty(static_cast<double>(c), static_cast<double>(r)) * std::exp(log_sum / N);
}

/// Sentence-level BLEU-N with add-one smoothing on zero-count precisions.
/// An empty hypothesis scores 0 by convention.
inline double bleu_sentence(const TokenList& hyp, const TokenList& ref, int N,
                            bool add_one_smoothing = true) {
  return detail::sentence_bleu_multi(hyp, {ref}, N, add_one_smoothing);
}

/// Per source, keep the hypothesis with the best sentence-level BLEU-N (ties
/// to the earlier, i.e. higher-ranked, candidate), then score the kept ones
/// as a corpus.
inline double oracle_metric(const HypothesisSet& groups, int N) {
  detail::check_order(N);
  if (groups.empty()) throw data_error("oracle_metric: empty corpus");
  std::vector<TokenList> picked, refs;
  for (const auto& g : groups) {
    if (g.hypotheses.empty()) throw data_error("oracle_metric: group with no hypotheses");
    std::size_t best = 0;
    double best_score = bleu_sentence(g.hypotheses[0], g.reference, N);
    for (std::size_t i = 1; i < g.hypotheses.size(); ++i) {
      const double s = bleu_sentence(g.hypotheses[i], g.reference, N);
      if (s > best_score) {
        best = i;
        best_score = s;
      }
    }
    picked.push_back(g.hypotheses[best]);
    refs.push_back(g.reference);
  }
  return bleu_corpus(picked, refs, N);
}

// ---- diversity ----

/// Unique k-grams over total k-grams, pooled across all texts.
inline double distinct_k(const std::vector<TokenList>& texts, int k) {
  if (k < 1) throw config_error("distinct_k: k must be >= 1");
  std::set<std::string> unique;
  std::int64_t total = 0;
  for (const auto& t : texts) {
    for (const auto& [gram, c] : detail::ngram_counts(t, k)) {
      unique.insert(gram);
      total += c;
    }
  }
  if (total == 0) return 0.0;  // convention
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

/// Shannon entropy of the pooled empirical k-gram distribution, in bits.
inline double entropy_k(const std::vector<TokenList>& texts, int k) {
  if (k < 1) throw config_error("entropy_k: k must be >= 1");
  std::map<std::string, std::int64_t> freq;
  std::int64_t total = 0;
  for (const auto& t : texts) {
    for (const auto& [gram, c] : detail::ngram_counts(t, k)) {
      freq[gram] += c;
      total += c;
    }
  }
  if (total == 0) return 0.0;  // convention
  double h = 0.0;
  for (const auto& [gram, c] : freq) {
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log2(p);
  }
  return h;
}

/// Mean sentence BLEU-N over ordered hypothesis pairs (i, j), i != j; lower
/// means more diverse. Undefined below two hypotheses: reported as absent.
/// `one_vs_rest` scores each hypothesis against all the others jointly
/// (multi-reference clipping) instead of pair by pair.
inline std::optional<double> self_bleu(const std::vector<TokenList>& hyps, int N,
                                       bool one_vs_rest = false) {
  detail::check_order(N);
  if (hyps.size() < 2) return std::nullopt;
  double sum = 0.0;
  std::int64_t pairs = 0;
  if (one_vs_rest) {
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      std::vector<TokenList> rest;
      for (std::size_t j = 0; j < hyps.size(); ++j)
        if (j != i) rest.push_back(hyps[j]);
      sum += detail::sentence_bleu_multi(hyps[i], rest, N, true);
      pairs += 1;
    }
  } else {
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      for (std::size_t j = 0; j < hyps.size(); ++j) {
        if (i == j) continue;
        sum += bleu_sentence(hyps[i], hyps[j], N);
        pairs += 1;
      }
    }
  }
  return sum / static_cast<double>(pairs);
}

// ---- aggregate report ----

/// Full accuracy + diversity report over a candidate corpus: Top-1 BLEU-1..4,
/// Oracle BLEU-4, Distinct-2/3, Entropy-1..4, and Self-BLEU-3/4 (when K >= 2,
/// averaged over sources).
inline MetricReport evaluate_hypotheses(const HypothesisSet& set, bool self_one_vs_rest = false) {
  if (set.empty()) throw data_error("evaluate_hypotheses: empty corpus");
  const std::size_t K = set.front().hypotheses.size();
  if (K == 0) throw data_error("evaluate_hypotheses: group with no hypotheses");
  for (const auto& g : set) {
    if (g.hypotheses.size() != K) {
      throw data_error("evaluate_hypotheses: candidate counts differ across sources (" +
                       std::to_string(K) + " vs " + std::to_string(g.hypotheses.size()) + ")");
    }
  }

  MetricReport report;
  std::vector<TokenList> top1, refs, pooled;
  for (const auto& g : set) {
    top1.push_back(g.hypotheses.front());
    refs.push_back(g.reference);
    for (const auto& h : g.hypotheses) pooled.push_back(h);
  }

  for (int n = 1; n <= 4; ++n) {
    report.scalars["bleu_" + std::to_string(n)] = bleu_corpus(top1, refs, n);
  }
  report.scalars["oracle_bleu_4"] = oracle_metric(set, 4);
  report.scalars["distinct_2"] = distinct_k(pooled, 2);
  report.scalars["distinct_3"] = distinct_k(pooled, 3);
  for (int n = 1; n <= 4; ++n) {
    report.scalars["entropy_" + std::to_string(n)] = entropy_k(pooled, n);
  }
  if (K >= 2) {
    for (int n : {3, 4}) {
      double sum = 0.0;
      for (const auto& g : set) sum += *self_bleu(g.hypotheses, n, self_one_vs_rest);
      report.scalars["self_bleu_" + std::to_string(n)] = sum / static_cast<double>(set.size());
    }
  }

  for (const auto& g : set) {
    std::map<std::string, double> row;
    row["top1_sentence_bleu_4"] = bleu_sentence(g.hypotheses.front(), g.reference, 4);
    double best = 0.0;
    for (const auto& h : g.hypotheses) best = std::max(best, bleu_sentence(h, g.reference, 4));
    row["oracle_sentence_bleu_4"] = best;
    if (K >= 2) row["self_bleu_4"] = *self_bleu(g.hypotheses, 4, self_one_vs_rest);
    report.per_source.push_back(std::move(row));
  }

  report.config["sources"] = std::to_string(set.size());
  report.config["candidates"] = std::to_string(K);
  report.config["smoothing"] = "add-one";
  report.config["self_bleu_pairs"] = self_one_vs_rest ? "one-vs-rest" : "ordered";
  return report;
}

}  // namespace permgen
