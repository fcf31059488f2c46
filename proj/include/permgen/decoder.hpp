#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "permgen/common.hpp"
#include "permgen/model.hpp"
#include "permgen/sequence.hpp"
#include "permgen/tensor.hpp"
#include "permgen/vocab.hpp"

namespace permgen {

// ---- configuration ----

enum class Strategy { beam, topk, nucleus };

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "beam") return Strategy::beam;
  if (s == "topk") return Strategy::topk;
  if (s == "nucleus") return Strategy::nucleus;
  throw config_error("unknown decoding strategy \"" + s + "\" (beam | topk | nucleus)");
}

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::beam: return "beam";
    case Strategy::topk: return "topk";
    default: return "nucleus";
  }
}

struct DecodeConfig {
  Strategy strategy = Strategy::beam;
  int beam_width = 4;
  int top_k = 8;
  double top_p = 0.9;
  int num_candidates = 1;
  /// Body-token budget per sentence; <E-t> is forced once a body reaches it.
  /// Effective budget is clamped so the local-position table always covers
  /// the segment.
  int max_body_tokens = kLmax;
  int max_sentences = kTmax;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  /// Sample the first sentence index uniformly instead of from the model.
  bool uniform_first = false;
  /// Force the full generation order (1-based indices); empty = free.
  std::vector<int> force_order;
  int threads = 1;

  int effective_body_cap() const { return std::min(max_body_tokens, kLmax - 2); }

  void validate() const {
    if (beam_width < 1) throw config_error("decode config: beam width must be >= 1");
    if (top_k < 1) throw config_error("decode config: top-k must be >= 1");
    if (top_p <= 0.0 || top_p > 1.0) throw config_error("decode config: top-p must be in (0, 1]");
    if (num_candidates < 1) throw config_error("decode config: candidate count must be >= 1");
    if (max_body_tokens < 1) throw config_error("decode config: per-sentence budget must be >= 1");
    if (max_sentences < 1 || max_sentences > kTmax) {
      throw config_error("decode config: max sentences must be in [1, " + std::to_string(kTmax) + "]");
    }
    if (temperature <= 0.0) throw config_error("decode config: temperature must be > 0");
    if (threads < 1) throw config_error("decode config: threads must be >= 1");
    if (!force_order.empty()) {
      std::set<int> seen;
      for (int t : force_order) {
        if (t < 1 || t > max_sentences || !seen.insert(t).second) {
          throw config_error("decode config: forced order [" + join_ints(force_order) +
                             "] is not a list of distinct indices in [1, " +
                             std::to_string(max_sentences) + "]");
        }
      }
    }
  }
};

// ---- candidate result ----

struct Candidate {
  std::vector<int> sentence_indices;        // ascending
  std::vector<std::vector<int>> sentences;  // aligned with sentence_indices
  std::vector<int> order;                   // realized generation order
  std::vector<int> tokens;                  // flat emissions: markers, bodies, <EOP>
  std::vector<double> token_logprobs;       // one per emission
  double score = 0.0;                       // mean of token_logprobs
  bool truncated = false;                   // some sentence hit the body cap
  bool replacement_fallback = false;        // first-index pool was exhausted
};

enum class DecodePhase { awaiting_index, in_sentence, finished };

/// Paper-facing view of one candidate's progress through the state machine.
struct CandidateProgress {
  std::vector<int> generated_indices;  // realized order so far
  std::vector<ParsedSegment> segments;
  std::optional<int> current_index;
  double cum_logprob = 0.0;
  int tokens_emitted = 0;
  DecodePhase phase = DecodePhase::awaiting_index;
};

// ---- masked distributions ----

/// Log-softmax of one logits row restricted to `allowed`: disallowed entries
/// carry exactly zero probability (-inf log-prob). Temperature rescales the
/// logits before renormalization.
template <typename Real>
Tensor<Real> masked_log_softmax_row(const Tensor<Real>& logits_row, const std::vector<int>& allowed,
                                    double temperature = 1.0) {
  if (logits_row.rank() != 2 || logits_row.dim(0) != 1) {
    throw shape_error("masked_log_softmax_row: expected a [1 x V] row");
  }
  if (allowed.empty()) throw grammar_error("no tokens are legal at this decode step", 0);
  const int V = logits_row.dim(1);
  Tensor<Real> scaled = logits_row;
  if (temperature != 1.0) {
    scaled = scale<Real>(nullptr, logits_row, static_cast<Real>(1.0 / temperature));
  }
  std::vector<std::uint8_t> forbidden(static_cast<std::size_t>(V), 1);
  for (int id : allowed) {
    if (id < 0 || id >= V) throw shape_error("allowed token id " + std::to_string(id) + " outside vocabulary");
    forbidden[static_cast<std::size_t>(id)] = 0;
  }
  auto masked = masked_fill<Real>(nullptr, scaled, forbidden, -std::numeric_limits<Real>::infinity());
  return log_softmax_rows<Real>(nullptr, masked);
}

namespace detail {

template <typename Real>
double row_logprob(const Tensor<Real>& logp_row, int id) {
  return static_cast<double>(logp_row.at(0, id));
}

/// Draw from the categorical distribution exp(logp) over `ids`.
template <typename Real>
int sample_from(const Tensor<Real>& logp_row, const std::vector<int>& ids, Rng& rng) {
  double u = rand_unit(rng);
  double cum = 0.0;
  for (int id : ids) {
    cum += std::exp(row_logprob(logp_row, id));
    if (u < cum) return id;
  }
  return ids.back();  // guard against rounding shortfall
}

struct ScoredId {
  int id;
  double logp;
};

template <typename Real>
std::vector<ScoredId> sorted_support(const Tensor<Real>& logp_row, const std::vector<int>& ids) {
  std::vector<ScoredId> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back({id, row_logprob(logp_row, id)});
  std::stable_sort(out.begin(), out.end(), [](const ScoredId& a, const ScoredId& b) {
    if (a.logp != b.logp) return a.logp > b.logp;
    return a.id < b.id;
  });
  return out;
}

inline int sample_renormalized(const std::vector<ScoredId>& kept, Rng& rng) {
  double mass = 0.0;
  for (const auto& s : kept) mass += std::exp(s.logp);
  double u = rand_unit(rng) * mass;
  double cum = 0.0;
  for (const auto& s : kept) {
    cum += std::exp(s.logp);
    if (u < cum) return s.id;
  }
  return kept.back().id;
}

}  // namespace detail

// ---- token sampling strategies ----

/// Top-k sampling over `allowed`: the k most probable legal tokens,
/// renormalized. Temperature rescales logits before the cut. k = 1 is greedy.
template <typename Real>
int sample_topk_token(const Tensor<Real>& logits_row, const std::vector<int>& allowed, int k,
                      double temperature, Rng& rng) {
  if (k < 1) throw config_error("top-k sampling: k must be >= 1");
  auto tempered = masked_log_softmax_row<Real>(logits_row, allowed, temperature);
  auto support = detail::sorted_support<Real>(tempered, allowed);
  support.resize(std::min<std::size_t>(static_cast<std::size_t>(k), support.size()));
  return detail::sample_renormalized(support, rng);
}

/// Nucleus sampling over `allowed`: smallest probability-sorted prefix whose
/// cumulative mass reaches p, renormalized. p = 1 keeps the full distribution.
template <typename Real>
int sample_nucleus_token(const Tensor<Real>& logits_row, const std::vector<int>& allowed, double p,
                         double temperature, Rng& rng) {
  if (p <= 0.0 || p > 1.0) throw config_error("nucleus sampling: p must be in (0, 1]");
  auto tempered = masked_log_softmax_row<Real>(logits_row, allowed, temperature);
  auto support = detail::sorted_support<Real>(tempered, allowed);
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < support.size()) {
    cum += std::exp(support[keep].logp);
    ++keep;
    if (cum >= p) break;
  }
  support.resize(keep);
  return detail::sample_renormalized(support, rng);
}

// ---- index-step primitives ----

/// Step-2 first-index choice over `available` sentence indices: sampled from
/// the model's renormalized begin-token distribution (or uniformly with
/// `uniform_first`). Returns the chosen index; `logprob_out` gets the
/// model-renormalized log-probability of that choice (model-weighted even in
/// uniform mode, so scores stay comparable).
template <typename Real>
int select_first_index(const Tensor<Real>& logits_row, const std::vector<int>& available, Rng& rng,
                       bool uniform_first, double* logprob_out = nullptr) {
  if (available.empty()) throw grammar_error("first-index selection with no available indices", 0);
  std::vector<int> begin_ids;
  begin_ids.reserve(available.size());
  for (int t : available) begin_ids.push_back(begin_id(t));
  auto logp = masked_log_softmax_row<Real>(logits_row, begin_ids);
  int chosen_id;
  if (uniform_first) {
    chosen_id = begin_ids[rand_below(rng, begin_ids.size())];
  } else {
    chosen_id = detail::sample_from<Real>(logp, begin_ids, rng);
  }
  if (logprob_out) *logprob_out = detail::row_logprob(logp, chosen_id);
  return begin_index(chosen_id);
}

/// Complexity-reduction index step: strict argmax over the remaining begin
/// tokens plus <EOP>. Ties break toward the lower token id, i.e. the lower
/// sentence index (with <EOP> ahead of every begin). Empty `remaining`
/// forces <EOP>. Returns the winning token id.
template <typename Real>
int select_next_index(const Tensor<Real>& logits_row, const std::vector<int>& remaining,
                      double* logprob_out = nullptr) {
  std::vector<int> allowed = {kEopId};
  for (int t : remaining) allowed.push_back(begin_id(t));
  std::sort(allowed.begin(), allowed.end());
  auto logp = masked_log_softmax_row<Real>(logits_row, allowed);
  int best = allowed.front();
  double best_lp = detail::row_logprob(logp, best);
  for (int id : allowed) {
    const double lp = detail::row_logprob(logp, id);
    if (lp > best_lp) {
      best = id;
      best_lp = lp;
    }
  }
  if (logprob_out) *logprob_out = best_lp;
  return best;
}

// ---- the per-candidate walker ----

namespace detail {

template <typename Real>
struct Emission {
  int token;
  double logprob;
};

/// Generates one candidate paragraph. The first sentence index is decided
/// outside (it carries cross-candidate no-replacement state); everything
/// after is private to this walker.
template <typename Real>
class CandidateWalker {
 public:
  CandidateWalker(Seq2SeqModel<Real>& model, const DecodeState<Real>& post_bos_state,
                  const DecodeConfig& cfg, Rng rng)
      : model_(model), st_(post_bos_state), cfg_(cfg), rng_(rng) {}

  Candidate run(int first_index, double first_logprob, bool fallback_flag) {
    Candidate cand;
    cand.replacement_fallback = fallback_flag;
    CandidateProgress prog;
    std::set<int> used;

    int next_index = first_index;
    double next_index_logprob = first_logprob;
    std::size_t forced_pos = 1;  // force_order[0] was consumed by the caller

    while (true) {
      // open sentence `next_index`
      prog.phase = DecodePhase::in_sentence;
      prog.current_index = next_index;
      prog.generated_indices.push_back(next_index);
      used.insert(next_index);
      emit(cand, prog, begin_id(next_index), next_index_logprob);
      auto logits = model_.step_decode(st_, begin_id(next_index), next_index, 1);

      const bool hit_cap = generate_body(cand, prog, next_index, logits);
      cand.truncated = cand.truncated || hit_cap;
      prog.segments.push_back(ParsedSegment{next_index, last_body_});
      prog.current_index.reset();
      prog.phase = DecodePhase::awaiting_index;

      // index step
      auto index_logits = model_.step_decode(st_, end_id(next_index), next_index,
                                             static_cast<int>(last_body_.size()) + 2);
      int token;
      double lp;
      if (!cfg_.force_order.empty()) {
        if (forced_pos < cfg_.force_order.size()) {
          token = begin_id(cfg_.force_order[forced_pos++]);
        } else {
          token = kEopId;
        }
        // score the forced choice under the same masked distribution
        std::vector<int> remaining = remaining_indices(used);
        std::vector<int> allowed = {kEopId};
        for (int t : remaining) allowed.push_back(begin_id(t));
        auto logp = masked_log_softmax_row<Real>(index_logits, allowed);
        lp = row_logprob(logp, token);
      } else {
        token = select_next_index<Real>(index_logits, remaining_indices(used), &lp);
      }

      if (token == kEopId) {
        emit(cand, prog, kEopId, lp);
        prog.phase = DecodePhase::finished;
        break;
      }
      next_index = begin_index(token);
      next_index_logprob = lp;
    }

    finalize(cand, prog);
    return cand;
  }

 private:
  void emit(Candidate& cand, CandidateProgress& prog, int token, double logprob) {
    cand.tokens.push_back(token);
    cand.token_logprobs.push_back(logprob);
    prog.cum_logprob += logprob;
    prog.tokens_emitted += 1;
  }

  std::vector<int> remaining_indices(const std::set<int>& used) const {
    std::vector<int> out;
    for (int t = 1; t <= cfg_.max_sentences; ++t)
      if (!used.count(t)) out.push_back(t);
    return out;
  }

  std::vector<int> body_legal(int sentence_index) const {
    std::vector<int> allowed;
    allowed.reserve(static_cast<std::size_t>(model_.config().vocab_size - kReservedCount) + 1);
    allowed.push_back(end_id(sentence_index));
    for (int id = kReservedCount; id < model_.config().vocab_size; ++id) allowed.push_back(id);
    return allowed;
  }

  /// Step 3: emit body tokens until <E-t> (or force it at the cap). Returns
  /// true when the cap fired. Leaves the model state fed up to the last body
  /// token; the caller feeds <E-t>.
  bool generate_body(Candidate& cand, CandidateProgress& prog, int t, Tensor<Real> logits) {
    last_body_.clear();
    const int cap = cfg_.effective_body_cap();
    const std::vector<int> allowed = body_legal(t);
    const int et = end_id(t);

    if (cfg_.strategy == Strategy::beam) {
      return beam_body(cand, prog, t, logits, allowed, cap);
    }

    while (true) {
      auto scoring = masked_log_softmax_row<Real>(logits, allowed);
      if (static_cast<int>(last_body_.size()) >= cap) {
        emit(cand, prog, et, row_logprob(scoring, et));
        return true;
      }
      int token;
      if (cfg_.strategy == Strategy::topk) {
        token = sample_topk_token<Real>(logits, allowed, cfg_.top_k, cfg_.temperature, rng_);
      } else {
        token = sample_nucleus_token<Real>(logits, allowed, cfg_.top_p, cfg_.temperature, rng_);
      }
      emit(cand, prog, token, row_logprob(scoring, token));
      if (token == et) return false;
      last_body_.push_back(token);
      logits = model_.step_decode(st_, token, t, static_cast<int>(last_body_.size()) + 1);
    }
  }

  struct BeamHyp {
    DecodeState<Real> st;
    Tensor<Real> next_logits;
    std::vector<int> body;
    std::vector<double> logprobs;  // per body token, then <E-t>
    double sum = 0.0;
    bool capped = false;
  };

  /// In-sentence beam search: W highest summed-log-prob partial bodies; a
  /// hypothesis completes by scoring <E-t>. The best completed hypothesis is
  /// committed and its cached state becomes the candidate's state.
  bool beam_body(Candidate& cand, CandidateProgress& prog, int t, const Tensor<Real>& first_logits,
                 const std::vector<int>& allowed, int cap) {
    const int et = end_id(t);
    std::vector<BeamHyp> active;
    active.push_back(BeamHyp{st_, first_logits, {}, {}, 0.0, false});
    std::vector<BeamHyp> completed;

    while (!active.empty()) {
      struct Expansion {
        std::size_t hyp;
        int token;
        double logp;
        double newsum;
      };
      std::vector<Expansion> exps;
      for (std::size_t h = 0; h < active.size(); ++h) {
        auto scoring = masked_log_softmax_row<Real>(active[h].next_logits, allowed);
        if (static_cast<int>(active[h].body.size()) >= cap) {
          // cap reached: the only expansion is the forced close
          const double lp = row_logprob(scoring, et);
          exps.push_back({h, et, lp, active[h].sum + lp});
          continue;
        }
        for (int id : allowed) {
          const double lp = row_logprob(scoring, id);
          if (lp == -std::numeric_limits<double>::infinity()) continue;
          exps.push_back({h, id, lp, active[h].sum + lp});
        }
      }
      std::stable_sort(exps.begin(), exps.end(),
                       [](const Expansion& a, const Expansion& b) { return a.newsum > b.newsum; });

      // the round keeps exactly the W best expansions: a close retires its
      // hypothesis, anything else stays active (with W = 1 this is greedy)
      std::vector<BeamHyp> next;
      const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(cfg_.beam_width), exps.size());
      for (std::size_t i = 0; i < keep; ++i) {
        const auto& e = exps[i];
        BeamHyp h = active[e.hyp];  // cheap: cached tensors are shared
        h.logprobs.push_back(e.logp);
        h.sum = e.newsum;
        if (e.token == et) {
          h.capped = static_cast<int>(h.body.size()) >= cap;
          completed.push_back(std::move(h));
        } else {
          h.body.push_back(e.token);
          h.next_logits = model_.step_decode(h.st, e.token, t, static_cast<int>(h.body.size()) + 1);
          next.push_back(std::move(h));
        }
      }
      active = std::move(next);
      if (!completed.empty() && !active.empty()) {
        double best_completed = completed.front().sum;
        for (const auto& c : completed) best_completed = std::max(best_completed, c.sum);
        double best_active = active.front().sum;
        for (const auto& a : active) best_active = std::max(best_active, a.sum);
        if (best_active <= best_completed) break;  // log-probs only decrease
      }
    }

    if (completed.empty()) throw error("beam search ended without a completed segment");
    std::size_t best = 0;
    for (std::size_t i = 1; i < completed.size(); ++i)
      if (completed[i].sum > completed[best].sum) best = i;
    BeamHyp& win = completed[best];

    for (std::size_t i = 0; i < win.body.size(); ++i) emit(cand, prog, win.body[i], win.logprobs[i]);
    emit(cand, prog, et, win.logprobs.back());
    last_body_ = win.body;
    st_ = win.st;
    return win.capped;
  }

  void finalize(Candidate& cand, const CandidateProgress& prog) {
    cand.order = prog.generated_indices;
    auto segs = prog.segments;
    std::sort(segs.begin(), segs.end(), [](const ParsedSegment& a, const ParsedSegment& b) {
      return a.sentence_index < b.sentence_index;
    });
    for (const auto& s : segs) {
      cand.sentence_indices.push_back(s.sentence_index);
      cand.sentences.push_back(s.body);
    }
    double total = 0.0;
    for (double lp : cand.token_logprobs) total += lp;
    cand.score = total / static_cast<double>(cand.token_logprobs.size());
  }

  Seq2SeqModel<Real>& model_;
  DecodeState<Real> st_;
  const DecodeConfig& cfg_;
  Rng rng_;
  std::vector<int> last_body_;
};

}  // namespace detail

// ---- ranking ----

/// Order candidates by mean per-token log-probability, highest first; equal
/// scores keep their input order. Scores are recomputed from the stored
/// per-token values.
inline std::vector<Candidate> rank_candidates(std::vector<Candidate> cands) {
  for (auto& c : cands) {
    if (c.token_logprobs.empty()) {
      throw data_error("rank_candidates: candidate with no scored tokens");
    }
    double total = 0.0;
    for (double lp : c.token_logprobs) total += lp;
    c.score = total / static_cast<double>(c.token_logprobs.size());
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  return cands;
}

// ---- top-level decode ----

/// Generate K candidate paragraphs for one source. First sentence indices
/// are drawn serially without replacement across candidates (falling back to
/// replacement when the pool runs dry); body generation is independent per
/// candidate and may run on `cfg.threads` workers with identical results.
template <typename Real>
std::vector<Candidate> decode_paragraph(Seq2SeqModel<Real>& model, const std::vector<int>& source,
                                        const DecodeConfig& cfg) {
  cfg.validate();
  auto memory = model.encode(nullptr, source);

  // shared post-<BOS> state; forks are cheap
  auto st0 = model.begin_decode(memory);
  auto first_logits = model.step_decode(st0, kBosId, 0, 0);

  // phase 1: first indices, serial, no replacement until exhausted
  struct FirstPick {
    int index;
    double logprob;
    bool fallback;
  };
  std::vector<FirstPick> picks;
  std::vector<Rng> rngs;
  std::set<int> taken;
  bool exhausted_ever = false;
  for (int c = 0; c < cfg.num_candidates; ++c) {
    rngs.emplace_back(cfg.seed ^ static_cast<std::uint64_t>(c));
    FirstPick pick{};
    if (!cfg.force_order.empty()) {
      pick.index = cfg.force_order.front();
      pick.fallback = false;
      // score the forced choice under the full first-step begin distribution
      std::vector<int> all_begins;
      for (int t = 1; t <= cfg.max_sentences; ++t) all_begins.push_back(begin_id(t));
      auto logp = masked_log_softmax_row<Real>(first_logits, all_begins);
      pick.logprob = detail::row_logprob(logp, begin_id(pick.index));
    } else {
      std::vector<int> avail;
      for (int t = 1; t <= cfg.max_sentences; ++t)
        if (!taken.count(t)) avail.push_back(t);
      if (avail.empty()) {
        exhausted_ever = true;
        taken.clear();  // pool exhausted: sample with replacement from here on
        for (int t = 1; t <= cfg.max_sentences; ++t) avail.push_back(t);
      }
      pick.fallback = exhausted_ever;
      pick.index = select_first_index<Real>(first_logits, avail, rngs.back(), cfg.uniform_first,
                                            &pick.logprob);
      taken.insert(pick.index);
    }
    picks.push_back(pick);
  }

  // phase 2: independent walkers
  std::vector<Candidate> out(static_cast<std::size_t>(cfg.num_candidates));
  auto run_one = [&](int c) {
    detail::CandidateWalker<Real> walker(model, st0, cfg, rngs[static_cast<std::size_t>(c)]);
    out[static_cast<std::size_t>(c)] =
        walker.run(picks[static_cast<std::size_t>(c)].index, picks[static_cast<std::size_t>(c)].logprob,
                   picks[static_cast<std::size_t>(c)].fallback);
  };
  if (cfg.threads <= 1 || cfg.num_candidates == 1) {
    for (int c = 0; c < cfg.num_candidates; ++c) run_one(c);
  } else {
    for (int base = 0; base < cfg.num_candidates; base += cfg.threads) {
      std::vector<std::thread> pool;
      for (int c = base; c < std::min(cfg.num_candidates, base + cfg.threads); ++c) {
        pool.emplace_back(run_one, c);
      }
      for (auto& th : pool) th.join();
    }
  }
  return rank_candidates(std::move(out));
}

}  // namespace permgen
