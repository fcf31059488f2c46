#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "permgen/common.hpp"
#include "permgen/sequence.hpp"
#include "permgen/tensor.hpp"
#include "permgen/vocab.hpp"

namespace permgen {

struct ModelConfig {
  int d_model = 64;
  int n_heads = 2;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ff = 256;
  int vocab_size = 0;  // set from the vocabulary
  int Tmax = kTmax;
  int Lmax = kLmax;
  int max_source_len = 512;
  double dropout_rate = 0.1;

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || n_enc_layers <= 0 || n_dec_layers <= 0 || d_ff <= 0 ||
        vocab_size <= 0 || Tmax <= 0 || Lmax <= 0 || max_source_len <= 0) {
      throw config_error("model config: all extents must be positive");
    }
    if (d_model % n_heads != 0) {
      throw config_error("model config: d_model " + std::to_string(d_model) +
                         " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (vocab_size < kReservedCount) {
      throw config_error("model config: vocab_size " + std::to_string(vocab_size) +
                         " smaller than the reserved prefix");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
      throw config_error("model config: dropout_rate must be in [0, 1)");
    }
  }
};

/// Stable name -> tensor registry. Registration order is the checkpoint and
/// optimizer-state order, so it must never depend on map iteration.
template <typename Real>
class ModelParameters {
 public:
  void add(const std::string& name, Tensor<Real> t) {
    if (by_name_.count(name)) throw config_error("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    names_.push_back(name);
    by_name_.emplace(name, std::move(t));
  }

  Tensor<Real>& at(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw config_error("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<Real>& at(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw config_error("unknown parameter: " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t count() const { return names_.size(); }

  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const auto& name : names_) n += at(name).size();
    return n;
  }

  void zero_grads() {
    for (const auto& name : names_) at(name).zero_grad();
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Tensor<Real>> by_name_;
};

namespace detail {

template <typename Real>
void add_linear(ModelParameters<Real>& p, const std::string& prefix, int in, int out, Rng& rng) {
  p.add(prefix + ".w", Tensor<Real>::randn({in, out}, Real(0.02), rng));
  p.add(prefix + ".b", Tensor<Real>({out}));
}

template <typename Real>
void add_layer_norm(ModelParameters<Real>& p, const std::string& prefix, int d) {
  Tensor<Real> gain({d});
  for (std::int64_t i = 0; i < gain.size(); ++i) gain.data()[i] = Real(1);
  p.add(prefix + ".g", std::move(gain));
  p.add(prefix + ".b", Tensor<Real>({d}));
}

template <typename Real>
void add_attention(ModelParameters<Real>& p, const std::string& prefix, int d, Rng& rng) {
  add_linear(p, prefix + ".q", d, d, rng);
  add_linear(p, prefix + ".k", d, d, rng);
  add_linear(p, prefix + ".v", d, d, rng);
  add_linear(p, prefix + ".o", d, d, rng);
}

}  // namespace detail

/// Deterministic parameter construction; same seed, same weights.
template <typename Real>
ModelParameters<Real> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParameters<Real> p;
  p.add("tok_emb", Tensor<Real>::randn({cfg.vocab_size, cfg.d_model}, Real(0.02), rng));
  p.add("enc_pos", Tensor<Real>::randn({cfg.max_source_len, cfg.d_model}, Real(0.02), rng));
  p.add("glob_pos", Tensor<Real>::randn({cfg.Tmax + 2, cfg.d_model}, Real(0.02), rng));
  p.add("loc_pos", Tensor<Real>::randn({cfg.Lmax + 1, cfg.d_model}, Real(0.02), rng));
  for (int l = 0; l < cfg.n_enc_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    detail::add_layer_norm(p, pre + ".ln1", cfg.d_model);
    detail::add_attention(p, pre + ".attn", cfg.d_model, rng);
    detail::add_layer_norm(p, pre + ".ln2", cfg.d_model);
    detail::add_linear(p, pre + ".ffn.1", cfg.d_model, cfg.d_ff, rng);
    detail::add_linear(p, pre + ".ffn.2", cfg.d_ff, cfg.d_model, rng);
  }
  detail::add_layer_norm(p, "enc.final_ln", cfg.d_model);
  for (int l = 0; l < cfg.n_dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    detail::add_layer_norm(p, pre + ".ln1", cfg.d_model);
    detail::add_attention(p, pre + ".self", cfg.d_model, rng);
    detail::add_layer_norm(p, pre + ".ln2", cfg.d_model);
    detail::add_attention(p, pre + ".cross", cfg.d_model, rng);
    detail::add_layer_norm(p, pre + ".ln3", cfg.d_model);
    detail::add_linear(p, pre + ".ffn.1", cfg.d_model, cfg.d_ff, rng);
    detail::add_linear(p, pre + ".ffn.2", cfg.d_ff, cfg.d_model, rng);
  }
  detail::add_layer_norm(p, "dec.final_ln", cfg.d_model);
  return p;
}

/// Per-layer cached keys/values for incremental decoding. Tensors are
/// immutable, so growing the cache makes fresh concatenations while old
/// states stay valid; forking a decode (beam search) is a cheap copy.
template <typename Real>
struct DecodeState {
  Tensor<Real> memory;
  std::vector<Tensor<Real>> self_k, self_v;    // [t × d] per decoder layer
  std::vector<Tensor<Real>> cross_k, cross_v;  // fixed [n × d] per layer
  int length = 0;
};

/// Pre-norm encoder-decoder transformer over token-id sequences. The decoder
/// input embedding is the sum of token, sentence-index (global), and
/// within-sentence (local) position embeddings; the output projection is the
/// transposed token embedding.
template <typename Real>
class Seq2SeqModel {
 public:
  Seq2SeqModel(ModelConfig cfg, ModelParameters<Real> params)
      : cfg_(cfg), p_(std::move(params)) {
    cfg_.validate();
  }

  static Seq2SeqModel fresh(const ModelConfig& cfg, std::uint64_t seed) {
    return Seq2SeqModel(cfg, init_parameters<Real>(cfg, seed));
  }

  const ModelConfig& config() const { return cfg_; }
  ModelParameters<Real>& params() { return p_; }
  const ModelParameters<Real>& params() const { return p_; }

  /// Bidirectional self-attention stack over the source. Empty sources are
  /// represented by a single <PAD> position so downstream cross-attention
  /// always has at least one row to attend to.
  Tensor<Real> encode(Tape<Real>* tape, const std::vector<int>& source, bool train = false,
                      Rng* rng = nullptr) {
    std::vector<int> src = source.empty() ? std::vector<int>{kPadId} : source;
    if (static_cast<int>(src.size()) > cfg_.max_source_len) {
      throw data_error("source length " + std::to_string(src.size()) + " exceeds the maximum of " +
                       std::to_string(cfg_.max_source_len));
    }
    const int n = static_cast<int>(src.size());
    std::vector<int> positions(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;

    auto x = add(tape, embedding_lookup(tape, p_.at("tok_emb"), src),
                 embedding_lookup(tape, p_.at("enc_pos"), positions));
    x = dropout(tape, x, static_cast<Real>(cfg_.dropout_rate), train, rng);
    for (int l = 0; l < cfg_.n_enc_layers; ++l) {
      const std::string pre = "enc." + std::to_string(l);
      auto normed = ln(tape, x, pre + ".ln1");
      auto att = attention(tape, normed, normed, pre + ".attn", nullptr, train, rng);
      x = add(tape, x, att);
      auto normed2 = ln(tape, x, pre + ".ln2");
      x = add(tape, x, ffn(tape, normed2, pre, train, rng));
    }
    return ln(tape, x, "enc.final_ln");
  }

  /// Teacher-forcing decoder pass. Row i of the result holds the logits for
  /// the token following position i under causal self-attention.
  Tensor<Real> decode_logits(Tape<Real>* tape, const Tensor<Real>& memory,
                             const std::vector<int>& tokens, const std::vector<int>& global_pos,
                             const std::vector<int>& local_pos, bool train = false,
                             Rng* rng = nullptr) {
    auto x = embed_targets(tape, tokens, global_pos, local_pos);
    x = dropout(tape, x, static_cast<Real>(cfg_.dropout_rate), train, rng);
    const int L = static_cast<int>(tokens.size());
    // causal: position i sees j <= i
    std::vector<std::uint8_t> causal(static_cast<std::size_t>(L) * static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i)
      for (int j = 0; j < L; ++j)
        causal[static_cast<std::size_t>(i * L + j)] = j > i ? 1 : 0;

    for (int l = 0; l < cfg_.n_dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l);
      auto normed = ln(tape, x, pre + ".ln1");
      x = add(tape, x, attention(tape, normed, normed, pre + ".self", &causal, train, rng));
      auto normed2 = ln(tape, x, pre + ".ln2");
      x = add(tape, x, attention(tape, normed2, memory, pre + ".cross", nullptr, train, rng));
      auto normed3 = ln(tape, x, pre + ".ln3");
      x = add(tape, x, ffn(tape, normed3, pre, train, rng));
    }
    x = ln(tape, x, "dec.final_ln");
    return matmul(tape, x, transpose(tape, p_.at("tok_emb")));
  }

  Tensor<Real> decode_logits(Tape<Real>* tape, const Tensor<Real>& memory,
                             const DecoderSequence& seq, bool train = false, Rng* rng = nullptr) {
    return decode_logits(tape, memory, seq.tokens, seq.global_pos, seq.local_pos, train, rng);
  }

  // ---- incremental decoding with cached keys/values ----

  DecodeState<Real> begin_decode(const Tensor<Real>& memory) {
    DecodeState<Real> st;
    st.memory = memory;
    st.self_k.resize(static_cast<std::size_t>(cfg_.n_dec_layers));
    st.self_v.resize(static_cast<std::size_t>(cfg_.n_dec_layers));
    for (int l = 0; l < cfg_.n_dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".cross";
      st.cross_k.push_back(add_row(nullptr_tape(), matmul(nullptr_tape(), memory, p_.at(pre + ".k.w")), p_.at(pre + ".k.b")));
      st.cross_v.push_back(add_row(nullptr_tape(), matmul(nullptr_tape(), memory, p_.at(pre + ".v.w")), p_.at(pre + ".v.b")));
    }
    return st;
  }

  /// Feed one token; returns the logits row for the next position. Eval
  /// mode only (no tape, no dropout). Must match the teacher-forcing path.
  Tensor<Real> step_decode(DecodeState<Real>& st, int token, int global_pos, int local_pos) {
    auto x = embed_targets(nullptr_tape(), std::vector<int>{token}, std::vector<int>{global_pos},
                           std::vector<int>{local_pos});
    for (int l = 0; l < cfg_.n_dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l);
      const auto li = static_cast<std::size_t>(l);
      auto normed = ln(nullptr_tape(), x, pre + ".ln1");
      auto k_new = add_row(nullptr_tape(), matmul(nullptr_tape(), normed, p_.at(pre + ".self.k.w")), p_.at(pre + ".self.k.b"));
      auto v_new = add_row(nullptr_tape(), matmul(nullptr_tape(), normed, p_.at(pre + ".self.v.w")), p_.at(pre + ".self.v.b"));
      st.self_k[li] = st.length == 0 ? k_new : concat_rows(nullptr_tape(), {st.self_k[li], k_new});
      st.self_v[li] = st.length == 0 ? v_new : concat_rows(nullptr_tape(), {st.self_v[li], v_new});
      auto q = add_row(nullptr_tape(), matmul(nullptr_tape(), normed, p_.at(pre + ".self.q.w")), p_.at(pre + ".self.q.b"));
      x = add(nullptr_tape(), x,
              attend_with(nullptr_tape(), q, st.self_k[li], st.self_v[li], pre + ".self", nullptr));
      auto normed2 = ln(nullptr_tape(), x, pre + ".ln2");
      auto q2 = add_row(nullptr_tape(), matmul(nullptr_tape(), normed2, p_.at(pre + ".cross.q.w")), p_.at(pre + ".cross.q.b"));
      x = add(nullptr_tape(), x,
              attend_with(nullptr_tape(), q2, st.cross_k[li], st.cross_v[li], pre + ".cross", nullptr));
      auto normed3 = ln(nullptr_tape(), x, pre + ".ln3");
      x = add(nullptr_tape(), x, ffn(nullptr_tape(), normed3, pre, false, nullptr));
    }
    st.length += 1;
    x = ln(nullptr_tape(), x, "dec.final_ln");
    return matmul(nullptr_tape(), x, transpose(nullptr_tape(), p_.at("tok_emb")));
  }

  /// log p(token_i | tokens_<i, X) for each position i >= 1 of a complete
  /// sequence. Eval mode.
  std::vector<double> sequence_logprob(const Tensor<Real>& memory, const DecoderSequence& seq) {
    if (seq.length() < 2) throw data_error("sequence_logprob: sequence too short");
    auto logits = decode_logits(nullptr_tape(), memory, seq, false, nullptr);
    auto logp = log_softmax_rows(nullptr_tape(), logits);
    std::vector<double> out;
    out.reserve(seq.length() - 1);
    for (std::size_t i = 1; i < seq.length(); ++i) {
      out.push_back(static_cast<double>(
          logp.at(static_cast<int>(i) - 1, seq.tokens[i])));
    }
    return out;
  }

 private:
  static Tape<Real>* nullptr_tape() { return nullptr; }

  Tensor<Real> embed_targets(Tape<Real>* tape, const std::vector<int>& tokens,
                             const std::vector<int>& global_pos, const std::vector<int>& local_pos) {
    if (tokens.size() != global_pos.size() || tokens.size() != local_pos.size()) {
      throw shape_error("decoder inputs: token/position list lengths differ");
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (global_pos[i] < 0 || global_pos[i] > cfg_.Tmax + 1) {
        throw data_error("global position " + std::to_string(global_pos[i]) +
                         " outside table range [0, " + std::to_string(cfg_.Tmax + 1) + "]");
      }
      if (local_pos[i] < 0 || local_pos[i] > cfg_.Lmax) {
        throw data_error("local position " + std::to_string(local_pos[i]) +
                         " outside table range [0, " + std::to_string(cfg_.Lmax) + "]");
      }
    }
    auto tok = embedding_lookup(tape, p_.at("tok_emb"), tokens);
    auto glob = embedding_lookup(tape, p_.at("glob_pos"), global_pos);
    auto loc = embedding_lookup(tape, p_.at("loc_pos"), local_pos);
    return add(tape, add(tape, tok, glob), loc);
  }

  Tensor<Real> ln(Tape<Real>* tape, const Tensor<Real>& x, const std::string& prefix) {
    return layer_norm(tape, x, p_.at(prefix + ".g"), p_.at(prefix + ".b"));
  }

  /// Multi-head attention; queries from `q_input`, keys/values from
  /// `kv_input`. `mask` (len(q)×len(kv), row-major) marks forbidden pairs.
  Tensor<Real> attention(Tape<Real>* tape, const Tensor<Real>& q_input, const Tensor<Real>& kv_input,
                         const std::string& prefix, const std::vector<std::uint8_t>* mask,
                         bool train, Rng* rng) {
    auto q = add_row(tape, matmul(tape, q_input, p_.at(prefix + ".q.w")), p_.at(prefix + ".q.b"));
    auto k = add_row(tape, matmul(tape, kv_input, p_.at(prefix + ".k.w")), p_.at(prefix + ".k.b"));
    auto v = add_row(tape, matmul(tape, kv_input, p_.at(prefix + ".v.w")), p_.at(prefix + ".v.b"));
    auto out = multi_head(tape, q, k, v, mask);
    out = add_row(tape, matmul(tape, out, p_.at(prefix + ".o.w")), p_.at(prefix + ".o.b"));
    return dropout(tape, out, static_cast<Real>(cfg_.dropout_rate), train, rng);
  }

  /// Attention body with externally supplied projected q/k/v (cache path);
  /// applies the output projection of `prefix`.
  Tensor<Real> attend_with(Tape<Real>* tape, const Tensor<Real>& q, const Tensor<Real>& k,
                           const Tensor<Real>& v, const std::string& prefix,
                           const std::vector<std::uint8_t>* mask) {
    auto out = multi_head(tape, q, k, v, mask);
    return add_row(tape, matmul(tape, out, p_.at(prefix + ".o.w")), p_.at(prefix + ".o.b"));
  }

  Tensor<Real> multi_head(Tape<Real>* tape, const Tensor<Real>& q, const Tensor<Real>& k,
                          const Tensor<Real>& v, const std::vector<std::uint8_t>* mask) {
    const int dh = cfg_.d_model / cfg_.n_heads;
    const Real inv_sqrt = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));
    const int Lq = q.dim(0), Lk = k.dim(0);
    if (mask && static_cast<std::int64_t>(mask->size()) != static_cast<std::int64_t>(Lq) * Lk) {
      throw shape_error("attention mask size mismatch");
    }
    std::vector<Tensor<Real>> heads;
    heads.reserve(static_cast<std::size_t>(cfg_.n_heads));
    for (int h = 0; h < cfg_.n_heads; ++h) {
      auto qh = slice_cols(tape, q, h * dh, dh);
      auto kh = slice_cols(tape, k, h * dh, dh);
      auto vh = slice_cols(tape, v, h * dh, dh);
      auto scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt);
      if (mask) {
        scores = masked_fill(tape, scores, *mask, -std::numeric_limits<Real>::infinity());
      }
      auto weights = softmax(tape, scores, 1);
      heads.push_back(matmul(tape, weights, vh));
    }
    return concat_cols(tape, heads);
  }

  Tensor<Real> ffn(Tape<Real>* tape, const Tensor<Real>& x, const std::string& layer_prefix,
                   bool train, Rng* rng) {
    auto h = add_row(tape, matmul(tape, x, p_.at(layer_prefix + ".ffn.1.w")), p_.at(layer_prefix + ".ffn.1.b"));
    h = relu(tape, h);
    h = add_row(tape, matmul(tape, h, p_.at(layer_prefix + ".ffn.2.w")), p_.at(layer_prefix + ".ffn.2.b"));
    return dropout(tape, h, static_cast<Real>(cfg_.dropout_rate), train, rng);
  }

  ModelConfig cfg_;
  ModelParameters<Real> p_;
};

}  // namespace permgen
