#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "permgen/checkpoint.hpp"
#include "permgen/common.hpp"
#include "permgen/corpus.hpp"
#include "permgen/model.hpp"
#include "permgen/sequence.hpp"
#include "permgen/tensor.hpp"

namespace permgen {

struct TrainConfig {
  int batch_size = 8;
  double base_lr = 3e-3;
  int warmup_steps = 200;
  int max_steps = 5000;
  std::string optimizer = "adam";  // "adam" | "sgd"
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;  // adam only; plain SGD is the bare update
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw config_error("train config: batch_size must be >= 1");
    if (base_lr <= 0.0) throw config_error("train config: base_lr must be > 0");
    if (warmup_steps < 0) throw config_error("train config: warmup_steps must be >= 0");
    if (max_steps < 1) throw config_error("train config: max_steps must be >= 1");
    if (warmup_steps > max_steps) throw config_error("train config: warmup must not exceed max_steps");
    if (optimizer != "adam" && optimizer != "sgd") {
      throw config_error("train config: optimizer must be \"adam\" or \"sgd\", got \"" + optimizer + "\"");
    }
    if (clip_norm < 0.0) throw config_error("train config: clip_norm must be >= 0 (0 disables)");
    if (weight_decay < 0.0) throw config_error("train config: weight_decay must be >= 0");
  }
};

/// Linear warmup to base_lr at `warmup_steps`, then linear decay. Positive
/// at every step in [1, max_steps].
inline double learning_rate(const TrainConfig& cfg, std::int64_t step) {
  if (step < 1) throw config_error("learning_rate: step counter is 1-based");
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const auto span = static_cast<double>(cfg.max_steps - cfg.warmup_steps);
  if (span <= 0.0) return cfg.base_lr;  // all-warmup schedule
  const auto remaining = static_cast<double>(cfg.max_steps - step + 1);
  return cfg.base_lr * std::max(remaining, 1.0) / span;
}

struct StepMetrics {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::vector<int> pi_sample;  // order drawn for the first batch example
};

// ---- optimizer element updates ----

/// The bare descent update on one tensor: theta -= lr * clip_scale * grad.
template <typename Real>
void apply_sgd(Tensor<Real>& t, double lr, double clip_scale) {
  if (!t.has_grad()) return;
  const Real* g = t.grad_data();
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t.data()[i] -= static_cast<Real>(lr * clip_scale * static_cast<double>(g[i]));
  }
}

/// One Adam update with bias correction at step `adam_t` (1-based) and
/// classic L2 weight decay folded into the gradient.
template <typename Real>
void apply_adam(Tensor<Real>& t, Tensor<Real>& m, Tensor<Real>& v, const TrainConfig& cfg,
                std::int64_t adam_t, double lr, double clip_scale) {
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(adam_t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(adam_t));
  const bool has_grad = t.has_grad();
  const Real* g = has_grad ? t.grad_data() : nullptr;
  for (std::int64_t i = 0; i < t.size(); ++i) {
    const auto grad = static_cast<Real>((has_grad ? static_cast<double>(g[i]) * clip_scale : 0.0) +
                                        cfg.weight_decay * static_cast<double>(t.data()[i]));
    m.data()[i] = static_cast<Real>(cfg.adam_beta1) * m.data()[i] +
                  static_cast<Real>(1.0 - cfg.adam_beta1) * grad;
    v.data()[i] = static_cast<Real>(cfg.adam_beta2) * v.data()[i] +
                  static_cast<Real>(1.0 - cfg.adam_beta2) * grad * grad;
    const double mhat = static_cast<double>(m.data()[i]) / bc1;
    const double vhat = static_cast<double>(v.data()[i]) / bc2;
    t.data()[i] -= static_cast<Real>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
  }
}

/// Permutation-sampled training: every step draws one uniform sentence order
/// per example, teacher-forces the reordered sequence, and applies one
/// optimizer update. All randomness (batch choice, order draws, dropout)
/// flows from the single seeded generator so a restored checkpoint replays
/// the identical stream.
template <typename Real>
class Trainer {
 public:
  Trainer(Seq2SeqModel<Real>& model, TrainConfig cfg)
      : model_(model), cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    if (cfg_.optimizer == "adam") init_adam_state();
  }

  const TrainConfig& config() const { return cfg_; }
  std::int64_t step() const { return step_; }
  Rng& rng() { return rng_; }

  /// Mean over the batch of per-token NLL of each example's reordered
  /// sequence. Every position after <BOS> is a loss position, sentence
  /// markers and <EOP> included.
  Tensor<Real> permuted_nll(Tape<Real>* tape, const std::vector<Paragraph>& batch,
                            const std::vector<SentenceOrder>& orders, bool train = false,
                            Rng* dropout_rng = nullptr) {
    if (batch.empty()) throw data_error("permuted_nll: empty batch");
    if (batch.size() != orders.size()) {
      throw data_error("permuted_nll: " + std::to_string(batch.size()) + " examples but " +
                       std::to_string(orders.size()) + " orders");
    }
    Tensor<Real> total = example_nll(tape, batch[0], orders[0], train, dropout_rng);
    for (std::size_t i = 1; i < batch.size(); ++i) {
      total = add(tape, total, example_nll(tape, batch[i], orders[i], train, dropout_rng));
    }
    return scale(tape, total, Real(1) / static_cast<Real>(batch.size()));
  }

  /// One optimizer step on a caller-supplied batch. Orders are drawn here,
  /// one per example, independently and uniformly.
  StepMetrics pi_sgd_step(const std::vector<Paragraph>& batch) {
    std::vector<SentenceOrder> orders;
    orders.reserve(batch.size());
    for (const auto& p : batch) orders.push_back(random_order(p.T(), rng_));

    Tape<Real> tape;
    auto loss = permuted_nll(&tape, batch, orders, true, &rng_);
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      abort_non_finite(batch, orders);
    }
    tape.backward(loss);

    StepMetrics m;
    m.grad_norm = grad_norm();
    if (!std::isfinite(m.grad_norm)) {
      throw numeric_error("step " + std::to_string(step_ + 1) + ": non-finite gradient norm");
    }
    const double clip_scale =
        (cfg_.clip_norm > 0.0 && m.grad_norm > cfg_.clip_norm) ? cfg_.clip_norm / m.grad_norm : 1.0;

    step_ += 1;
    m.step = step_;
    m.loss = static_cast<double>(loss.item());
    m.lr = learning_rate(cfg_, step_);
    m.pi_sample = orders.front().order;
    apply_update(m.lr, clip_scale);
    model_.params().zero_grads();
    return m;
  }

  /// Sample a batch i.i.d. uniform with replacement and take one step.
  StepMetrics train_step(const std::vector<Paragraph>& corpus) {
    if (corpus.empty()) throw data_error("train_step: empty corpus");
    std::vector<Paragraph> batch;
    batch.reserve(static_cast<std::size_t>(cfg_.batch_size));
    for (int i = 0; i < cfg_.batch_size; ++i) {
      batch.push_back(corpus[rand_below(rng_, corpus.size())]);
    }
    return pi_sgd_step(batch);
  }

  /// Run `steps` training steps, reporting each to `sink` if given.
  StepMetrics run(const std::vector<Paragraph>& corpus, int steps,
                  const std::function<void(const StepMetrics&)>& sink = nullptr) {
    StepMetrics last;
    for (int i = 0; i < steps; ++i) {
      last = train_step(corpus);
      if (sink) sink(last);
    }
    return last;
  }

  // ---- checkpoint glue ----

  CheckpointData to_checkpoint(std::uint64_t vocab_hash) const {
    CheckpointData c;
    c.config = model_.config();
    c.vocab_hash = vocab_hash;
    c.step = step_;
    c.optimizer = cfg_.optimizer;
    c.adam_t = adam_t_;
    std::ostringstream ss;
    ss << rng_;
    c.rng_state = ss.str();
    c.params = params_to_blobs(model_.params());
    if (cfg_.optimizer == "adam") {
      const auto& names = model_.params().names();
      for (std::size_t i = 0; i < names.size(); ++i) {
        c.adam_m.push_back(tensor_blob(names[i], adam_m_[i]));
        c.adam_v.push_back(tensor_blob(names[i], adam_v_[i]));
      }
    }
    return c;
  }

  /// Restore step counter, optimizer moments, and RNG stream. Model
  /// parameters are restored separately (params_from_blobs).
  void restore(const CheckpointData& c) {
    if (c.optimizer != cfg_.optimizer) {
      throw config_error("checkpoint was trained with optimizer \"" + c.optimizer +
                         "\", run configured for \"" + cfg_.optimizer + "\"");
    }
    step_ = c.step;
    adam_t_ = c.adam_t;
    std::istringstream ss(c.rng_state);
    ss >> rng_;
    if (!ss) throw data_error("checkpoint RNG state is malformed");
    if (cfg_.optimizer == "adam") {
      const auto& names = model_.params().names();
      if (c.adam_m.size() != names.size() || c.adam_v.size() != names.size()) {
        throw data_error("checkpoint optimizer state has " + std::to_string(c.adam_m.size()) +
                         " tensors, model needs " + std::to_string(names.size()));
      }
      for (std::size_t i = 0; i < names.size(); ++i) {
        restore_blob(adam_m_[i], c.adam_m[i], names[i]);
        restore_blob(adam_v_[i], c.adam_v[i], names[i]);
      }
    }
  }

 private:
  Tensor<Real> example_nll(Tape<Real>* tape, const Paragraph& p, const SentenceOrder& pi,
                           bool train, Rng* dropout_rng) {
    auto seq = build_decoder_sequence(p, pi);
    auto memory = model_.encode(tape, p.source_tokens, train, dropout_rng);
    auto logits = model_.decode_logits(tape, memory, seq, train, dropout_rng);
    // row i predicts token i+1; the final row has no target
    std::vector<int> targets(seq.tokens.begin() + 1, seq.tokens.end());
    targets.push_back(kPadId);
    std::vector<std::uint8_t> mask(seq.length(), 0);
    mask[seq.length() - 1] = 1;
    return cross_entropy(tape, logits, targets, mask);
  }

  [[noreturn]] void abort_non_finite(const std::vector<Paragraph>& batch,
                                     const std::vector<SentenceOrder>& orders) {
    // re-run examples one by one in eval mode to name the culprit
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto v = static_cast<double>(example_nll(nullptr, batch[i], orders[i], false, nullptr).item());
      if (!std::isfinite(v)) {
        throw numeric_error("step " + std::to_string(step_ + 1) + ": non-finite loss on example with source [" +
                            join_ints(batch[i].source_tokens) + "], order [" +
                            join_ints(orders[i].order) + "]");
      }
    }
    throw numeric_error("step " + std::to_string(step_ + 1) +
                        ": non-finite batch loss (no single example reproduces it)");
  }

  double grad_norm() const {
    double sq = 0.0;
    for (const auto& name : model_.params().names()) {
      const auto& t = model_.params().at(name);
      if (!t.has_grad()) continue;
      const Real* g = t.grad_data();
      for (std::int64_t i = 0; i < t.size(); ++i) {
        sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
      }
    }
    return std::sqrt(sq);
  }

  void apply_update(double lr, double clip_scale) {
    if (cfg_.optimizer == "sgd") {
      for (const auto& name : model_.params().names()) {
        apply_sgd(model_.params().at(name), lr, clip_scale);
      }
      return;
    }
    adam_t_ += 1;
    const auto& names = model_.params().names();
    for (std::size_t pi = 0; pi < names.size(); ++pi) {
      apply_adam(model_.params().at(names[pi]), adam_m_[pi], adam_v_[pi], cfg_, adam_t_, lr,
                 clip_scale);
    }
  }

  void init_adam_state() {
    for (const auto& name : model_.params().names()) {
      adam_m_.emplace_back(model_.params().at(name).shape());
      adam_v_.emplace_back(model_.params().at(name).shape());
    }
  }

  static CheckpointBlob tensor_blob(const std::string& name, const Tensor<Real>& t) {
    CheckpointBlob b;
    b.name = name;
    b.shape = t.shape();
    b.data.resize(static_cast<std::size_t>(t.size()));
    for (std::int64_t i = 0; i < t.size(); ++i)
      b.data[static_cast<std::size_t>(i)] = static_cast<float>(t.data()[i]);
    return b;
  }

  void restore_blob(Tensor<Real>& t, const CheckpointBlob& b, const std::string& name) {
    if (b.name != name || b.shape != t.shape()) {
      throw data_error("checkpoint optimizer tensor \"" + b.name + "\" does not match parameter \"" +
                       name + "\"");
    }
    for (std::size_t i = 0; i < b.data.size(); ++i) t.data()[i] = static_cast<Real>(b.data[i]);
  }

  Seq2SeqModel<Real>& model_;
  TrainConfig cfg_;
  Rng rng_;
  std::int64_t step_ = 0;
  std::int64_t adam_t_ = 0;
  std::vector<Tensor<Real>> adam_m_, adam_v_;
};

// ---- whole-paragraph likelihood diagnostics ----

inline constexpr int kEnumerationBudget = 5;  // T! forwards; 5! = 120

inline double log_factorial(int T) {
  double v = 0.0;
  for (int i = 2; i <= T; ++i) v += std::log(static_cast<double>(i));
  return v;
}

/// Likelihood diagnostics over the full set of sentence orders. The summed
/// form treats each order's sequence probability as one additive term; the
/// mean-weighted form divides the sum by T!. Both are exposed because either
/// reading is defensible; the bound is stated against the summed form.
struct LikelihoodReport {
  double exact_log_likelihood = 0.0;   // log Σ_orders exp(S(order))
  double mean_log_likelihood = 0.0;    // log( (1/T!) Σ exp(S) ) = exact − log T!
  double jensen_lower_bound = 0.0;     // log T! + mean(S)  ≤ exact
  std::vector<double> per_order_total; // S per lexicographic order
};

template <typename Real>
LikelihoodReport likelihood_report(Seq2SeqModel<Real>& model, const Paragraph& p) {
  if (p.T() > kEnumerationBudget) {
    throw data_error("exact likelihood needs all T! orders; T = " + std::to_string(p.T()) +
                     " exceeds the enumeration budget of " + std::to_string(kEnumerationBudget));
  }
  auto memory = model.encode(nullptr, p.source_tokens);
  LikelihoodReport r;
  for (const auto& pi : all_orders(p.T())) {
    auto seq = build_decoder_sequence(p, pi);
    auto lp = model.sequence_logprob(memory, seq);
    double total = 0.0;
    for (double v : lp) total += v;
    r.per_order_total.push_back(total);
  }
  double mx = r.per_order_total.front();
  for (double v : r.per_order_total) mx = std::max(mx, v);
  double sum_exp = 0.0, mean = 0.0;
  for (double v : r.per_order_total) {
    sum_exp += std::exp(v - mx);
    mean += v;
  }
  mean /= static_cast<double>(r.per_order_total.size());
  r.exact_log_likelihood = mx + std::log(sum_exp);
  r.mean_log_likelihood = r.exact_log_likelihood - log_factorial(p.T());
  r.jensen_lower_bound = log_factorial(p.T()) + mean;
  return r;
}

template <typename Real>
double exact_log_likelihood(Seq2SeqModel<Real>& model, const Paragraph& p) {
  return likelihood_report(model, p).exact_log_likelihood;
}

template <typename Real>
double jensen_bound(Seq2SeqModel<Real>& model, const Paragraph& p) {
  return likelihood_report(model, p).jensen_lower_bound;
}

}  // namespace permgen
