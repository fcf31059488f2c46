#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "permgen/common.hpp"
#include "permgen/decoder.hpp"
#include "permgen/model.hpp"
#include "permgen/trainer.hpp"

namespace permgen {

/// One merged view of everything a run needs: model, training, decoding,
/// corpus handling, paths. Serialized flat with dotted keys; the FNV hash of
/// that canonical form is stamped into every artifact a run produces.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  std::uint64_t seed = 0;
  int threads = 1;
  int min_freq = 1;
  std::int64_t eval_every = 50;
  std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only

  std::string corpus_path;
  std::string dev_path;
  std::string out_dir = "out";
  std::string checkpoint_path;
  std::string vocab_path;
  std::string inputs_path;
  std::string references_path;

  /// Push the master seed and thread count down into the member configs.
  void finalize() {
    train.seed = seed;
    decode.seed = seed;
    decode.threads = threads;
  }
};

inline std::string force_order_string(const std::vector<int>& order) {
  std::string out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(order[i]);
  }
  return out;
}

/// "2,1,3" -> {2, 1, 3}; empty string -> {}.
inline std::vector<int> parse_force_order(const std::string& text) {
  std::vector<int> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw config_error("force order: \"" + item + "\" is not an integer (expected e.g. \"2,1,3\")");
    }
  }
  if (out.empty()) throw config_error("force order: no indices in \"" + text + "\"");
  return out;
}

namespace detail {

template <typename T>
T config_value(const std::string& key, const nlohmann::json& v) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw config_error("config key \"" + key + "\": unexpected value " + v.dump());
  }
}

}  // namespace detail

/// Apply one flat dotted key. Unknown keys are rejected so typos fail loudly.
inline void apply_config_key(RunConfig& cfg, const std::string& key, const nlohmann::json& v) {
  using detail::config_value;
  // model
  if (key == "model.d_model") cfg.model.d_model = config_value<int>(key, v);
  else if (key == "model.n_heads") cfg.model.n_heads = config_value<int>(key, v);
  else if (key == "model.n_enc_layers") cfg.model.n_enc_layers = config_value<int>(key, v);
  else if (key == "model.n_dec_layers") cfg.model.n_dec_layers = config_value<int>(key, v);
  else if (key == "model.d_ff") cfg.model.d_ff = config_value<int>(key, v);
  else if (key == "model.max_source_len") cfg.model.max_source_len = config_value<int>(key, v);
  else if (key == "model.dropout") cfg.model.dropout_rate = config_value<double>(key, v);
  // training
  else if (key == "train.batch_size") cfg.train.batch_size = config_value<int>(key, v);
  else if (key == "train.base_lr") cfg.train.base_lr = config_value<double>(key, v);
  else if (key == "train.warmup_steps") cfg.train.warmup_steps = config_value<std::int64_t>(key, v);
  else if (key == "train.max_steps") cfg.train.max_steps = config_value<std::int64_t>(key, v);
  else if (key == "train.optimizer") cfg.train.optimizer = config_value<std::string>(key, v);
  else if (key == "train.adam_beta1") cfg.train.adam_beta1 = config_value<double>(key, v);
  else if (key == "train.adam_beta2") cfg.train.adam_beta2 = config_value<double>(key, v);
  else if (key == "train.adam_eps") cfg.train.adam_eps = config_value<double>(key, v);
  else if (key == "train.weight_decay") cfg.train.weight_decay = config_value<double>(key, v);
  else if (key == "train.clip_norm") cfg.train.clip_norm = config_value<double>(key, v);
  else if (key == "train.eval_every") cfg.eval_every = config_value<std::int64_t>(key, v);
  else if (key == "train.checkpoint_every") cfg.checkpoint_every = config_value<std::int64_t>(key, v);
  // decoding
  else if (key == "decode.strategy") cfg.decode.strategy = strategy_from_string(config_value<std::string>(key, v));
  else if (key == "decode.beam_width") cfg.decode.beam_width = config_value<int>(key, v);
  else if (key == "decode.top_k") cfg.decode.top_k = config_value<int>(key, v);
  else if (key == "decode.top_p") cfg.decode.top_p = config_value<double>(key, v);
  else if (key == "decode.num_candidates") cfg.decode.num_candidates = config_value<int>(key, v);
  else if (key == "decode.max_body_tokens") cfg.decode.max_body_tokens = config_value<int>(key, v);
  else if (key == "decode.max_sentences") cfg.decode.max_sentences = config_value<int>(key, v);
  else if (key == "decode.temperature") cfg.decode.temperature = config_value<double>(key, v);
  else if (key == "decode.uniform_first") cfg.decode.uniform_first = config_value<bool>(key, v);
  else if (key == "decode.force_order") cfg.decode.force_order = config_value<std::vector<int>>(key, v);
  // corpus and run
  else if (key == "corpus.min_freq") cfg.min_freq = config_value<int>(key, v);
  else if (key == "seed") cfg.seed = config_value<std::uint64_t>(key, v);
  else if (key == "threads") cfg.threads = config_value<int>(key, v);
  // paths
  else if (key == "paths.corpus") cfg.corpus_path = config_value<std::string>(key, v);
  else if (key == "paths.dev") cfg.dev_path = config_value<std::string>(key, v);
  else if (key == "paths.out") cfg.out_dir = config_value<std::string>(key, v);
  else if (key == "paths.checkpoint") cfg.checkpoint_path = config_value<std::string>(key, v);
  else if (key == "paths.vocab") cfg.vocab_path = config_value<std::string>(key, v);
  else if (key == "paths.inputs") cfg.inputs_path = config_value<std::string>(key, v);
  else if (key == "paths.references") cfg.references_path = config_value<std::string>(key, v);
  else throw config_error("unknown config key \"" + key + "\"");
}

/// Full canonical flat serialization; nlohmann objects iterate sorted, so
/// dump() of this is the canonical form the config hash covers.
inline nlohmann::json run_config_to_flat_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["model.d_model"] = cfg.model.d_model;
  j["model.n_heads"] = cfg.model.n_heads;
  j["model.n_enc_layers"] = cfg.model.n_enc_layers;
  j["model.n_dec_layers"] = cfg.model.n_dec_layers;
  j["model.d_ff"] = cfg.model.d_ff;
  j["model.max_source_len"] = cfg.model.max_source_len;
  j["model.dropout"] = cfg.model.dropout_rate;
  j["train.batch_size"] = cfg.train.batch_size;
  j["train.base_lr"] = cfg.train.base_lr;
  j["train.warmup_steps"] = cfg.train.warmup_steps;
  j["train.max_steps"] = cfg.train.max_steps;
  j["train.optimizer"] = cfg.train.optimizer;
  j["train.adam_beta1"] = cfg.train.adam_beta1;
  j["train.adam_beta2"] = cfg.train.adam_beta2;
  j["train.adam_eps"] = cfg.train.adam_eps;
  j["train.weight_decay"] = cfg.train.weight_decay;
  j["train.clip_norm"] = cfg.train.clip_norm;
  j["train.eval_every"] = cfg.eval_every;
  j["train.checkpoint_every"] = cfg.checkpoint_every;
  j["decode.strategy"] = strategy_name(cfg.decode.strategy);
  j["decode.beam_width"] = cfg.decode.beam_width;
  j["decode.top_k"] = cfg.decode.top_k;
  j["decode.top_p"] = cfg.decode.top_p;
  j["decode.num_candidates"] = cfg.decode.num_candidates;
  j["decode.max_body_tokens"] = cfg.decode.max_body_tokens;
  j["decode.max_sentences"] = cfg.decode.max_sentences;
  j["decode.temperature"] = cfg.decode.temperature;
  j["decode.uniform_first"] = cfg.decode.uniform_first;
  j["decode.force_order"] = cfg.decode.force_order;
  j["corpus.min_freq"] = cfg.min_freq;
  j["seed"] = cfg.seed;
  j["threads"] = cfg.threads;
  j["paths.corpus"] = cfg.corpus_path;
  j["paths.dev"] = cfg.dev_path;
  j["paths.out"] = cfg.out_dir;
  j["paths.checkpoint"] = cfg.checkpoint_path;
  j["paths.vocab"] = cfg.vocab_path;
  j["paths.inputs"] = cfg.inputs_path;
  j["paths.references"] = cfg.references_path;
  return j;
}

inline std::uint64_t run_config_hash(const RunConfig& cfg) {
  const std::string canon = run_config_to_flat_json(cfg).dump();
  return fnv1a64(canon.data(), canon.size());
}

/// Load a flat dotted-key JSON config file into `cfg`. Nested objects and
/// unknown keys are configuration errors.
inline void load_run_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw config_error("config file " + path + " must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (value.is_object()) {
      throw config_error("config key \"" + key + "\" holds a nested object; use flat dotted keys");
    }
    apply_config_key(cfg, key, value);
  }
}

}  // namespace permgen
