// permgen: train, generate, evaluate, and inspect sentence-permutation
// paragraph generators from the command line.
//
// Exit codes: 0 success, 1 configuration error, 2 data/IO error, 3 numeric
// failure (including anything unexpected).
//
// Precedence: built-in defaults < --config file < explicit flags. The config
// file is applied before flag parsing; CLI11 assigns bound variables only for
// flags that were actually given.

#include <cmath>
#include <filesystem>
#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "permgen/permgen.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace permgen;

namespace {

using Real = float;

std::string hash_hex(const RunConfig& cfg) { return hex_u64(run_config_hash(cfg)); }

/// Mean per-token permuted NLL over a corpus, one order drawn per example.
/// The generator is derived from (seed, step) so repeated runs log the same
/// values without touching the training RNG stream.
double dev_nll(Trainer<Real>& trainer, const std::vector<Paragraph>& dev, std::uint64_t seed,
               std::int64_t step) {
  Rng eval_rng(seed ^ (0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(step)));
  double total = 0.0;
  for (const auto& p : dev) {
    auto order = random_order(p.T(), eval_rng);
    auto loss = trainer.permuted_nll(nullptr, std::vector<Paragraph>{p},
                                     std::vector<SentenceOrder>{order});
    total += static_cast<double>(loss.item());
  }
  return total / static_cast<double>(dev.size());
}

void write_line(std::ofstream& out, const json& j) { out << j.dump() << "\n"; }

int cmd_train(RunConfig cfg, const std::string& resume_path) {
  cfg.finalize();
  // short runs stay usable without a config file overriding the warmup
  cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, cfg.train.max_steps);
  cfg.train.validate();
  if (cfg.corpus_path.empty()) throw config_error("train: --corpus is required");

  const auto raw = load_jsonl_raw(cfg.corpus_path);
  auto vocab = build_vocabulary(raw, cfg.min_freq);
  cfg.model.vocab_size = vocab.size();
  cfg.model.validate();
  const auto corpus = numericalize_all(raw, vocab);
  const auto dev =
      cfg.dev_path.empty() ? corpus : numericalize_all(load_jsonl_raw(cfg.dev_path), vocab);

  std::optional<CheckpointData> resume;
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path, vocab.hash());
    if (model_config_to_json(resume->config) != model_config_to_json(cfg.model)) {
      throw config_error("resume: checkpoint model configuration differs from the requested one");
    }
  }

  fs::create_directories(cfg.out_dir);
  vocab.save(cfg.out_dir + "/vocab.txt");
  const std::string chash = hash_hex(cfg);
  {
    std::ofstream cfg_out(cfg.out_dir + "/config.json");
    if (!cfg_out) throw data_error("cannot write " + cfg.out_dir + "/config.json");
    json j;
    j["config_hash"] = chash;
    j["run_config"] = run_config_to_flat_json(cfg);
    cfg_out << j.dump(2) << "\n";
  }

  auto model = resume ? Seq2SeqModel<Real>(resume->config,
                                           params_from_blobs<Real>(resume->config, resume->params))
                      : Seq2SeqModel<Real>::fresh(cfg.model, cfg.seed);
  Trainer<Real> trainer(model, cfg.train);
  if (resume) {
    trainer.restore(*resume);
    log_info("resumed from " + resume_path + " at step " + std::to_string(trainer.step()));
  }

  std::ofstream log(cfg.out_dir + "/train_log.jsonl", std::ios::trunc);
  if (!log) throw data_error("cannot write " + cfg.out_dir + "/train_log.jsonl");
  write_line(log, json{{"type", "meta"},
                       {"config_hash", chash},
                       {"vocab_hash", hex_u64(vocab.hash())},
                       {"examples", corpus.size()},
                       {"run_config", run_config_to_flat_json(cfg)}});
  write_line(log,
             json{{"type", "dev"}, {"step", trainer.step()},
                  {"dev_nll", dev_nll(trainer, dev, cfg.seed, trainer.step())}});

  auto save_as = [&](const std::string& name) {
    auto data = trainer.to_checkpoint(vocab.hash());
    data.extra["config_hash"] = chash;
    data.extra["run_config"] = run_config_to_flat_json(cfg).dump();
    save_checkpoint(cfg.out_dir + "/" + name, data);
  };

  while (trainer.step() < cfg.train.max_steps) {
    auto m = trainer.train_step(corpus);
    write_line(log, json{{"type", "step"},
                         {"step", m.step},
                         {"loss", m.loss},
                         {"lr", m.lr},
                         {"grad_norm", m.grad_norm},
                         {"pi_sample", m.pi_sample}});
    if ((cfg.eval_every > 0 && m.step % cfg.eval_every == 0) || m.step == cfg.train.max_steps) {
      write_line(log, json{{"type", "dev"},
                           {"step", m.step},
                           {"dev_nll", dev_nll(trainer, dev, cfg.seed, m.step)}});
    }
    if (cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 &&
        m.step != cfg.train.max_steps) {
      std::ostringstream name;
      name << "checkpoint_" << std::setw(6) << std::setfill('0') << m.step << ".pgen";
      save_as(name.str());
    }
  }
  save_as("checkpoint.pgen");
  log_info("trained to step " + std::to_string(trainer.step()) + "; artifacts in " +
               cfg.out_dir);
  return 0;
}

/// Inputs for generation need only the "input" field; "sentences" is
/// optional (present in full corpus files, absent in bare input lists).
std::vector<std::vector<std::string>> load_input_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open inputs file: " + path);
  std::vector<std::vector<std::string>> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = "inputs line " + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw data_error(where + ": invalid JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("input")) {
      throw data_error(where + ": missing \"input\" field");
    }
    std::vector<std::string> toks;
    const auto& input = j["input"];
    if (input.is_string()) {
      toks = tokenize(input.get<std::string>());
    } else if (input.is_array()) {
      bool first = true;
      for (const auto& item : input) {
        if (!item.is_string()) throw data_error(where + ": \"input\" array must hold strings");
        if (!first) toks.push_back(";");
        first = false;
        auto t = tokenize(item.get<std::string>());
        toks.insert(toks.end(), t.begin(), t.end());
      }
    } else {
      throw data_error(where + ": \"input\" must be a string or string array");
    }
    if (toks.empty()) throw data_error(where + ": empty input");
    out.push_back(std::move(toks));
  }
  if (out.empty()) throw data_error("inputs file " + path + " holds no records");
  return out;
}

json candidate_to_json(const Candidate& c, const Vocabulary& vocab) {
  json sentences = json::array();
  for (const auto& body : c.sentences) {
    json words = json::array();
    for (int id : body) words.push_back(vocab.token_of(id));
    sentences.push_back(std::move(words));
  }
  return json{{"sentences", std::move(sentences)},
              {"sentence_indices", c.sentence_indices},
              {"order", c.order},
              {"score", c.score},
              {"truncated", c.truncated},
              {"replacement_fallback", c.replacement_fallback}};
}

int cmd_generate(RunConfig cfg, const std::string& out_path) {
  cfg.finalize();
  if (cfg.checkpoint_path.empty()) throw config_error("generate: --checkpoint is required");
  if (cfg.inputs_path.empty()) throw config_error("generate: --inputs is required");
  if (cfg.vocab_path.empty()) {
    cfg.vocab_path = (fs::path(cfg.checkpoint_path).parent_path() / "vocab.txt").string();
  }

  auto vocab = Vocabulary::load(cfg.vocab_path);
  auto ckpt = load_checkpoint(cfg.checkpoint_path, vocab.hash());
  Seq2SeqModel<Real> model(ckpt.config, params_from_blobs<Real>(ckpt.config, ckpt.params));
  const std::string chash = hash_hex(cfg);

  const auto inputs = load_input_lines(cfg.inputs_path);
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw data_error("cannot write " + out_path);

  for (const auto& toks : inputs) {
    std::vector<int> source;
    source.reserve(toks.size());
    for (const auto& tok : toks) source.push_back(vocab.id_of(tok));
    auto cands = decode_paragraph(model, source, cfg.decode);
    json line;
    line["source"] = detokenize(toks);
    line["config_hash"] = chash;
    json arr = json::array();
    for (const auto& c : cands) arr.push_back(candidate_to_json(c, vocab));
    line["candidates"] = std::move(arr);
    write_line(out, line);
  }
  log_info("wrote " + std::to_string(inputs.size()) + " generation records to " + out_path);
  return 0;
}

struct GenerationRecord {
  std::string source;
  std::string config_hash;
  std::vector<std::vector<std::string>> candidates;  // sentence bodies flattened per candidate
};

GenerationRecord parse_generation_line(const std::string& line, int line_no) {
  const std::string where = "generation line " + std::to_string(line_no);
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw data_error(where + ": invalid JSON: " + e.what());
  }
  GenerationRecord rec;
  try {
    rec.source = j.at("source").get<std::string>();
    if (j.contains("config_hash")) rec.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& cand : j.at("candidates")) {
      std::vector<std::string> flat;
      for (const auto& sent : cand.at("sentences")) {
        for (const auto& w : sent) flat.push_back(w.get<std::string>());
      }
      rec.candidates.push_back(std::move(flat));
    }
  } catch (const json::exception& e) {
    throw data_error(where + ": " + e.what());
  }
  if (rec.candidates.empty()) throw data_error(where + ": empty candidate list");
  return rec;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& generation_path,
                 const std::string& out_path, bool one_vs_rest) {
  if (generation_path.empty()) throw config_error("evaluate: --generation is required");
  if (cfg.references_path.empty()) throw config_error("evaluate: --references is required");

  std::ifstream gen_in(generation_path);
  if (!gen_in) throw data_error("cannot open generation file: " + generation_path);
  std::vector<GenerationRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(gen_in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    records.push_back(parse_generation_line(line, line_no));
  }
  if (records.empty()) throw data_error("generation file " + generation_path + " holds no records");

  const auto refs_raw = load_jsonl_raw(cfg.references_path);
  if (refs_raw.size() != records.size()) {
    throw data_error("evaluate: " + std::to_string(records.size()) + " generation records vs " +
                     std::to_string(refs_raw.size()) + " references");
  }

  std::vector<std::string> misaligned;
  HypothesisSet set;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].source != detokenize(refs_raw[i].input_tokens)) {
      misaligned.push_back(std::to_string(i + 1));
      continue;
    }
    HypothesisGroup g;
    g.hypotheses = records[i].candidates;
    for (const auto& sent : refs_raw[i].sentence_tokens) {
      g.reference.insert(g.reference.end(), sent.begin(), sent.end());
    }
    set.push_back(std::move(g));
  }
  if (!misaligned.empty()) {
    std::string ids;
    for (std::size_t i = 0; i < misaligned.size() && i < 10; ++i) {
      if (i) ids += ", ";
      ids += misaligned[i];
    }
    throw data_error("evaluate: sources disagree with reference inputs at lines: " + ids);
  }

  auto report = evaluate_hypotheses(set, one_vs_rest);

  json out;
  out["config_hash"] = records.front().config_hash;
  out["scalars"] = report.scalars;
  out["per_source"] = report.per_source;
  out["config"] = report.config;
  {
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw data_error("cannot write " + out_path);
    f << out.dump(2) << "\n";
  }

  std::cout << std::left << std::setw(18) << "metric" << "value\n";
  for (const auto& [name, value] : report.scalars) {
    std::cout << std::left << std::setw(18) << name << std::fixed << std::setprecision(6) << value
              << "\n";
  }
  log_info("wrote report to " + out_path);
  return 0;
}

int inspect_checkpoint(const std::string& path) {
  auto ckpt = load_checkpoint(path);
  std::cout << "checkpoint  " << path << "\n";
  std::cout << "step        " << ckpt.step << "\n";
  std::cout << "optimizer   " << ckpt.optimizer << "\n";
  std::cout << "vocab_hash  " << hex_u64(ckpt.vocab_hash) << "\n";
  auto it = ckpt.extra.find("config_hash");
  if (it != ckpt.extra.end()) std::cout << "config_hash " << it->second << "\n";
  std::cout << "tensors     " << ckpt.params.size() << "\n";
  for (const auto& b : ckpt.params) {
    double sq = 0.0;
    for (float v : b.data) sq += static_cast<double>(v) * static_cast<double>(v);
    std::cout << "  " << std::left << std::setw(32) << b.name << " [" << join_ints(b.shape, " x ")
              << "]  l2=" << std::setprecision(6) << std::sqrt(sq) << "\n";
  }
  return 0;
}

int inspect_sequence(const std::string& corpus_path, int line_no,
                     const std::vector<int>& order_arg) {
  const auto raw = load_jsonl_raw(corpus_path);
  if (line_no < 1 || static_cast<std::size_t>(line_no) > raw.size()) {
    throw data_error("inspect: line " + std::to_string(line_no) + " outside corpus of " +
                     std::to_string(raw.size()) + " records");
  }
  auto vocab = build_vocabulary(raw);
  auto p = numericalize(raw[static_cast<std::size_t>(line_no - 1)], vocab);

  SentenceOrder order = identity_order(p.T());
  if (!order_arg.empty()) {
    order.order = order_arg;
    order.validate(p.T());
  }
  auto seq = build_decoder_sequence(p, order);

  std::vector<std::string> toks, globals, locals;
  std::vector<std::size_t> widths;
  for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
    toks.push_back(vocab.token_of(seq.tokens[i]));
    globals.push_back(std::to_string(seq.global_pos[i]));
    locals.push_back(std::to_string(seq.local_pos[i]));
    widths.push_back(std::max({toks[i].size(), globals[i].size(), locals[i].size()}));
  }
  auto print_row = [&](const char* label, const std::vector<std::string>& cells) {
    std::cout << std::left << std::setw(8) << label;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      std::cout << (i ? " " : "") << std::left << std::setw(static_cast<int>(widths[i]))
                << cells[i];
    }
    std::cout << "\n";
  };
  std::cout << "order   [" << join_ints(order.order) << "]\n";
  print_row("tokens", toks);
  print_row("global", globals);
  print_row("local", locals);
  return 0;
}

int cmd_make_toy(const std::string& out_path, int n, std::uint64_t seed) {
  if (out_path.empty()) throw config_error("make-toy: --out is required");
  Rng rng(seed);
  write_jsonl(out_path, make_toy_corpus(n, rng));
  log_info("wrote " + std::to_string(n) + " paragraphs to " + out_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sentence-permutation paragraph generator"};
  app.require_subcommand(1);

  RunConfig cfg;
  std::string config_file, resume_path, generation_path, inspect_ckpt, inspect_seq;
  std::string strategy_text, force_order_text;
  std::string gen_out = "generation.jsonl", eval_out = "report.json", toy_out;
  bool one_vs_rest = false, uniform_first = false;
  int inspect_line = 1;
  int toy_n = 200;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "flat dotted-key JSON config file");
    sub->add_option("--seed", cfg.seed, "master seed");
    sub->add_option("--threads", cfg.threads, "worker count (1 = bit-reproducible)");
  };

  auto* train = app.add_subcommand("train", "run permutation-sampled training");
  add_common(train);
  train->add_option("--corpus", cfg.corpus_path, "training JSONL");
  train->add_option("--dev", cfg.dev_path, "held-out JSONL for periodic evaluation");
  train->add_option("--max-steps", cfg.train.max_steps, "optimizer steps");
  train->add_option("--out", cfg.out_dir, "artifact directory");
  train->add_option("--resume", resume_path, "checkpoint to continue from");

  auto* gen = app.add_subcommand("generate", "decode ranked candidate paragraphs");
  add_common(gen);
  gen->add_option("--checkpoint", cfg.checkpoint_path, "trained checkpoint");
  gen->add_option("--vocab", cfg.vocab_path, "vocabulary (default: vocab.txt beside checkpoint)");
  gen->add_option("--inputs", cfg.inputs_path, "JSONL with an \"input\" field per line");
  gen->add_option("--k", cfg.decode.num_candidates, "candidates per input");
  gen->add_option("--strategy", strategy_text, "beam | topk | nucleus");
  gen->add_option("--beam-width", cfg.decode.beam_width, "beam width");
  gen->add_option("--top-k", cfg.decode.top_k, "top-k cutoff");
  gen->add_option("--top-p", cfg.decode.top_p, "nucleus mass");
  gen->add_option("--temperature", cfg.decode.temperature, "sampling temperature");
  gen->add_option("--max-steps", cfg.decode.max_body_tokens, "body tokens per sentence cap");
  gen->add_option("--force-order", force_order_text, "comma-separated sentence order, e.g. 2,1,3");
  gen->add_flag("--uniform-first", uniform_first, "sample the first sentence index uniformly");
  gen->add_option("--out", gen_out, "output JSONL path");

  auto* eval = app.add_subcommand("evaluate", "score generations against references");
  add_common(eval);
  eval->add_option("--generation", generation_path, "generation JSONL");
  eval->add_option("--references", cfg.references_path, "reference corpus JSONL");
  eval->add_flag("--one-vs-rest", one_vs_rest, "joint multi-reference self-BLEU variant");
  eval->add_option("--out", eval_out, "report JSON path");

  auto* inspect = app.add_subcommand("inspect", "dump a checkpoint or a built sequence");
  inspect->add_option("--checkpoint", inspect_ckpt, "checkpoint to describe");
  inspect->add_option("--sequence", inspect_seq, "corpus JSONL to render one record from");
  inspect->add_option("--line", inspect_line, "1-based record number");
  inspect->add_option("--order", force_order_text, "comma-separated sentence order");

  auto* toy = app.add_subcommand("make-toy", "write a synthetic templated corpus");
  toy->add_option("--out", toy_out, "output JSONL path");
  toy->add_option("--n", toy_n, "paragraph count");
  toy->add_option("--seed", cfg.seed, "generator seed");

  // The config file must land before flag parsing so explicit flags win;
  // CLI11 assigns bound variables only for options that appear.
  std::string prescan_config;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) prescan_config = argv[i + 1];
    if (a.rfind("--config=", 0) == 0) prescan_config = a.substr(9);
  }

  try {
    if (!prescan_config.empty()) load_run_config_file(cfg, prescan_config);

    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      return app.exit(e) == 0 ? 0 : 1;
    }

    if (!strategy_text.empty() && !inspect->parsed()) {
      cfg.decode.strategy = strategy_from_string(strategy_text);
    }
    if (!force_order_text.empty()) cfg.decode.force_order = parse_force_order(force_order_text);
    if (uniform_first) cfg.decode.uniform_first = true;

    if (train->parsed()) return cmd_train(cfg, resume_path);
    if (gen->parsed()) return cmd_generate(cfg, gen_out);
    if (eval->parsed()) return cmd_evaluate(cfg, generation_path, eval_out, one_vs_rest);
    if (inspect->parsed()) {
      if (!inspect_ckpt.empty()) return inspect_checkpoint(inspect_ckpt);
      if (!inspect_seq.empty()) {
        return inspect_sequence(
            inspect_seq, inspect_line,
            force_order_text.empty() ? std::vector<int>{} : parse_force_order(force_order_text));
      }
      throw config_error("inspect: pass --checkpoint or --sequence");
    }
    if (toy->parsed()) return cmd_make_toy(toy_out, toy_n, cfg.seed);
    throw config_error("no subcommand selected");
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 3;
  }
}
