#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <set>

#include "permgen/corpus.hpp"
#include "permgen/toy.hpp"
#include "permgen/vocab.hpp"

using namespace permgen;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/permgen_test_" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
  void write(const std::string& content) const {
    std::ofstream out(path, std::ios::binary);
    out << content;
  }
};

}  // namespace

TEST_CASE("tokenize lowercases, splits whitespace, detaches punctuation") {
  auto t = tokenize("I started a company.");
  REQUIRE(t == std::vector<std::string>{"i", "started", "a", "company", "."});
  REQUIRE(tokenize("").empty());
  REQUIRE(tokenize("A  B") == std::vector<std::string>{"a", "b"});
  REQUIRE(tokenize("don't stop") == std::vector<std::string>{"don", "'", "t", "stop"});
  REQUIRE(tokenize("Hello, world!") == std::vector<std::string>{"hello", ",", "world", "!"});
  // angle brackets and hyphens survive as one token
  REQUIRE(tokenize("<B-3> stays") == std::vector<std::string>{"<b-3>", "stays"});
}

TEST_CASE("detokenize round trip modulo case and spacing") {
  const std::string s = "The  Cat\tsat.";
  auto toks = tokenize(s);
  auto back = detokenize(toks);
  REQUIRE(back == "the cat sat .");
  REQUIRE(tokenize(back) == toks);
}

TEST_CASE("reserved prefix occupies the first 24 ids") {
  Vocabulary v;
  REQUIRE(v.size() == kReservedCount);
  REQUIRE(kReservedCount == 24);
  REQUIRE(v.token_of(kPadId) == "<PAD>");
  REQUIRE(v.token_of(kBosId) == "<BOS>");
  REQUIRE(v.token_of(kUnkId) == "<UNK>");
  REQUIRE(v.token_of(kEopId) == "<EOP>");
  REQUIRE(v.token_of(begin_id(1)) == "<B-1>");
  REQUIRE(v.token_of(begin_id(10)) == "<B-10>");
  REQUIRE(v.token_of(end_id(1)) == "<E-1>");
  REQUIRE(v.token_of(end_id(10)) == "<E-10>");
  REQUIRE(begin_id(1) == 4);
  REQUIRE(end_id(10) == 23);
  for (int t = 1; t <= kTmax; ++t) {
    REQUIRE(is_begin_id(begin_id(t)));
    REQUIRE(is_end_id(end_id(t)));
    REQUIRE(begin_index(begin_id(t)) == t);
    REQUIRE(end_index(end_id(t)) == t);
  }
  REQUIRE_FALSE(is_begin_id(end_id(1)));
  REQUIRE_FALSE(is_reserved_id(24));
}

TEST_CASE("vocabulary orders by frequency then lexicographically") {
  std::vector<RawParagraph> corpus;
  RawParagraph r;
  r.input_tokens = {"zz"};
  r.sentence_tokens = {{"a", "a", "b"}};
  corpus.push_back(r);
  auto v = build_vocabulary(corpus, 1);
  // a:2, b:1, zz:1; b before zz on the tie
  REQUIRE(v.token_of(kReservedCount) == "a");
  REQUIRE(v.token_of(kReservedCount + 1) == "b");
  REQUIRE(v.token_of(kReservedCount + 2) == "zz");

  auto v2 = build_vocabulary(corpus, 2);
  REQUIRE(v2.size() == kReservedCount + 1);
  REQUIRE(v2.id_of("b") == kUnkId);
  REQUIRE(v2.id_of("a") == kReservedCount);

  REQUIRE_THROWS_AS(build_vocabulary({}, 1), data_error);
  REQUIRE_THROWS_AS(build_vocabulary(corpus, 0), config_error);
}

TEST_CASE("vocabulary builds are deterministic") {
  Rng rng(5);
  auto corpus = make_toy_corpus(40, rng);
  auto v1 = build_vocabulary(corpus, 1);
  auto v2 = build_vocabulary(corpus, 1);
  REQUIRE(v1.tokens() == v2.tokens());
  REQUIRE(v1.hash() == v2.hash());
}

TEST_CASE("vocabulary save and load round trip") {
  TempFile f("vocab.txt");
  Rng rng(6);
  auto corpus = make_toy_corpus(10, rng);
  auto v = build_vocabulary(corpus, 1);
  v.save(f.path);
  auto loaded = Vocabulary::load(f.path);
  REQUIRE(loaded.tokens() == v.tokens());
  REQUIRE(loaded.hash() == v.hash());
}

TEST_CASE("vocabulary load rejects tampered reserved prefix") {
  TempFile f("vocab_bad.txt");
  f.write("<PAD>\n<BOS>\nNOT_UNK\n");
  REQUIRE_THROWS_AS(Vocabulary::load(f.path), data_error);
}

TEST_CASE("load_jsonl parses records and reports line numbers on errors") {
  TempFile f("corpus.jsonl");
  f.write(R"({"input":"mounting popularity","sentences":["i started a company .","it was hard ."]})"
          "\n"
          R"({"input":["a","b"],"sentences":["x ."]})"
          "\n");
  auto raw = load_jsonl_raw(f.path);
  REQUIRE(raw.size() == 2);
  REQUIRE(raw[0].sentence_tokens.size() == 2);
  REQUIRE(raw[0].input_tokens == std::vector<std::string>{"mounting", "popularity"});
  // string-list input joined with a literal ";" token
  REQUIRE(raw[1].input_tokens == std::vector<std::string>{"a", ";", "b"});

  SECTION("malformed JSON names the line") {
    TempFile g("bad.jsonl");
    g.write("{\"input\":\"ok\",\"sentences\":[\"a .\"]}\nnot json\n");
    try {
      load_jsonl_raw(g.path);
      FAIL("expected data_error");
    } catch (const data_error& e) {
      REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }

  SECTION("sentence count above the cap is rejected with its line") {
    std::string sents;
    for (int i = 0; i < 11; ++i) {
      if (i) sents += ",";
      sents += "\"w .\"";
    }
    TempFile g("wide.jsonl");
    g.write("{\"input\":\"k\",\"sentences\":[" + sents + "]}\n");
    try {
      load_jsonl_raw(g.path);
      FAIL("expected data_error");
    } catch (const data_error& e) {
      const std::string msg = e.what();
      REQUIRE(msg.find("line 1") != std::string::npos);
      REQUIRE(msg.find("11") != std::string::npos);
    }
  }

  SECTION("empty sentence rejected") {
    TempFile g("empty_sent.jsonl");
    g.write(R"({"input":"k","sentences":["a .",""]})" "\n");
    REQUIRE_THROWS_AS(load_jsonl_raw(g.path), data_error);
  }

  SECTION("missing fields rejected") {
    TempFile g("nofield.jsonl");
    g.write(R"({"input":"k"})" "\n");
    REQUIRE_THROWS_AS(load_jsonl_raw(g.path), data_error);
  }

  SECTION("over-long sentence rejected") {
    std::string longsent;
    for (int i = 0; i < 63; ++i) longsent += "w ";
    TempFile g("long.jsonl");
    g.write(R"({"input":"k","sentences":[")" + longsent + R"("]})" "\n");
    REQUIRE_THROWS_AS(load_jsonl_raw(g.path), data_error);
  }
}

TEST_CASE("reserved token strings in data are rejected at load") {
  TempFile f("reserved.jsonl");
  f.write(R"({"input":"k","sentences":["the <b-3> runs ."]})" "\n");
  REQUIRE_THROWS_AS(load_jsonl_raw(f.path), data_error);

  TempFile g("reserved2.jsonl");
  g.write(R"({"input":"a <PAD> b","sentences":["fine ."]})" "\n");
  REQUIRE_THROWS_AS(load_jsonl_raw(g.path), data_error);
}

TEST_CASE("numericalize maps tokens and falls back to UNK") {
  auto corpus = toy_overfit_corpus();
  auto v = build_vocabulary(corpus, 1);
  auto p = numericalize(corpus[0], v);
  REQUIRE(p.T() == 3);
  for (int id : p.source_tokens) REQUIRE_FALSE(is_reserved_id(id));
  for (const auto& s : p.sentences)
    for (int id : s) REQUIRE_FALSE(is_reserved_id(id));

  RawParagraph unknown;
  unknown.input_tokens = {"zzzzz"};
  unknown.sentence_tokens = {{"qqqqq", "."}};
  auto pu = numericalize(unknown, v);
  REQUIRE(pu.source_tokens[0] == kUnkId);
  REQUIRE(pu.sentences[0][0] == kUnkId);
  REQUIRE(pu.sentences[0][1] != kUnkId);
}

TEST_CASE("corpus statistics are arithmetic means") {
  std::vector<Paragraph> ps(2);
  ps[0].source_tokens = {30, 31};
  ps[0].sentences = {{40}, {41, 42}};
  ps[1].source_tokens = {30, 31, 32, 33};
  ps[1].sentences = {{40, 41, 42, 43}};
  auto s = corpus_stats(ps);
  REQUIRE(s.examples == 2);
  REQUIRE(s.mean_input_tokens == 3.0);
  REQUIRE(s.mean_output_tokens == 3.5);
  REQUIRE(s.mean_output_sentences == 1.5);
}

TEST_CASE("bundled overfit corpus meets its own constraints") {
  auto corpus = toy_overfit_corpus();
  REQUIRE(corpus.size() == 8);
  std::set<std::string> words;
  for (const auto& r : corpus) {
    REQUIRE(r.sentence_tokens.size() == 3);
    for (const auto& s : r.sentence_tokens) {
      REQUIRE(s.size() <= 6);
      for (const auto& w : s) words.insert(w);
    }
    for (const auto& w : r.input_tokens) words.insert(w);
  }
  REQUIRE(words.size() <= 60);
}

TEST_CASE("generated toy corpus is valid and reloadable") {
  Rng rng(123);
  auto corpus = make_toy_corpus(50, rng);
  REQUIRE(corpus.size() == 50);
  for (const auto& r : corpus) {
    REQUIRE(r.sentence_tokens.size() >= 3);
    REQUIRE(r.sentence_tokens.size() <= 5);
  }

  TempFile f("toy.jsonl");
  write_jsonl(f.path, corpus);
  auto back = load_jsonl_raw(f.path);
  REQUIRE(back.size() == corpus.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    REQUIRE(back[i].input_tokens == corpus[i].input_tokens);
    REQUIRE(back[i].sentence_tokens == corpus[i].sentence_tokens);
  }

  // same seed, same corpus
  Rng rng2(123);
  auto corpus2 = make_toy_corpus(50, rng2);
  for (std::size_t i = 0; i < corpus.size(); ++i)
    REQUIRE(corpus[i].sentence_tokens == corpus2[i].sentence_tokens);
}

TEST_CASE("sentence splitter keeps terminators and is CLI-only sugar") {
  auto s = split_sentences("One. Two? Three! Four");
  REQUIRE(s == std::vector<std::string>{"One.", "Two?", "Three!", "Four"});
  REQUIRE(split_sentences("").empty());
}
