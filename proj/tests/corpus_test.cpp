#include <doctest.h>

#include <fstream>
#include <set>

#include "citelm/corpus.hpp"
#include "citelm/errors.hpp"
#include "support.hpp"

using namespace citelm;

namespace {

const Vocabulary kVocab(512, 8);

}  // namespace

TEST_CASE("normalize_markers replaces a marker with its reserved token") {
  const auto toks = normalize_markers("f3 [1] .", 5, kVocab);
  REQUIRE(toks.size() == 3);
  CHECK(toks[0] == TaggedToken::plain(kVocab.parse("f3")));
  CHECK(toks[1].is_citation());
  CHECK(toks[1].marker == 1);
  CHECK(toks[1].id == kVocab.citation_token(1));
  CHECK(toks[2] == TaggedToken::plain(id(Control::kPeriod)));
}

TEST_CASE("normalize_markers rejects bad markers") {
  CHECK_THROWS_AS(normalize_markers("[6]", 5, kVocab), OutOfRangeMarker);
  CHECK_THROWS_AS(normalize_markers("[0]", 5, kVocab), OutOfRangeMarker);
  CHECK_THROWS_AS(normalize_markers("f1 [2", 5, kVocab), MalformedMarker);
  CHECK_THROWS_AS(normalize_markers("[x]", 5, kVocab), MalformedMarker);
}

TEST_CASE("normalize_markers without markers tags everything default") {
  const auto toks = normalize_markers("w1 f2 .", 3, kVocab);
  REQUIRE(toks.size() == 3);
  for (const auto& t : toks) CHECK_FALSE(t.is_citation());
  CHECK(render(std::span<const TaggedToken>(toks), kVocab) == "w1 f2 .");
}

TEST_CASE("normalize_markers is idempotent through render") {
  const auto once = normalize_markers("w4 f7 [2] [3] . f1 [1] .", 3, kVocab);
  const auto twice = normalize_markers(render(std::span<const TaggedToken>(once), kVocab), 3, kVocab);
  CHECK(once == twice);
}

TEST_CASE("assemble_prompt labels documents with citation tokens") {
  SynthOptions o;
  o.n_docs = 5;
  const Example ex = generate_synthetic_corpus(o, kVocab).front();
  const Prompt p = assemble_prompt(ex, kVocab);
  REQUIRE(p.citation_positions.size() == 5);
  int documents = 0;
  for (const auto& t : p.tokens) documents += t.id == id(Control::kDocument);
  CHECK(documents == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const TaggedToken& t = p.tokens[p.citation_positions[i]];
    CHECK(t.marker == static_cast<int>(i) + 1);
    CHECK(p.tokens[p.citation_positions[i] - 1].id == id(Control::kDocument));
    if (i > 0) CHECK(p.citation_positions[i] > p.citation_positions[i - 1]);
  }
  CHECK(p.tokens.front().id == id(Control::kBos));
  CHECK(p.tokens.back().id == id(Control::kAnswer));
  CHECK(assemble_prompt(ex, kVocab).tokens == p.tokens);
}

TEST_CASE("synthetic corpus is deterministic and owns facts per document") {
  SynthOptions o;
  o.seed = 11;
  o.n_examples = 50;
  o.n_docs = 3;
  o.facts_per_doc = 2;
  const auto a = generate_synthetic_corpus(o, kVocab);
  const auto b = generate_synthetic_corpus(o, kVocab);
  CHECK(a == b);
  for (const Example& ex : a) {
    CHECK_NOTHROW(validate(ex, kVocab));
    std::set<TokenId> seen;
    for (const Document& d : ex.documents) {
      int facts = 0;
      for (TokenId t : d.tokens) {
        if (!kVocab.is_fact(t)) continue;
        ++facts;
        CHECK(seen.insert(t).second);
      }
      CHECK(facts == 2);
    }
    for (const Segment& s : ex.gold.segments) REQUIRE(s.citations.size() == 1);
  }
  o.seed = 12;
  CHECK(generate_synthetic_corpus(o, kVocab) != a);
}

TEST_CASE("synthetic corpus passes validation across seeds") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    SynthOptions o;
    o.seed = seed;
    o.n_examples = 8;
    o.n_docs = 1 + static_cast<int>(seed % 8);
    o.max_answers = 1 + static_cast<int>(seed % 3);
    for (const Example& ex : generate_synthetic_corpus(o, kVocab)) CHECK_NOTHROW(validate(ex, kVocab));
  }
}

TEST_CASE("synthetic corpus rejects impossible requests") {
  SynthOptions o;
  o.n_docs = 9;
  CHECK_THROWS_AS(generate_synthetic_corpus(o, kVocab), InvalidConfig);
  o.n_docs = 8;
  o.facts_per_doc = 100;
  CHECK_THROWS_AS(generate_synthetic_corpus(o, kVocab), VocabularyExhausted);
}

TEST_CASE("jsonl round trip") {
  const auto dir = testing::scratch_dir("corpus");
  SynthOptions o;
  o.seed = 3;
  o.n_examples = 20;
  const auto corpus = generate_synthetic_corpus(o, kVocab);
  write_jsonl(dir / "c.jsonl", corpus, kVocab);
  CHECK(read_jsonl(dir / "c.jsonl", kVocab) == corpus);

  std::ofstream(dir / "empty.jsonl").close();
  CHECK(read_jsonl(dir / "empty.jsonl", kVocab).empty());
}

TEST_CASE("jsonl parse errors carry the line number") {
  const Example ex = testing::small_example(kVocab);
  std::string line = to_json_line(ex, kVocab);
  CHECK(from_json_line(line, 1, kVocab) == ex);

  const auto pos = line.find("\"citations\":[");
  REQUIRE(pos != std::string::npos);
  const std::size_t digit = pos + std::string("\"citations\":[").size();
  line[digit] = '0';
  try {
    from_json_line(line, 7, kVocab);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 7);
  }
  CHECK_THROWS_AS(from_json_line("{not json", 2, kVocab), ParseError);
}

TEST_CASE("training sequence is prompt, flattened gold, end") {
  const Example ex = testing::small_example(kVocab);
  const TrainingSequence seq = training_sequence(ex, kVocab);
  const Prompt p = assemble_prompt(ex, kVocab);
  CHECK(seq.response_start == p.tokens.size());
  const auto flat = flatten(ex.gold, kVocab);
  CHECK(seq.tokens.size() == p.tokens.size() + flat.size() + 1);
  CHECK(seq.tokens.back().id == id(Control::kEnd));
}
