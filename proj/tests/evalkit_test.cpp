#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "citelm/decoder.hpp"
#include "citelm/evalkit.hpp"
#include "support.hpp"

using namespace citelm;

namespace {

const Vocabulary kVocab(512, 8);

TokenId f(int k) { return kVocab.fact_begin() + k; }

// Three documents owning facts {0,1}, {2,3}, {4,5}.
Example three_docs() {
  Example ex;
  ex.query = {kVocab.query_begin()};
  ex.documents = {{1, {20, f(0), f(1)}}, {2, {21, f(2), f(3)}}, {3, {22, f(4), f(5)}}};
  ex.gold.segments = {{{20, f(0), f(1)}, {1}}, {{21, f(2), f(3)}, {2}}};
  return ex;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("gold responses score perfectly") {
  const ContainmentOracle oracle(kVocab);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SynthOptions o;
    o.seed = seed;
    o.n_examples = 30;
    o.max_answers = 3;
    for (const Example& ex : generate_synthetic_corpus(o, kVocab)) {
      const auto m = score_example(ex.gold, ex, oracle, kVocab);
      CHECK(m.citation_precision == 1.0);
      CHECK(m.citation_recall == 1.0);
      CHECK(m.correctness == 1.0);
    }
  }
}

TEST_CASE("citation recall counts supported sentences") {
  const ContainmentOracle oracle(kVocab);
  const Example ex = three_docs();
  const std::span<const Document> docs(ex.documents);
  CHECK(citation_recall(ex.gold, docs, oracle) == 1.0);

  AttributedResponse stripped = ex.gold;
  for (auto& s : stripped.segments) s.citations.clear();
  CHECK(citation_recall(stripped, docs, oracle) == 0.0);

  AttributedResponse half = ex.gold;
  half.segments[1].citations.clear();
  CHECK(citation_recall(half, docs, oracle) == 0.5);

  // Joint support: a sentence spanning two documents needs both cited.
  AttributedResponse joint;
  joint.segments = {{{f(0), f(2)}, {1, 2}}};
  CHECK(citation_recall(joint, docs, oracle) == 1.0);
  joint.segments[0].citations = {1};
  CHECK(citation_recall(joint, docs, oracle) == 0.0);

  CHECK(citation_recall(AttributedResponse{}, docs, oracle) == 0.0);
}

TEST_CASE("citation precision counts relevant citations") {
  const ContainmentOracle oracle(kVocab);
  const Example ex = three_docs();
  const std::span<const Document> docs(ex.documents);
  CHECK(citation_precision(ex.gold, docs, oracle) == 1.0);

  AttributedResponse extra = ex.gold;
  extra.segments[0].citations.push_back(3);
  CHECK(citation_precision(extra, docs, oracle) == doctest::Approx(2.0 / 3.0));

  AttributedResponse bare = ex.gold;
  for (auto& s : bare.segments) s.citations.clear();
  CHECK(citation_precision(bare, docs, oracle) == 0.0);
  CHECK(citation_precision(AttributedResponse{}, docs, oracle) == 1.0);
}

TEST_CASE("perturbations move metrics the right way") {
  const ContainmentOracle oracle(kVocab);
  std::mt19937_64 rng(8);
  SynthOptions o;
  o.n_examples = 50;
  o.max_answers = 3;
  for (const Example& ex : generate_synthetic_corpus(o, kVocab)) {
    const std::span<const Document> docs(ex.documents);
    AttributedResponse r = ex.gold;
    const double p0 = citation_precision(r, docs, oracle), r0 = citation_recall(r, docs, oracle);
    const std::size_t i = rng() % r.segments.size();
    AttributedResponse fewer = r;
    fewer.segments[i].citations.clear();
    Segment& seg = r.segments[i];
    CHECK(citation_recall(fewer, docs, oracle) <= r0);
    for (const Document& d : ex.documents) {
      if (!oracle.relevant(seg.sentence, d)) {
        seg.citations.push_back(d.index);
        break;
      }
    }
    CHECK(citation_precision(r, docs, oracle) <= p0);
  }
}

TEST_CASE("f1 and table arithmetic") {
  CHECK(std::abs(f1(76.3, 74.4) - 75.3) <= 0.05);
  CHECK(f1(42.0, 42.0) == doctest::Approx(42.0));
  CHECK(f1(0.0, 55.0) == 0.0);
  CHECK(f1(0.0, 0.0) == 0.0);
  const double avg[] = {75.3, 54.8, 29.6};
  CHECK(std::abs(mean(avg) - 53.2) <= 0.05);
  CHECK(std::abs(improvement(53.2, 50.3) - 5.8) <= 0.1);
  CHECK(std::abs(improvement(24.3, 20.7) - 17.4) <= 0.1);
  CHECK(round1(75.349) == doctest::Approx(75.3));

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  for (int i = 0; i < 1000; ++i) {
    const double p = u(rng), r = u(rng);
    CHECK(f1(p, r) <= std::max(p, r) + 1e-12);
    CHECK(f1(p, r) >= std::min(p, r) - 1e-12);
  }
}

TEST_CASE("correctness is fact recall") {
  Example ex;
  ex.gold.segments = {{{f(0), f(1)}, {1}}, {{f(2), f(3)}, {2}}};
  CHECK(correctness(ex.gold, ex.gold, kVocab) == 1.0);
  CHECK(correctness(AttributedResponse{}, ex.gold, kVocab) == 0.0);
  AttributedResponse three;
  three.segments = {{{f(0), f(1), f(3)}, {}}};
  CHECK(correctness(three, ex.gold, kVocab) == 0.75);
}

TEST_CASE("report aggregates and serializes") {
  const ContainmentOracle oracle(kVocab);
  const Example ex = three_docs();
  AttributedResponse half = ex.gold;
  half.segments[1].citations.clear();
  const std::vector<AttributedResponse> responses{ex.gold, half};
  const std::vector<Example> examples{ex, ex};
  const auto report = score(responses, examples, oracle, kVocab);
  CHECK(report.aggregate.citation_recall == doctest::Approx(0.75));
  CHECK(report.aggregate.citation_precision == doctest::Approx(1.0));
  const auto j = report.to_json();
  CHECK(j["aggregate"]["citation_recall"] == 75.0);
  CHECK(j["aggregate"]["citation_f1"] == 85.7);
  CHECK(j["per_example"].size() == 2);
}

TEST_CASE("judgment table oracle") {
  const Example ex = three_docs();
  const nlohmann::json table = nlohmann::json::array({
      {{"sentence", "w4 f0 f1"}, {"documents", {"w4 f0 f1"}}, {"supports", true}, {"relevant", true}},
  });
  const JudgmentTableOracle oracle(kVocab, table);
  const std::span<const Document> docs(ex.documents);
  AttributedResponse r;
  r.segments = {ex.gold.segments[0]};
  CHECK(citation_recall(r, docs, oracle) == 1.0);
  CHECK(citation_precision(r, docs, oracle) == 1.0);
  CHECK(citation_recall(ex.gold, docs, oracle) == 0.5);
}

TEST_CASE("heatmap export") {
  const auto dir = testing::scratch_dir("heatmap");
  const auto s = ModelState<double>::initialize(testing::small_config(3));
  const Vocabulary v = s.config.vocabulary();
  const Example ex = testing::small_example(v, 3);
  const TrainingSequence seq = training_sequence(ex, v);
  const auto set = build_citation_set(s, std::span<const Document>(ex.documents));
  const auto tr = forward(s, splice(s, std::span<const TaggedToken>(seq.tokens), set));
  const std::size_t begin = seq.response_start, end = seq.tokens.size();
  export_heatmap(tr, begin, end, seq.tokens, v, dir / "a.csv");
  export_heatmap(tr, begin, end, seq.tokens, v, dir / "b.csv");
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  CHECK(slurp(dir / "a.csv.index.csv") == slurp(dir / "b.csv.index.csv"));

  std::istringstream grid(slurp(dir / "a.csv"));
  std::size_t rows = 0;
  for (std::string line; std::getline(grid, line); ++rows) {
    std::istringstream cells(line);
    std::size_t col = 0;
    for (std::string cell; std::getline(cells, cell, ','); ++col) {
      if (col > rows) CHECK(std::stod(cell) == 0.0);
    }
    CHECK(col == end - begin);
  }
  CHECK(rows == end - begin);
  for (Eigen::Index i = 0; i < tr.attention.rows(); ++i) CHECK(std::abs(tr.attention.row(i).sum() - 1.0) < 1e-5);
}
