#include "citelm/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

namespace citelm {

namespace {

std::set<TokenId> facts_of(std::span<const TokenId> tokens, const Vocabulary& vocab) {
  std::set<TokenId> out;
  for (TokenId t : tokens) {
    if (vocab.is_fact(t)) out.insert(t);
  }
  return out;
}

const Document* find_document(std::span<const Document> documents, int marker) {
  for (const Document& d : documents) {
    if (d.index == marker) return &d;
  }
  return nullptr;
}

}  // namespace

bool ContainmentOracle::supports(std::span<const TokenId> sentence,
                                 std::span<const Document* const> documents) const {
  std::set<TokenId> pool;
  for (const Document* d : documents) pool.insert(d->tokens.begin(), d->tokens.end());
  const auto facts = facts_of(sentence, vocab_);
  return std::all_of(facts.begin(), facts.end(), [&](TokenId t) { return pool.count(t) > 0; });
}

bool ContainmentOracle::relevant(std::span<const TokenId> sentence, const Document& document) const {
  const auto facts = facts_of(sentence, vocab_);
  return std::any_of(document.tokens.begin(), document.tokens.end(),
                     [&](TokenId t) { return facts.count(t) > 0; });
}

JudgmentTableOracle::JudgmentTableOracle(Vocabulary vocab, const nlohmann::json& table)
    : vocab_(vocab) {
  for (const auto& row : table) {
    std::string k = row.at("sentence").get<std::string>();
    for (const auto& d : row.at("documents")) k += "\n" + d.get<std::string>();
    if (row.contains("supports")) supports_[k] = row.at("supports").get<bool>();
    if (row.contains("relevant")) relevant_[k] = row.at("relevant").get<bool>();
  }
}

std::string JudgmentTableOracle::key(std::span<const TokenId> sentence,
                                     std::span<const Document* const> documents) const {
  std::string k = render(sentence, vocab_);
  for (const Document* d : documents) k += "\n" + render(std::span<const TokenId>(d->tokens), vocab_);
  return k;
}

bool JudgmentTableOracle::supports(std::span<const TokenId> sentence,
                                   std::span<const Document* const> documents) const {
  const auto it = supports_.find(key(sentence, documents));
  return it != supports_.end() && it->second;
}

bool JudgmentTableOracle::relevant(std::span<const TokenId> sentence, const Document& document) const {
  const Document* one[] = {&document};
  const auto it = relevant_.find(key(sentence, one));
  return it != relevant_.end() && it->second;
}

double citation_recall(const AttributedResponse& response, std::span<const Document> documents,
                       const EntailmentOracle& oracle) {
  std::size_t scored = 0, supported = 0;
  for (const Segment& seg : response.segments) {
    if (seg.sentence.empty()) continue;
    ++scored;
    if (seg.citations.empty()) continue;
    std::vector<const Document*> cited;
    bool valid = true;
    for (int c : seg.citations) {
      const Document* d = find_document(documents, c);
      if (!d) {
        valid = false;
        break;
      }
      if (std::find(cited.begin(), cited.end(), d) == cited.end()) cited.push_back(d);
    }
    supported += valid && oracle.supports(seg.sentence, cited);
  }
  return scored ? static_cast<double>(supported) / static_cast<double>(scored) : 0.0;
}

double citation_precision(const AttributedResponse& response, std::span<const Document> documents,
                          const EntailmentOracle& oracle) {
  std::size_t total = 0, relevant = 0;
  bool any_sentence = false;
  for (const Segment& seg : response.segments) {
    any_sentence = any_sentence || !seg.sentence.empty();
    for (int c : seg.citations) {
      ++total;
      const Document* d = find_document(documents, c);
      relevant += d && oracle.relevant(seg.sentence, *d);
    }
  }
  if (total == 0) return any_sentence ? 0.0 : 1.0;
  return static_cast<double>(relevant) / static_cast<double>(total);
}

double correctness(const AttributedResponse& response, const AttributedResponse& gold,
                   const Vocabulary& vocab) {
  std::set<TokenId> wanted;
  for (const Segment& s : gold.segments) {
    const auto f = facts_of(s.sentence, vocab);
    wanted.insert(f.begin(), f.end());
  }
  if (wanted.empty()) return 1.0;
  std::set<TokenId> produced;
  for (const Segment& s : response.segments) produced.insert(s.sentence.begin(), s.sentence.end());
  const auto hits = std::count_if(wanted.begin(), wanted.end(), [&](TokenId t) { return produced.count(t) > 0; });
  return static_cast<double>(hits) / static_cast<double>(wanted.size());
}

double f1(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

double mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double improvement(double updated, double baseline) { return (updated - baseline) / baseline * 100.0; }

double round1(double v) { return std::round(v * 10.0) / 10.0; }

ExampleMetrics score_example(const AttributedResponse& response, const Example& example,
                             const EntailmentOracle& oracle, const Vocabulary& vocab) {
  ExampleMetrics m;
  const std::span<const Document> docs(example.documents);
  m.citation_precision = citation_precision(response, docs, oracle);
  m.citation_recall = citation_recall(response, docs, oracle);
  m.citation_f1 = f1(m.citation_precision, m.citation_recall);
  m.correctness = correctness(response, example.gold, vocab);
  for (const Segment& s : response.segments) {
    m.n_sentences += !s.sentence.empty();
    m.n_citations += s.citations.size();
  }
  return m;
}

MetricsReport score(std::span<const AttributedResponse> responses, std::span<const Example> examples,
                    const EntailmentOracle& oracle, const Vocabulary& vocab) {
  if (responses.size() != examples.size()) throw LengthMismatch("one response per example required");
  MetricsReport r;
  std::vector<double> p, rc, c;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    r.per_example.push_back(score_example(responses[i], examples[i], oracle, vocab));
    const ExampleMetrics& m = r.per_example.back();
    p.push_back(m.citation_precision);
    rc.push_back(m.citation_recall);
    c.push_back(m.correctness);
    r.aggregate.n_sentences += m.n_sentences;
    r.aggregate.n_citations += m.n_citations;
  }
  r.aggregate.citation_precision = mean(p);
  r.aggregate.citation_recall = mean(rc);
  r.aggregate.citation_f1 = f1(r.aggregate.citation_precision, r.aggregate.citation_recall);
  r.aggregate.correctness = mean(c);
  return r;
}

namespace {

nlohmann::ordered_json metrics_json(const ExampleMetrics& m) {
  return {{"citation_precision", round1(100.0 * m.citation_precision)},
          {"citation_recall", round1(100.0 * m.citation_recall)},
          {"citation_f1", round1(100.0 * m.citation_f1)},
          {"correctness", round1(100.0 * m.correctness)},
          {"n_sentences", m.n_sentences},
          {"n_citations", m.n_citations}};
}

}  // namespace

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["aggregate"] = metrics_json(aggregate);
  j["n_examples"] = per_example.size();
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const ExampleMetrics& m : per_example) rows.push_back(metrics_json(m));
  j["per_example"] = std::move(rows);
  return j;
}

void export_heatmap(const ForwardTrace<double>& trace, std::size_t begin, std::size_t end,
                    std::span<const TaggedToken> tokens, const Vocabulary& vocab,
                    const std::filesystem::path& path) {
  if (trace.attention.size() == 0) throw InvalidConfig("trace has no attention layer");
  if (begin > end || end > static_cast<std::size_t>(trace.length()) || tokens.size() != static_cast<std::size_t>(trace.length())) {
    throw LengthMismatch("heatmap region outside the trace");
  }
  std::ofstream grid(path, std::ios::binary);
  if (!grid) throw Error("cannot open " + path.string());
  char buf[32];
  for (std::size_t i = begin; i < end; ++i) {
    for (std::size_t j = begin; j < end; ++j) {
      std::snprintf(buf, sizeof(buf), "%.9g",
                    trace.attention(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      grid << (j == begin ? "" : ",") << buf;
    }
    grid << '\n';
  }
  std::filesystem::path index_path = path;
  index_path += ".index.csv";
  std::ofstream index(index_path, std::ios::binary);
  if (!index) throw Error("cannot open " + index_path.string());
  index << "row,position,token,role,marker\n";
  for (std::size_t i = begin; i < end; ++i) {
    const TaggedToken& t = tokens[i];
    index << (i - begin) << ',' << i << ',' << (t.is_citation() ? "[" + std::to_string(t.marker) + "]" : vocab.name(t.id))
          << ',' << (t.is_citation() ? "citation" : "default") << ',' << t.marker << '\n';
  }
  if (!grid || !index) throw Error("failed writing heatmap");
}

}  // namespace citelm
