#include "citelm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "citelm/errors.hpp"

namespace citelm {

using ojson = nlohmann::ordered_json;

void validate(const Example& example, const Vocabulary& vocab) {
  const int n = example.n_docs();
  if (n < 1) throw InvalidExample("example has no documents");
  if (n > vocab.max_citations()) {
    throw InvalidExample("example has " + std::to_string(n) + " documents but only " +
                         std::to_string(vocab.max_citations()) + " citation tokens exist");
  }
  for (int i = 0; i < n; ++i) {
    const Document& doc = example.documents[static_cast<std::size_t>(i)];
    if (doc.index != i + 1) {
      throw InvalidExample("document indices must be contiguous from 1; found " +
                           std::to_string(doc.index) + " at slot " + std::to_string(i + 1));
    }
    if (doc.tokens.empty()) throw InvalidExample("document " + std::to_string(doc.index) + " is empty");
  }
  auto check_plain = [&](const std::vector<TokenId>& tokens, const char* what) {
    for (TokenId t : tokens) {
      if (!vocab.contains(t)) throw InvalidExample(std::string(what) + " has unknown token");
      if (vocab.is_citation(t)) throw InvalidExample(std::string(what) + " contains a citation token");
    }
  };
  check_plain(example.query, "query");
  for (const Document& doc : example.documents) check_plain(doc.tokens, "document");
  for (const Segment& seg : example.gold.segments) {
    check_plain(seg.sentence, "sentence");
    for (int c : seg.citations) {
      if (c < 1 || c > n) {
        throw InvalidExample("gold cites [" + std::to_string(c) + "] with " + std::to_string(n) +
                             " documents");
      }
    }
  }
}

std::vector<TaggedToken> normalize_markers(std::string_view text, int n_docs,
                                           const Vocabulary& vocab) {
  if (n_docs < 1) throw InvalidExample("n_docs must be at least 1");
  std::vector<TaggedToken> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      out.push_back(TaggedToken::plain(vocab.parse(word)));
      word.clear();
    }
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else if (ch == '[') {
      flush();
      const std::size_t close = text.find(']', i + 1);
      const std::size_t next_open = text.find('[', i + 1);
      if (close == std::string_view::npos || next_open < close) {
        throw MalformedMarker("unclosed marker at offset " + std::to_string(i));
      }
      const std::string_view digits = text.substr(i + 1, close - i - 1);
      int marker = 0;
      auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), marker);
      if (digits.empty() || ec != std::errc() || ptr != digits.data() + digits.size()) {
        throw MalformedMarker("non-numeric marker '[" + std::string(digits) + "]'");
      }
      if (marker < 1 || marker > n_docs) {
        throw OutOfRangeMarker("marker [" + std::to_string(marker) + "] outside [1, " +
                               std::to_string(n_docs) + "]");
      }
      out.push_back(TaggedToken::cite(vocab, marker));
      i = close;
    } else if (ch == ']') {
      throw MalformedMarker("stray ']' at offset " + std::to_string(i));
    } else if (ch == '.') {
      flush();
      out.push_back(TaggedToken::plain(id(Control::kPeriod)));
    } else {
      word.push_back(ch);
    }
  }
  flush();
  return out;
}

std::string render(std::span<const TaggedToken> tokens, const Vocabulary& vocab) {
  std::string out;
  for (const TaggedToken& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t.is_citation() ? "[" + std::to_string(t.marker) + "]" : vocab.name(t.id);
  }
  return out;
}

std::string render(std::span<const TokenId> tokens, const Vocabulary& vocab) {
  std::string out;
  for (TokenId t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += vocab.name(t);
  }
  return out;
}

std::vector<TaggedToken> flatten(const AttributedResponse& response, const Vocabulary& vocab) {
  std::vector<TaggedToken> out;
  for (const Segment& seg : response.segments) {
    for (TokenId t : seg.sentence) out.push_back(TaggedToken::plain(t));
    for (int c : seg.citations) out.push_back(TaggedToken::cite(vocab, c));
    out.push_back(TaggedToken::plain(id(Control::kPeriod)));
  }
  return out;
}

Prompt assemble_prompt(const Example& example, const Vocabulary& vocab) {
  Prompt p;
  auto push = [&](Control c) { p.tokens.push_back(TaggedToken::plain(id(c))); };
  push(Control::kBos);
  push(Control::kSystem);
  for (Control c : {Control::kYou, Control::kAre, Control::kA, Control::kHelpful,
                    Control::kAssistant}) {
    push(c);
  }
  push(Control::kEot);
  push(Control::kUser);
  push(Control::kQuestion);
  for (TokenId t : example.query) p.tokens.push_back(TaggedToken::plain(t));
  for (const Document& doc : example.documents) {
    push(Control::kDocument);
    p.citation_positions.push_back(p.tokens.size());
    p.tokens.push_back(TaggedToken::cite(vocab, doc.index));
    push(Control::kColon);
    for (TokenId t : doc.tokens) p.tokens.push_back(TaggedToken::plain(t));
  }
  push(Control::kAnswer);
  return p;
}

TrainingSequence training_sequence(const Example& example, const Vocabulary& vocab) {
  TrainingSequence seq;
  seq.tokens = assemble_prompt(example, vocab).tokens;
  seq.response_start = seq.tokens.size();
  for (const TaggedToken& t : flatten(example.gold, vocab)) seq.tokens.push_back(t);
  seq.tokens.push_back(TaggedToken::plain(id(Control::kEnd)));
  return seq;
}

namespace {

// Draws `count` distinct values from [begin, end) with a partial shuffle.
std::vector<TokenId> draw_distinct(std::mt19937_64& rng, TokenId begin, TokenId end, int count) {
  std::vector<TokenId> pool(static_cast<std::size_t>(end - begin));
  std::iota(pool.begin(), pool.end(), begin);
  for (int i = 0; i < count; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng() % (pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(count));
  return pool;
}

}  // namespace

std::vector<Example> generate_synthetic_corpus(const SynthOptions& options,
                                               const Vocabulary& vocab) {
  if (options.n_examples < 1 || options.n_docs < 1 || options.facts_per_doc < 1 ||
      options.max_answers < 1) {
    throw InvalidConfig("synthetic corpus counts must all be at least 1");
  }
  if (options.n_docs > vocab.max_citations()) {
    throw InvalidConfig("n_docs " + std::to_string(options.n_docs) + " exceeds the limit of " +
                        std::to_string(vocab.max_citations()) + " reserved citation tokens");
  }
  if (options.n_docs > vocab.query_band_size()) {
    throw VocabularyExhausted("not enough topic words for " + std::to_string(options.n_docs) +
                              " documents");
  }
  const long facts_needed = static_cast<long>(options.n_docs) * options.facts_per_doc;
  if (facts_needed > vocab.fact_band_size()) {
    throw VocabularyExhausted(std::to_string(facts_needed) + " facts requested but the fact band holds " +
                              std::to_string(vocab.fact_band_size()));
  }

  std::mt19937_64 rng(options.seed);
  std::vector<Example> corpus;
  corpus.reserve(static_cast<std::size_t>(options.n_examples));
  const int max_answers = std::min(options.n_docs, options.max_answers);
  for (int e = 0; e < options.n_examples; ++e) {
    Example ex;
    const auto topics = draw_distinct(rng, vocab.query_begin(), vocab.query_end(), options.n_docs);
    const auto facts = draw_distinct(rng, vocab.fact_begin(), vocab.fact_end(),
                                     static_cast<int>(facts_needed));
    for (int d = 0; d < options.n_docs; ++d) {
      Document doc;
      doc.index = d + 1;
      doc.tokens.push_back(topics[static_cast<std::size_t>(d)]);
      for (int f = 0; f < options.facts_per_doc; ++f) {
        doc.tokens.push_back(facts[static_cast<std::size_t>(d * options.facts_per_doc + f)]);
      }
      ex.documents.push_back(std::move(doc));
    }
    const int n_answers = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(max_answers));
    std::vector<int> order(static_cast<std::size_t>(options.n_docs));
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < n_answers; ++i) {
      const std::size_t j = static_cast<std::size_t>(i) + rng() % (order.size() - static_cast<std::size_t>(i));
      std::swap(order[static_cast<std::size_t>(i)], order[j]);
    }
    for (int i = 0; i < n_answers; ++i) {
      const Document& doc = ex.documents[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      ex.query.insert(ex.query.end(), doc.tokens.begin(), doc.tokens.end());
      ex.gold.segments.push_back(Segment{doc.tokens, {doc.index}});
    }
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

namespace {

std::vector<TokenId> parse_plain(std::string_view text, std::size_t line_no, const char* field,
                                 int n_docs, const Vocabulary& vocab) {
  std::vector<TaggedToken> tagged;
  try {
    tagged = normalize_markers(text, std::max(n_docs, 1), vocab);
  } catch (const Error& e) {
    throw ParseError(line_no, std::string(field) + ": " + e.what());
  }
  std::vector<TokenId> out;
  out.reserve(tagged.size());
  for (const TaggedToken& t : tagged) {
    if (t.is_citation()) throw ParseError(line_no, std::string(field) + " contains a citation marker");
    out.push_back(t.id);
  }
  return out;
}

}  // namespace

std::string to_json_line(const Example& example, const Vocabulary& vocab) {
  ojson j;
  j["query"] = render(std::span<const TokenId>(example.query), vocab);
  ojson docs = ojson::array();
  for (const Document& d : example.documents) {
    docs.push_back(ojson{{"index", d.index}, {"text", render(std::span<const TokenId>(d.tokens), vocab)}});
  }
  j["documents"] = std::move(docs);
  ojson gold = ojson::array();
  for (const Segment& s : example.gold.segments) {
    gold.push_back(ojson{{"sentence", render(std::span<const TokenId>(s.sentence), vocab)},
                         {"citations", s.citations}});
  }
  j["gold"] = std::move(gold);
  return j.dump();
}

Example from_json_line(std::string_view line, std::size_t line_no, const Vocabulary& vocab) {
  ojson j;
  try {
    j = ojson::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, e.what());
  }
  try {
    Example ex;
    const auto& docs = j.at("documents");
    const int n = static_cast<int>(docs.size());
    for (const auto& d : docs) {
      Document doc;
      doc.index = d.at("index").get<int>();
      doc.tokens = parse_plain(d.at("text").get<std::string>(), line_no, "document", n, vocab);
      ex.documents.push_back(std::move(doc));
    }
    ex.query = parse_plain(j.at("query").get<std::string>(), line_no, "query", n, vocab);
    for (const auto& s : j.at("gold")) {
      Segment seg;
      seg.sentence = parse_plain(s.at("sentence").get<std::string>(), line_no, "sentence", n, vocab);
      seg.citations = s.at("citations").get<std::vector<int>>();
      ex.gold.segments.push_back(std::move(seg));
    }
    validate(ex, vocab);
    return ex;
  } catch (const ParseError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, e.what());
  } catch (const Error& e) {
    throw ParseError(line_no, e.what());
  }
}

void write_jsonl(const std::filesystem::path& path, std::span<const Example> examples,
                 const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const Example& ex : examples) out << to_json_line(ex, vocab) << '\n';
  if (!out) throw Error("failed writing " + path.string());
}

std::vector<Example> read_jsonl(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(from_json_line(line, line_no, vocab));
  }
  return out;
}

}  // namespace citelm
