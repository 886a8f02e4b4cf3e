#include "citelm/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace citelm {

void DecodeConfig::validate() const {
  if (max_new_tokens < 1) throw InvalidConfig("max_new_tokens must be at least 1");
  if (mode == Mode::kSampled && !(temperature > 0.0)) {
    throw InvalidConfig("sampling temperature must be positive");
  }
  if (!(router_threshold >= 0.0 && router_threshold < 1.0)) {
    throw InvalidConfig("router_threshold must lie in [0, 1)");
  }
}

AttributedResponse segment(std::span<const TaggedToken> tokens, int* leading_citations) {
  AttributedResponse out;
  int leading = 0;
  bool open = false;  // current sentence still accepting content
  for (const TaggedToken& t : tokens) {
    if (t.is_citation()) {
      if (out.segments.empty()) {
        ++leading;
        out.segments.push_back({});
      }
      out.segments.back().citations.push_back(t.marker);
      open = false;
    } else if (t.id == id(Control::kPeriod)) {
      open = false;
    } else if (t.id == id(Control::kEnd)) {
      break;
    } else {
      if (!open) {
        out.segments.push_back({});
        open = true;
      }
      out.segments.back().sentence.push_back(t.id);
    }
  }
  if (leading_citations) *leading_citations = leading;
  return out;
}

namespace {

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

GenerationRecord generate(const StepModel& model, std::span<const TaggedToken> prompt,
                          const Vocabulary& vocab, const DecodeConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::vector<TaggedToken> sequence(prompt.begin(), prompt.end());
  GenerationRecord rec;
  for (int step = 0; step < config.max_new_tokens; ++step) {
    const StepScores s = model.score(sequence);
    rec.router.push_back(s.router);
    TaggedToken next;
    if (s.router[1] > config.router_threshold) {
      rec.alignment.push_back(s.alignment);
      next = TaggedToken::cite(vocab, static_cast<int>(argmax(s.alignment)) + 1);
    } else {
      // Citation ids never leave the vocabulary head.
      std::vector<double> logits = s.logits;
      for (TokenId t = vocab.citation_begin(); t < vocab.size(); ++t) {
        logits[static_cast<std::size_t>(t)] = -std::numeric_limits<double>::infinity();
      }
      TokenId chosen = 0;
      if (config.mode == DecodeConfig::Mode::kGreedy) {
        chosen = static_cast<TokenId>(argmax(logits));
      } else {
        const double m = *std::max_element(logits.begin(), logits.end());
        std::vector<double> w(logits.size());
        for (std::size_t i = 0; i < logits.size(); ++i) w[i] = std::exp((logits[i] - m) / config.temperature);
        std::discrete_distribution<int> dist(w.begin(), w.end());
        chosen = static_cast<TokenId>(dist(rng));
      }
      next = TaggedToken::plain(chosen);
    }
    if (!next.is_citation() && next.id == id(Control::kEnd)) {
      rec.reached_end = true;
      break;
    }
    rec.emitted.push_back(next);
    sequence.push_back(next);
  }
  rec.response = segment(rec.emitted, &rec.leading_citations);
  return rec;
}

nlohmann::ordered_json to_json(const GenerationRecord& record, const Vocabulary& vocab) {
  using ojson = nlohmann::ordered_json;
  ojson tokens = ojson::array();
  for (const TaggedToken& t : record.emitted) {
    tokens.push_back(ojson{{"id", t.id},
                           {"role", t.is_citation() ? "citation" : "default"},
                           {"marker", t.marker}});
  }
  ojson response = ojson::array();
  for (const Segment& s : record.response.segments) {
    response.push_back(ojson{{"sentence", render(std::span<const TokenId>(s.sentence), vocab)},
                             {"citations", s.citations}});
  }
  ojson j;
  j["text"] = render(std::span<const TaggedToken>(record.emitted), vocab);
  j["tokens"] = std::move(tokens);
  j["router"] = record.router;
  j["alignment"] = record.alignment;
  j["response"] = std::move(response);
  j["reached_end"] = record.reached_end;
  j["leading_citations"] = record.leading_citations;
  return j;
}

GenerationRecord generation_from_json(const nlohmann::ordered_json& j, int n_docs,
                                      const Vocabulary& vocab) {
  GenerationRecord rec;
  rec.emitted = normalize_markers(j.at("text").get<std::string>(), n_docs, vocab);
  rec.router = j.at("router").get<std::vector<std::array<double, 2>>>();
  rec.alignment = j.at("alignment").get<std::vector<std::vector<double>>>();
  rec.reached_end = j.at("reached_end").get<bool>();
  rec.response = segment(rec.emitted, &rec.leading_citations);
  return rec;
}

}  // namespace citelm
