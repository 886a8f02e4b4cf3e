#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "citelm/backbone.hpp"
#include "citelm/corpus.hpp"

namespace citelm {

// Decides whether documents back a sentence.
class EntailmentOracle {
 public:
  virtual ~EntailmentOracle() = default;
  // The cited documents jointly support every claim of the sentence.
  virtual bool supports(std::span<const TokenId> sentence,
                        std::span<const Document* const> documents) const = 0;
  // The document backs at least part of the sentence.
  virtual bool relevant(std::span<const TokenId> sentence, const Document& document) const = 0;
};

// Fact-token containment: supported iff the sentence's fact tokens are a
// subset of the documents' tokens; relevant iff they intersect.
class ContainmentOracle final : public EntailmentOracle {
 public:
  explicit ContainmentOracle(Vocabulary vocab) : vocab_(vocab) {}
  bool supports(std::span<const TokenId> sentence,
                std::span<const Document* const> documents) const override;
  bool relevant(std::span<const TokenId> sentence, const Document& document) const override;

 private:
  Vocabulary vocab_;
};

// Verdicts supplied from outside (e.g. an NLI model run offline). Keys are
// the rendered sentence and the rendered documents; unknown pairs are
// unsupported. JSON form: [{"sentence": s, "documents": [d...], "supports":
// b, "relevant": b}, ...], where "relevant" entries list a single document.
class JudgmentTableOracle final : public EntailmentOracle {
 public:
  JudgmentTableOracle(Vocabulary vocab, const nlohmann::json& table);
  bool supports(std::span<const TokenId> sentence,
                std::span<const Document* const> documents) const override;
  bool relevant(std::span<const TokenId> sentence, const Document& document) const override;

 private:
  std::string key(std::span<const TokenId> sentence, std::span<const Document* const> documents) const;

  Vocabulary vocab_;
  std::map<std::string, bool> supports_;
  std::map<std::string, bool> relevant_;
};

// Fractions in [0, 1].
double citation_recall(const AttributedResponse& response, std::span<const Document> documents,
                       const EntailmentOracle& oracle);
double citation_precision(const AttributedResponse& response, std::span<const Document> documents,
                          const EntailmentOracle& oracle);
double correctness(const AttributedResponse& response, const AttributedResponse& gold,
                   const Vocabulary& vocab);

// Harmonic mean; 0 when both are 0. Works on any common scale.
double f1(double precision, double recall);
double mean(std::span<const double> values);
// (updated - baseline) / baseline, as a percentage.
double improvement(double updated, double baseline);
double round1(double v);

struct ExampleMetrics {
  double citation_precision = 0.0;
  double citation_recall = 0.0;
  double citation_f1 = 0.0;
  double correctness = 0.0;
  std::size_t n_sentences = 0;
  std::size_t n_citations = 0;
};

struct MetricsReport {
  std::vector<ExampleMetrics> per_example;
  ExampleMetrics aggregate;  // means of P, R, correctness; F1 of the mean P and R

  nlohmann::ordered_json to_json() const;  // percentages, one decimal
};

ExampleMetrics score_example(const AttributedResponse& response, const Example& example,
                             const EntailmentOracle& oracle, const Vocabulary& vocab);
MetricsReport score(std::span<const AttributedResponse> responses, std::span<const Example> examples,
                    const EntailmentOracle& oracle, const Vocabulary& vocab);

// Writes the head-averaged last-layer attention restricted to positions
// [begin, end) as CSV (row = attending, column = attended), plus
// `<path>.index.csv` mapping grid positions to tokens and roles.
void export_heatmap(const ForwardTrace<double>& trace, std::size_t begin, std::size_t end,
                    std::span<const TaggedToken> tokens, const Vocabulary& vocab,
                    const std::filesystem::path& path);

}  // namespace citelm
