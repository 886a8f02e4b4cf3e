#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "citelm/vocab.hpp"

namespace citelm {

enum class Role : std::uint8_t { kDefault = 0, kCitation = 1 };

struct TaggedToken {
  TokenId id = 0;
  Role role = Role::kDefault;
  int marker = 0;  // 1-based document index for citation tokens, 0 otherwise

  static TaggedToken plain(TokenId t) { return {t, Role::kDefault, 0}; }
  static TaggedToken cite(const Vocabulary& vocab, int marker) {
    return {vocab.citation_token(marker), Role::kCitation, marker};
  }
  bool is_citation() const { return role == Role::kCitation; }

  friend bool operator==(const TaggedToken&, const TaggedToken&) = default;
};

struct Document {
  int index = 1;
  std::vector<TokenId> tokens;

  friend bool operator==(const Document&, const Document&) = default;
};

struct Segment {
  std::vector<TokenId> sentence;
  std::vector<int> citations;

  friend bool operator==(const Segment&, const Segment&) = default;
};

// Alternating sentences and the citation sets attached to them.
struct AttributedResponse {
  std::vector<Segment> segments;

  friend bool operator==(const AttributedResponse&, const AttributedResponse&) = default;
};

struct Example {
  std::vector<TokenId> query;
  std::vector<Document> documents;
  AttributedResponse gold;

  int n_docs() const { return static_cast<int>(documents.size()); }

  friend bool operator==(const Example&, const Example&) = default;
};

// Throws InvalidExample when an Example breaks its invariants.
void validate(const Example& example, const Vocabulary& vocab);

// Turns "w3 f9 [2] ." style text into tagged tokens, replacing each "[i]"
// with the reserved citation token for document i.
std::vector<TaggedToken> normalize_markers(std::string_view text, int n_docs,
                                           const Vocabulary& vocab);

std::string render(std::span<const TaggedToken> tokens, const Vocabulary& vocab);
std::string render(std::span<const TokenId> tokens, const Vocabulary& vocab);

// Token stream of a response: each sentence, its citations, then a period.
std::vector<TaggedToken> flatten(const AttributedResponse& response, const Vocabulary& vocab);

struct Prompt {
  std::vector<TaggedToken> tokens;
  // Positions of the in-prompt citation tokens labelling each document, in
  // ascending document order.
  std::vector<std::size_t> citation_positions;
};

// System preamble, "Question: {query}", one "Document <c_i> : {doc}" block
// per document, then the answer cue.
Prompt assemble_prompt(const Example& example, const Vocabulary& vocab);

// Prompt followed by the flattened gold response and the end token.
struct TrainingSequence {
  std::vector<TaggedToken> tokens;
  std::size_t response_start = 0;
};
TrainingSequence training_sequence(const Example& example, const Vocabulary& vocab);

struct SynthOptions {
  std::uint64_t seed = 0;
  int n_examples = 1;
  int n_docs = 4;
  int facts_per_doc = 2;
  int max_answers = 2;  // documents each query asks about
};

// Each document is a topic word followed by facts it alone owns. The query
// states the claims to attribute (the chosen documents' contents, in answer
// order) and the gold response has one sentence per claim, cited to the
// document that owns it.
std::vector<Example> generate_synthetic_corpus(const SynthOptions& options,
                                               const Vocabulary& vocab);

std::string to_json_line(const Example& example, const Vocabulary& vocab);
// `line_no` is only used for error messages.
Example from_json_line(std::string_view line, std::size_t line_no, const Vocabulary& vocab);

void write_jsonl(const std::filesystem::path& path, std::span<const Example> examples,
                 const Vocabulary& vocab);
std::vector<Example> read_jsonl(const std::filesystem::path& path, const Vocabulary& vocab);

}  // namespace citelm
