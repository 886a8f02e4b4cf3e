#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace citelm {

using TokenId = std::int32_t;

// Fixed control tokens at the bottom of the vocabulary.
enum class Control : TokenId {
  kPad = 0,
  kBos,
  kEnd,      // end of response
  kPeriod,   // end of sentence
  kSystem,
  kEot,
  kUser,
  kQuestion,
  kDocument,
  kColon,
  kAnswer,
  kYou,
  kAre,
  kA,
  kHelpful,
  kAssistant,
  kCount
};

constexpr TokenId id(Control c) { return static_cast<TokenId>(c); }

// Symbolic vocabulary partitioned into bands:
//
//   [0, 16)                      control tokens
//   [16, 128)                    query words ("w<k>")
//   [128, V - max_citations)     fact tokens ("f<k>")
//   [V - max_citations, V)       reserved citation tokens, rendered "[i]"
class Vocabulary {
 public:
  static constexpr TokenId kControlCount = static_cast<TokenId>(Control::kCount);
  static constexpr TokenId kQueryBegin = kControlCount;
  static constexpr TokenId kQueryEnd = 128;

  Vocabulary() = default;
  Vocabulary(int vocab_size, int max_citations);

  int size() const { return vocab_size_; }
  int max_citations() const { return max_citations_; }

  TokenId query_begin() const { return kQueryBegin; }
  TokenId query_end() const { return kQueryEnd; }
  TokenId fact_begin() const { return kQueryEnd; }
  TokenId fact_end() const { return vocab_size_ - max_citations_; }
  TokenId citation_begin() const { return fact_end(); }

  int query_band_size() const { return kQueryEnd - kQueryBegin; }
  int fact_band_size() const { return fact_end() - fact_begin(); }

  bool contains(TokenId t) const { return t >= 0 && t < vocab_size_; }
  bool is_query_word(TokenId t) const { return t >= kQueryBegin && t < kQueryEnd; }
  bool is_fact(TokenId t) const { return t >= fact_begin() && t < fact_end(); }
  bool is_citation(TokenId t) const { return t >= citation_begin() && t < vocab_size_; }

  // 1-based marker index of a citation token.
  int marker_of(TokenId t) const;
  // Reserved token for marker i (1-based).
  TokenId citation_token(int marker) const;

  std::string name(TokenId t) const;
  // Inverse of name() for non-citation tokens; throws UnknownToken.
  TokenId parse(std::string_view name) const;

 private:
  int vocab_size_ = 512;
  int max_citations_ = 8;
};

}  // namespace citelm
