#include "citelm/vocab.hpp"

#include <charconv>

#include "citelm/errors.hpp"

namespace citelm {

namespace {

constexpr std::array<std::string_view, Vocabulary::kControlCount> kControlNames = {
    "<pad>", "<bos>",     "<end>", ".",       "<system>", "<eot>", "<user>",   "Question:",
    "Document", ":",      "Answer:", "You",   "are",      "a",     "helpful",  "assistant"};

bool parse_index(std::string_view digits, int& out) {
  if (digits.empty()) return false;
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), out);
  return ec == std::errc() && ptr == digits.data() + digits.size();
}

}  // namespace

Vocabulary::Vocabulary(int vocab_size, int max_citations)
    : vocab_size_(vocab_size), max_citations_(max_citations) {
  if (max_citations < 1) throw InvalidConfig("max_citations must be at least 1");
  if (vocab_size - max_citations <= kQueryEnd) {
    throw InvalidConfig("vocab_size " + std::to_string(vocab_size) +
                        " leaves no room for fact tokens");
  }
}

int Vocabulary::marker_of(TokenId t) const {
  if (!is_citation(t)) throw UnknownMarker("token " + std::to_string(t) + " is not a citation");
  return static_cast<int>(t - citation_begin()) + 1;
}

TokenId Vocabulary::citation_token(int marker) const {
  if (marker < 1 || marker > max_citations_) {
    throw OutOfRangeMarker("marker " + std::to_string(marker) + " outside [1, " +
                           std::to_string(max_citations_) + "]");
  }
  return citation_begin() + marker - 1;
}

std::string Vocabulary::name(TokenId t) const {
  if (!contains(t)) throw UnknownToken("token id " + std::to_string(t));
  if (t < kControlCount) return std::string(kControlNames[static_cast<std::size_t>(t)]);
  if (is_query_word(t)) return "w" + std::to_string(t - kQueryBegin);
  if (is_fact(t)) return "f" + std::to_string(t - fact_begin());
  return "[" + std::to_string(marker_of(t)) + "]";
}

TokenId Vocabulary::parse(std::string_view name) const {
  for (std::size_t i = 0; i < kControlNames.size(); ++i) {
    if (kControlNames[i] == name) return static_cast<TokenId>(i);
  }
  int k = 0;
  if (name.size() > 1 && parse_index(name.substr(1), k) && k >= 0) {
    if (name[0] == 'w' && k < query_band_size()) return kQueryBegin + k;
    if (name[0] == 'f' && k < fact_band_size()) return fact_begin() + k;
  }
  throw UnknownToken("unknown token '" + std::string(name) + "'");
}

}  // namespace citelm
