#pragma once

#include <span>
#include <vector>

#include "citelm/backbone.hpp"
#include "citelm/corpus.hpp"

namespace citelm {

// Row i (0-based) is the embedding carried by citation marker i+1: the mean
// of the table rows listed in sources[i]. For contextual sets the sources
// are the document's tokens; for the plain-token ablation each source is the
// citation token itself.
template <typename Scalar>
struct CitationEmbeddingSet {
  Matrix<Scalar> rows;
  std::vector<std::vector<TokenId>> sources;
  bool contextual = true;

  int size() const { return static_cast<int>(rows.rows()); }
  std::vector<std::size_t> token_counts() const {
    std::vector<std::size_t> n;
    for (const auto& s : sources) n.push_back(s.size());
    return n;
  }
};

template <typename Scalar>
RowVector<Scalar> contextual_embed(const ModelState<Scalar>& state, const Document& document) {
  if (document.tokens.empty()) {
    throw EmptyDocument("document " + std::to_string(document.index) + " has no tokens");
  }
  return embed(state, std::span<const TokenId>(document.tokens)).colwise().mean();
}

template <typename Scalar>
CitationEmbeddingSet<Scalar> build_citation_set(const ModelState<Scalar>& state,
                                                std::span<const Document> documents) {
  CitationEmbeddingSet<Scalar> set;
  set.rows.resize(static_cast<Eigen::Index>(documents.size()), state.config.hidden_size);
  for (std::size_t i = 0; i < documents.size(); ++i) {
    set.rows.row(static_cast<Eigen::Index>(i)) = contextual_embed(state, documents[i]);
    set.sources.push_back(documents[i].tokens);
  }
  return set;
}

// Citation markers represented by their own table rows (no document context).
template <typename Scalar>
CitationEmbeddingSet<Scalar> plain_citation_set(const ModelState<Scalar>& state, int n_docs) {
  const Vocabulary vocab = state.config.vocabulary();
  CitationEmbeddingSet<Scalar> set;
  set.contextual = false;
  set.rows.resize(n_docs, state.config.hidden_size);
  for (int i = 0; i < n_docs; ++i) {
    const TokenId t = vocab.citation_token(i + 1);
    set.rows.row(i) = state.token_embedding.row(t);
    set.sources.push_back({t});
  }
  return set;
}

// Default tokens take their table row, citation tokens their set row.
template <typename Scalar>
Matrix<Scalar> splice(const ModelState<Scalar>& state, std::span<const TaggedToken> tokens,
                      const CitationEmbeddingSet<Scalar>& set) {
  Matrix<Scalar> out(static_cast<Eigen::Index>(tokens.size()), state.config.hidden_size);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const TaggedToken& tok = tokens[t];
    const auto r = static_cast<Eigen::Index>(t);
    if (tok.is_citation()) {
      if (tok.marker < 1 || tok.marker > set.size()) {
        throw UnknownMarker("marker [" + std::to_string(tok.marker) + "] has no citation embedding (" +
                            std::to_string(set.size()) + " available)");
      }
      out.row(r) = set.rows.row(tok.marker - 1);
    } else {
      if (tok.id < 0 || tok.id >= state.config.vocab_size) {
        throw UnknownToken("token id " + std::to_string(tok.id));
      }
      out.row(r) = state.token_embedding.row(tok.id);
    }
  }
  return out;
}

// Routes dL/d(spliced embeddings) to the table (default tokens) and to the
// citation rows (citation tokens).
template <typename Scalar>
void splice_backward(std::span<const TaggedToken> tokens, const Matrix<Scalar>& d_embeddings,
                     Matrix<Scalar>& d_rows, ModelState<Scalar>& grad) {
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto r = static_cast<Eigen::Index>(t);
    if (tokens[t].is_citation()) {
      d_rows.row(tokens[t].marker - 1) += d_embeddings.row(r);
    } else {
      grad.token_embedding.row(tokens[t].id) += d_embeddings.row(r);
    }
  }
}

// Each source token of row i receives d_rows(i) / |sources[i]|.
template <typename Scalar>
void citation_set_backward(const CitationEmbeddingSet<Scalar>& set, const Matrix<Scalar>& d_rows,
                           ModelState<Scalar>& grad) {
  for (std::size_t i = 0; i < set.sources.size(); ++i) {
    const Scalar share = Scalar(1) / Scalar(set.sources[i].size());
    for (TokenId t : set.sources[i]) {
      grad.token_embedding.row(t) += share * d_rows.row(static_cast<Eigen::Index>(i));
    }
  }
}

}  // namespace citelm
