#include <doctest.h>

#include <algorithm>
#include <random>

#include "citelm/fusion.hpp"
#include "support.hpp"

using namespace citelm;

namespace {

ModelState<double> tiny_state() {
  BackboneConfig c = testing::small_config();
  c.hidden_size = 2;
  c.n_heads = 1;
  c.n_layers = 0;
  return ModelState<double>::initialize(c);
}

}  // namespace

TEST_CASE("contextual_embed is the mean of the token rows") {
  auto s = tiny_state();
  s.token_embedding.row(200) << 1.0, 3.0;
  s.token_embedding.row(201) << 3.0, 5.0;
  const Document d{1, {200, 201}};
  const RowVector<double> c = contextual_embed(s, d);
  CHECK(c(0) == 2.0);
  CHECK(c(1) == 4.0);

  const Document single{1, {201}};
  CHECK(contextual_embed(s, single) == s.token_embedding.row(201));
  CHECK_THROWS_AS(contextual_embed(s, Document{3, {}}), EmptyDocument);
}

TEST_CASE("contextual_embed ignores token order") {
  const auto s = ModelState<double>::initialize(testing::small_config(1));
  std::mt19937_64 rng(5);
  Document d{1, {130, 17, 250, 131, 40, 300}};
  const RowVector<double> ref = contextual_embed(s, d);
  for (int i = 0; i < 20; ++i) {
    std::shuffle(d.tokens.begin(), d.tokens.end(), rng);
    CHECK(contextual_embed(s, d).isApprox(ref, 1e-14));
  }
}

TEST_CASE("build_citation_set rows match each document") {
  auto s = ModelState<double>::initialize(testing::small_config(2));
  const std::vector<Document> one{{1, {140, 141, 20}}};
  const auto set1 = build_citation_set(s, std::span<const Document>(one));
  CHECK(set1.size() == 1);
  CHECK(set1.rows.row(0) == contextual_embed(s, one[0]));
  CHECK(set1.token_counts() == std::vector<std::size_t>{3});

  const std::vector<Document> twins{{1, {150, 151}}, {2, {150, 151}}};
  const auto set2 = build_citation_set(s, std::span<const Document>(twins));
  CHECK(set2.rows.row(0) == set2.rows.row(1));

  // A table update is visible on the next build.
  s.token_embedding.row(151).array() += 0.6;
  const auto rebuilt = build_citation_set(s, std::span<const Document>(twins));
  RowVector<double> expected = 0.5 * (s.token_embedding.row(150) + s.token_embedding.row(151));
  CHECK(rebuilt.rows.row(0).isApprox(expected, 1e-14));
  CHECK((rebuilt.rows.row(0) - set2.rows.row(0)).isApprox(RowVector<double>::Constant(16, 0.3), 1e-12));
}

TEST_CASE("plain_citation_set uses the reserved token rows") {
  const auto s = ModelState<double>::initialize(testing::small_config(3));
  const Vocabulary v = s.config.vocabulary();
  const auto set = plain_citation_set(s, 3);
  CHECK_FALSE(set.contextual);
  for (int i = 0; i < 3; ++i) CHECK(set.rows.row(i) == s.token_embedding.row(v.citation_token(i + 1)));
}

TEST_CASE("splice is embed on default-only streams") {
  const auto s = ModelState<double>::initialize(testing::small_config(4));
  const std::vector<TokenId> ids{1, 20, 140, 3, 2};
  std::vector<TaggedToken> tagged;
  for (TokenId t : ids) tagged.push_back(TaggedToken::plain(t));
  const std::vector<Document> docs{{1, {140}}};
  const auto set = build_citation_set(s, std::span<const Document>(docs));
  CHECK(splice(s, std::span<const TaggedToken>(tagged), set) == embed(s, std::span<const TokenId>(ids)));
}

TEST_CASE("splice substitutes the citation row and stays local") {
  const auto s = ModelState<double>::initialize(testing::small_config(5));
  const Vocabulary v = s.config.vocabulary();
  std::vector<Document> docs{{1, {140, 141}}, {2, {142, 143}}, {3, {144}}};
  const std::vector<TaggedToken> stream{TaggedToken::plain(20), TaggedToken::plain(140),
                                        TaggedToken::cite(v, 2), TaggedToken::plain(3),
                                        TaggedToken::cite(v, 3)};
  const auto set = build_citation_set(s, std::span<const Document>(docs));
  const auto out = splice(s, std::span<const TaggedToken>(stream), set);
  CHECK(out.rows() == 5);
  CHECK(out.row(2) == set.rows.row(1));

  std::swap(docs[0].tokens, docs[1].tokens);
  const auto swapped = splice(s, std::span<const TaggedToken>(stream),
                              build_citation_set(s, std::span<const Document>(docs)));
  for (Eigen::Index r = 0; r < 5; ++r) {
    if (r == 2) {
      CHECK(swapped.row(r) != out.row(r));
    } else {
      CHECK(swapped.row(r) == out.row(r));
    }
  }

  const std::vector<TaggedToken> bad{TaggedToken::cite(v, 4)};
  CHECK_THROWS_AS(splice(s, std::span<const TaggedToken>(bad), set), UnknownMarker);
}

TEST_CASE("citation rows pass 1/|doc| of their gradient to each source token") {
  const auto s = ModelState<double>::initialize(testing::small_config(6));
  const std::vector<Document> docs{{1, {140, 141, 142, 143}}, {2, {150}}};
  const auto set = build_citation_set(s, std::span<const Document>(docs));
  auto g = ModelState<double>::zeros(s.config);
  const Matrix<double> d_rows = Matrix<double>::Ones(2, 16);
  citation_set_backward(set, d_rows, g);
  CHECK(g.token_embedding.row(141).isApprox(RowVector<double>::Constant(16, 0.25)));
  CHECK(g.token_embedding.row(150).isApprox(RowVector<double>::Constant(16, 1.0)));
}
