#include <doctest.h>

#include <cmath>
#include <random>

#include "citelm/attn_shaping.hpp"
#include "support.hpp"

using namespace citelm;

namespace {

const Vocabulary kVocab(512, 8);

std::vector<TaggedToken> parse(std::string_view text) { return normalize_markers(text, 8, kVocab); }

// One head of width 2 with hand-set queries and keys.
ForwardTrace<double> two_d_trace(std::size_t L) {
  ForwardTrace<double> tr;
  tr.n_heads = 1;
  tr.queries = Matrix<double>::Zero(static_cast<Eigen::Index>(L), 2);
  tr.keys = Matrix<double>::Zero(static_cast<Eigen::Index>(L), 2);
  return tr;
}

}  // namespace

TEST_CASE("cosine closed forms") {
  RowVector<double> q(2), k(2);
  q << 1.0, 0.0;
  k << 1.0, 1.0;
  CHECK(cosine<double>(q, k) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(cosine<double>(q, k) == doctest::Approx(0.7071).epsilon(1e-4));
  CHECK(cosine<double>(q, RowVector<double>(3.0 * q)) == doctest::Approx(1.0));
  k << 0.0, 2.0;
  CHECK(cosine<double>(q, k) == doctest::Approx(0.0));
  CHECK_THROWS_AS(cosine<double>(q, RowVector<double>::Zero(2)), ZeroNorm);
}

TEST_CASE("observed_score averages heads") {
  ForwardTrace<double> tr;
  tr.n_heads = 2;
  tr.queries = Matrix<double>(2, 4);
  tr.keys = Matrix<double>(2, 4);
  tr.queries.row(1) << 1, 0, 1, 0;
  tr.keys.row(0) << 1, 0, 0, 1;
  CHECK(observed_score(tr, 1, 0) == doctest::Approx(0.5));
}

TEST_CASE("target_plan examples") {
  const auto one = target_plan(parse("f1 [1] f2"));
  REQUIRE(one.entries.size() == 2);
  CHECK(one.entries[0].targets.empty());
  REQUIRE(one.entries[1].targets.size() == 1);
  CHECK(one.entries[1].targets[0].score == 0.3);

  // Citations at distances 2 and 1 from the last token.
  const auto two = target_plan(parse("f1 [1] [2] f2"));
  const auto& last = two.entries.back();
  REQUIRE(last.targets.size() == 2);
  CHECK(last.targets[0].citation_pos == 1);
  CHECK(last.targets[0].score == doctest::Approx(0.1));
  CHECK(last.targets[1].score == doctest::Approx(0.2));
  CHECK(two.n_default == 2);
  CHECK(two.n_citation == 2);

  const auto shifted = target_plan(parse("f1 [1] f2"), 40);
  CHECK(shifted.entries[1].query_pos == 42);
  CHECK(shifted.entries[1].targets[0].citation_pos == 41);

  const auto none = target_plan(parse("f1 f2 ."));
  CHECK(none.n_pairs() == 0);
}

TEST_CASE("target_plan conserves the budget and decays with distance") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TaggedToken> resp;
    const int L = 2 + static_cast<int>(rng() % 40);
    for (int i = 0; i < L; ++i) {
      resp.push_back(rng() % 4 == 0 ? TaggedToken::cite(kVocab, 1 + static_cast<int>(rng() % 8))
                                    : TaggedToken::plain(130 + static_cast<TokenId>(rng() % 50)));
    }
    const auto plan = target_plan(resp);
    for (const PlanEntry& e : plan.entries) {
      if (e.targets.empty()) continue;
      double sum = 0.0;
      for (const auto& t : e.targets) {
        CHECK(t.score > 0.0);
        sum += t.score;
      }
      CHECK(std::abs(sum - 0.3) <= 1e-12);
      for (std::size_t i = 1; i < e.targets.size(); ++i) {
        CHECK(e.targets[i].citation_pos > e.targets[i - 1].citation_pos);
        CHECK(e.targets[i].score > e.targets[i - 1].score);
      }
    }
  }
}

TEST_CASE("attn_loss examples") {
  auto tr = two_d_trace(2);
  tr.keys.row(0) << 1.0, 0.0;
  // cos = 0.1 between query 1 and key 0.
  tr.queries.row(1) << 0.1, std::sqrt(1.0 - 0.01);
  AttentionTargetPlan plan;
  plan.entries.push_back({1, {{0, 0.3}}});
  plan.n_default = 2;
  plan.n_citation = 1;
  CHECK(attn_loss(tr, plan) == doctest::Approx(0.1));

  plan.entries[0].targets[0].score = 0.1;
  CHECK(attn_loss(tr, plan) == doctest::Approx(0.0));

  plan.n_citation = 0;
  CHECK(attn_loss(tr, plan) == 0.0);
}

TEST_CASE("attn_loss_grad matches finite differences on queries and keys") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  const auto resp = parse("f1 f2 [1] f3 f4 [2] [3] f5 f6 .");
  const auto plan = target_plan(resp);
  ForwardTrace<double> tr;
  tr.n_heads = 2;
  tr.queries = Matrix<double>(static_cast<Eigen::Index>(resp.size()), 6);
  tr.keys = tr.queries;
  for (Eigen::Index i = 0; i < tr.queries.size(); ++i) {
    tr.queries.data()[i] = n(rng);
    tr.keys.data()[i] = n(rng);
  }
  const auto [dq, dk] = attn_loss_grad(tr, plan);
  const double eps = 1e-6;
  for (Matrix<double>* m : {&tr.queries, &tr.keys}) {
    const Matrix<double>& g = m == &tr.queries ? dq : dk;
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      const double saved = m->data()[i];
      m->data()[i] = saved + eps;
      const double plus = attn_loss(tr, plan);
      m->data()[i] = saved - eps;
      const double minus = attn_loss(tr, plan);
      m->data()[i] = saved;
      CHECK(g.data()[i] == doctest::Approx((plus - minus) / (2 * eps)).epsilon(1e-5).scale(1e-3));
    }
  }
}
