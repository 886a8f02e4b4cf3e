#pragma once

#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "citelm/backbone.hpp"
#include "citelm/corpus.hpp"

namespace citelm {

inline constexpr double kAttentionBudget = 0.3;

struct AttentionTarget {
  std::size_t citation_pos = 0;
  double score = 0.0;
};

struct PlanEntry {
  std::size_t query_pos = 0;               // absolute position of a default token
  std::vector<AttentionTarget> targets;    // preceding citations, nearest last
};

// Target query-key scores for every default token of a response: the budget
// split across its preceding citations in proportion to 1 / distance.
struct AttentionTargetPlan {
  double budget = kAttentionBudget;
  std::vector<PlanEntry> entries;
  std::size_t n_default = 0;
  std::size_t n_citation = 0;

  std::size_t n_pairs() const {
    std::size_t n = 0;
    for (const PlanEntry& e : entries) n += e.targets.size();
    return n;
  }
};

// `response` is the response region of a sequence that starts at absolute
// position `offset`.
inline AttentionTargetPlan target_plan(std::span<const TaggedToken> response, std::size_t offset = 0,
                                       double budget = kAttentionBudget) {
  AttentionTargetPlan plan;
  plan.budget = budget;
  std::vector<std::size_t> citations;
  for (std::size_t i = 0; i < response.size(); ++i) {
    const std::size_t pos = offset + i;
    if (response[i].is_citation()) {
      ++plan.n_citation;
      citations.push_back(pos);
      continue;
    }
    ++plan.n_default;
    PlanEntry entry;
    entry.query_pos = pos;
    double total = 0.0;
    for (std::size_t c : citations) total += 1.0 / static_cast<double>(pos - c);
    for (std::size_t c : citations) {
      entry.targets.push_back({c, budget * (1.0 / static_cast<double>(pos - c)) / total});
    }
    plan.entries.push_back(std::move(entry));
  }
  return plan;
}

// Cosine of two vectors; throws ZeroNorm on a zero vector.
template <typename Scalar, typename A, typename B>
Scalar cosine(const Eigen::MatrixBase<A>& q, const Eigen::MatrixBase<B>& k) {
  const Scalar nq = q.norm(), nk = k.norm();
  if (nq == Scalar(0) || nk == Scalar(0)) throw ZeroNorm("cosine of a zero vector");
  return q.dot(k) / (nq * nk);
}

// Head-averaged cosine between position j's query and position c's key.
template <typename Scalar>
Scalar observed_score(const ForwardTrace<Scalar>& trace, std::size_t j, std::size_t c) {
  const int nh = trace.n_heads;
  const Eigen::Index d = trace.queries.cols() / nh;
  Scalar s = 0;
  for (int h = 0; h < nh; ++h) {
    s += cosine<Scalar>(trace.queries.row(static_cast<Eigen::Index>(j)).segment(h * d, d),
                        trace.keys.row(static_cast<Eigen::Index>(c)).segment(h * d, d));
  }
  return s / Scalar(nh);
}

template <typename Scalar>
Scalar attn_loss(const ForwardTrace<Scalar>& trace, const AttentionTargetPlan& plan) {
  if (plan.n_default == 0 || plan.n_citation == 0) return Scalar(0);
  Scalar sum = 0;
  for (const PlanEntry& e : plan.entries) {
    for (const AttentionTarget& t : e.targets) {
      sum += std::abs(Scalar(t.score) - observed_score(trace, e.query_pos, t.citation_pos));
    }
  }
  return sum / Scalar(plan.n_default * plan.n_citation);
}

// Gradient of attn_loss with respect to the last-layer queries and keys.
template <typename Scalar>
std::pair<Matrix<Scalar>, Matrix<Scalar>> attn_loss_grad(const ForwardTrace<Scalar>& trace,
                                                         const AttentionTargetPlan& plan) {
  Matrix<Scalar> dq = Matrix<Scalar>::Zero(trace.queries.rows(), trace.queries.cols());
  Matrix<Scalar> dk = Matrix<Scalar>::Zero(trace.keys.rows(), trace.keys.cols());
  if (plan.n_default == 0 || plan.n_citation == 0) return {dq, dk};
  const int nh = trace.n_heads;
  const Eigen::Index d = trace.queries.cols() / nh;
  const Scalar norm = Scalar(1) / Scalar(plan.n_default * plan.n_citation);
  for (const PlanEntry& e : plan.entries) {
    const auto j = static_cast<Eigen::Index>(e.query_pos);
    for (const AttentionTarget& t : e.targets) {
      const auto c = static_cast<Eigen::Index>(t.citation_pos);
      const Scalar diff = Scalar(t.score) - observed_score(trace, e.query_pos, t.citation_pos);
      // d|target - S| / dS
      const Scalar sign = diff > Scalar(0) ? Scalar(-1) : (diff < Scalar(0) ? Scalar(1) : Scalar(0));
      const Scalar g = sign * norm / Scalar(nh);
      for (int h = 0; h < nh; ++h) {
        const auto q = trace.queries.row(j).segment(h * d, d);
        const auto k = trace.keys.row(c).segment(h * d, d);
        const Scalar nq = q.norm(), nk = k.norm();
        const Scalar cs = q.dot(k) / (nq * nk);
        dq.row(j).segment(h * d, d) += g * (k / (nq * nk) - cs * q / (nq * nq));
        dk.row(c).segment(h * d, d) += g * (q / (nq * nk) - cs * k / (nk * nk));
      }
    }
  }
  return {dq, dk};
}

}  // namespace citelm
