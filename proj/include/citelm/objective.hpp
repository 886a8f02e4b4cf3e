#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "citelm/attn_shaping.hpp"
#include "citelm/backbone.hpp"
#include "citelm/corpus.hpp"
#include "citelm/fusion.hpp"
#include "citelm/heads.hpp"

namespace citelm {

struct LossWeights {
  double alpha = 0.2;  // citation alignment
  double beta = 0.1;   // router
  double gamma = 0.1;  // attention shaping
  // Weight on the vocabulary loss. Always 1 in the training objective; the
  // gradient checker zeroes it to isolate the auxiliary terms.
  double default_weight = 1.0;
};

struct LossBreakdown {
  double l_default = 0.0;
  double l_citation = 0.0;
  double l_router = 0.0;
  double l_attn = 0.0;
  double total = 0.0;
};

inline LossBreakdown combined_loss(double l_default, double l_citation, double l_router,
                                   double l_attn, const LossWeights& w) {
  for (double v : {l_default, l_citation, l_router, l_attn}) {
    if (!std::isfinite(v)) throw NonFiniteLoss("non-finite loss component");
  }
  LossBreakdown b{l_default, l_citation, l_router, l_attn, 0.0};
  b.total = w.default_weight * l_default + w.alpha * l_citation + w.beta * l_router + w.gamma * l_attn;
  return b;
}

struct ObjectiveOptions {
  LossWeights weights;
  bool contextual_citations = true;  // false: "w/o CAE" ablation
  double attn_budget = kAttentionBudget;
};

// Teacher-forced head accuracy over the response region.
struct HeadStats {
  std::size_t router_correct = 0, router_total = 0;
  std::size_t marker_correct = 0, marker_total = 0;

  HeadStats& operator+=(const HeadStats& o) {
    router_correct += o.router_correct;
    router_total += o.router_total;
    marker_correct += o.marker_correct;
    marker_total += o.marker_total;
    return *this;
  }
  double router_accuracy() const {
    return router_total ? static_cast<double>(router_correct) / static_cast<double>(router_total) : 1.0;
  }
  double marker_accuracy() const {
    return marker_total ? static_cast<double>(marker_correct) / static_cast<double>(marker_total) : 1.0;
  }
};

template <typename Scalar>
CitationEmbeddingSet<Scalar> citation_set_for(const ModelState<Scalar>& state, const Example& example,
                                              bool contextual) {
  return contextual ? build_citation_set(state, std::span<const Document>(example.documents))
                    : plain_citation_set(state, example.n_docs());
}

// Loss of one example under teacher forcing. When `grad` is given, adds
// `grad_scale` * d(total)/d(params) into it.
//
// Positions t in [prompt_len - 1, L - 2] predict token t+1 of the response.
// Default targets feed the vocabulary loss, citation targets the alignment
// loss, and every target position the router loss. The attention plan spans
// the response tokens as inputs.
template <typename Scalar>
LossBreakdown example_objective(const ModelState<Scalar>& state, const Example& example,
                                const ObjectiveOptions& options, ModelState<Scalar>* grad = nullptr,
                                Scalar grad_scale = Scalar(1), HeadStats* stats = nullptr) {
  const Vocabulary vocab = state.config.vocabulary();
  const TrainingSequence seq = training_sequence(example, vocab);
  const std::span<const TaggedToken> tokens(seq.tokens);
  const CitationEmbeddingSet<Scalar> set = citation_set_for(state, example, options.contextual_citations);
  const ForwardTrace<Scalar> tr = forward(state, splice(state, tokens, set));

  const std::size_t L = tokens.size();
  const std::size_t first = seq.response_start - 1;
  std::vector<Eigen::Index> all_rows, default_rows, citation_rows;
  std::vector<Role> labels;
  std::vector<int> default_targets, markers;
  for (std::size_t t = first; t + 1 < L; ++t) {
    const TaggedToken& target = tokens[t + 1];
    all_rows.push_back(static_cast<Eigen::Index>(t));
    labels.push_back(target.role);
    if (target.is_citation()) {
      citation_rows.push_back(static_cast<Eigen::Index>(t));
      markers.push_back(target.marker);
    } else {
      default_rows.push_back(static_cast<Eigen::Index>(t));
      default_targets.push_back(target.id);
    }
  }
  auto gather = [](const Matrix<Scalar>& m, const std::vector<Eigen::Index>& rows) {
    Matrix<Scalar> out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(rows[r]);
    return out;
  };

  const Matrix<Scalar> lm_probs = softmax_rows(gather(tr.logits, default_rows));
  const Scalar l_default = cross_entropy(lm_probs, std::span<const int>(default_targets));

  const Matrix<Scalar> h_all = gather(tr.hidden, all_rows);
  const Matrix<Scalar> router_probs = route(state, h_all);
  const Scalar l_router = router_loss(router_probs, std::span<const Role>(labels));

  const Matrix<Scalar> h_cite = gather(tr.hidden, citation_rows);
  const AlignmentOutput<Scalar> al = align(state, h_cite, set);
  const Scalar l_citation = alignment_loss(al.probs, std::span<const int>(markers));

  AttentionTargetPlan plan;
  Scalar l_attn = 0;
  if (!state.layers.empty()) {
    plan = target_plan(tokens.subspan(seq.response_start), seq.response_start, options.attn_budget);
    l_attn = attn_loss(tr, plan);
  }

  const LossWeights& w = options.weights;
  const LossBreakdown out = combined_loss(static_cast<double>(l_default), static_cast<double>(l_citation),
                                          static_cast<double>(l_router), static_cast<double>(l_attn), w);

  if (stats) {
    for (Eigen::Index r = 0; r < router_probs.rows(); ++r) {
      const int predicted = router_probs(r, 1) > router_probs(r, 0) ? 1 : 0;
      stats->router_correct += predicted == static_cast<int>(labels[static_cast<std::size_t>(r)]);
      ++stats->router_total;
    }
    for (Eigen::Index r = 0; r < al.probs.rows(); ++r) {
      Eigen::Index best = 0;
      al.probs.row(r).maxCoeff(&best);
      stats->marker_correct += static_cast<int>(best) + 1 == markers[static_cast<std::size_t>(r)];
      ++stats->marker_total;
    }
  }
  if (!grad) return out;

  const Eigen::Index H = state.config.hidden_size;
  TraceGradient<Scalar> up;
  up.hidden = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(L), H);
  up.logits = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(L), state.config.vocab_size);

  const Matrix<Scalar> d_lm =
      cross_entropy_grad(lm_probs, std::span<const int>(default_targets)) * Scalar(grad_scale * w.default_weight);
  for (std::size_t r = 0; r < default_rows.size(); ++r) up.logits.row(default_rows[r]) = d_lm.row(static_cast<Eigen::Index>(r));

  std::vector<int> role_targets(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) role_targets[i] = static_cast<int>(labels[i]);
  const Matrix<Scalar> d_router =
      cross_entropy_grad(router_probs, std::span<const int>(role_targets)) * Scalar(grad_scale * w.beta);
  grad->router_weight.noalias() += d_router.transpose() * h_all;
  const Matrix<Scalar> dh_router = d_router * state.router_weight;
  for (std::size_t r = 0; r < all_rows.size(); ++r) up.hidden.row(all_rows[r]) += dh_router.row(static_cast<Eigen::Index>(r));

  Matrix<Scalar> d_rows = Matrix<Scalar>::Zero(set.rows.rows(), H);
  if (!citation_rows.empty()) {
    std::vector<int> marker_targets(markers.size());
    for (std::size_t i = 0; i < markers.size(); ++i) marker_targets[i] = markers[i] - 1;
    const Matrix<Scalar> d_scores =
        cross_entropy_grad(al.probs, std::span<const int>(marker_targets)) * Scalar(grad_scale * w.alpha);
    const Matrix<Scalar> dz = d_scores * set.rows;
    d_rows.noalias() += d_scores.transpose() * al.z;
    grad->align_weight.noalias() += dz.transpose() * h_cite;
    grad->align_bias.row(0) += dz.colwise().sum();
    const Matrix<Scalar> dh_cite = dz * state.align_weight;
    for (std::size_t r = 0; r < citation_rows.size(); ++r) up.hidden.row(citation_rows[r]) += dh_cite.row(static_cast<Eigen::Index>(r));
  }

  if (w.gamma != 0.0 && !state.layers.empty()) {
    auto [dq, dk] = attn_loss_grad(tr, plan);
    up.queries = dq * Scalar(grad_scale * w.gamma);
    up.keys = dk * Scalar(grad_scale * w.gamma);
  }

  const Matrix<Scalar> d_embeddings = backward(state, tr, up, *grad);
  splice_backward(tokens, d_embeddings, d_rows, *grad);
  citation_set_backward(set, d_rows, *grad);
  return out;
}

}  // namespace citelm
