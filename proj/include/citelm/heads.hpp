#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "citelm/backbone.hpp"
#include "citelm/corpus.hpp"
#include "citelm/fusion.hpp"

namespace citelm {

inline constexpr double kProbClamp = 1e-12;

// Mean of -log(max(p[target], clamp)) over rows. An empty row set is 0.
template <typename Scalar>
Scalar cross_entropy(const Matrix<Scalar>& probs, std::span<const int> targets) {
  if (static_cast<std::size_t>(probs.rows()) != targets.size()) {
    throw LengthMismatch("cross_entropy: " + std::to_string(probs.rows()) + " rows vs " +
                         std::to_string(targets.size()) + " targets");
  }
  if (targets.empty()) return Scalar(0);
  Scalar sum = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const Scalar p = probs(static_cast<Eigen::Index>(r), targets[r]);
    sum -= std::log(std::max(p, Scalar(kProbClamp)));
  }
  return sum / Scalar(targets.size());
}

// d(cross_entropy)/d(logits) when probs = softmax(logits). Rows whose target
// probability sits under the clamp are flat.
template <typename Scalar>
Matrix<Scalar> cross_entropy_grad(const Matrix<Scalar>& probs, std::span<const int> targets) {
  Matrix<Scalar> g = probs;
  const Scalar inv_n = targets.empty() ? Scalar(0) : Scalar(1) / Scalar(targets.size());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    if (probs(row, targets[r]) < Scalar(kProbClamp)) {
      g.row(row).setZero();
    } else {
      g(row, targets[r]) -= Scalar(1);
    }
  }
  return g * inv_n;
}

template <typename Scalar>
void check_finite(const Matrix<Scalar>& m, const char* what) {
  if (!m.allFinite()) throw NonFiniteInput(std::string(what) + " contains non-finite values");
}

// ---------------------------------------------------------------------------
// Router: r_t = softmax(W_r h_t), column 0 = default, column 1 = citation.
// ---------------------------------------------------------------------------

template <typename Scalar>
Matrix<Scalar> router_logits(const ModelState<Scalar>& state, const Matrix<Scalar>& hidden) {
  check_finite(hidden, "router input");
  return hidden * state.router_weight.transpose();
}

template <typename Scalar>
Matrix<Scalar> route(const ModelState<Scalar>& state, const Matrix<Scalar>& hidden) {
  return softmax_rows(router_logits(state, hidden));
}

template <typename Scalar>
Scalar router_loss(const Matrix<Scalar>& probs, std::span<const Role> labels) {
  std::vector<int> t(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) t[i] = static_cast<int>(labels[i]);
  return cross_entropy(probs, std::span<const int>(t));
}

// ---------------------------------------------------------------------------
// Alignment: z_t = W_c h_t + b_c, p_c = softmax(C z_t).
// ---------------------------------------------------------------------------

template <typename Scalar>
struct AlignmentOutput {
  Matrix<Scalar> z;      // n x H
  Matrix<Scalar> probs;  // n x N
};

template <typename Scalar>
AlignmentOutput<Scalar> align(const ModelState<Scalar>& state, const Matrix<Scalar>& hidden,
                              const CitationEmbeddingSet<Scalar>& set) {
  if (set.size() < 1) throw EmptyCitationSet("alignment needs at least one citation embedding");
  check_finite(hidden, "alignment input");
  AlignmentOutput<Scalar> out;
  out.z = hidden * state.align_weight.transpose();
  out.z.rowwise() += state.align_bias.row(0);
  out.probs = softmax_rows(Matrix<Scalar>(out.z * set.rows.transpose()));
  return out;
}

// `markers` are 1-based.
template <typename Scalar>
Scalar alignment_loss(const Matrix<Scalar>& probs, std::span<const int> markers) {
  std::vector<int> t(markers.size());
  for (std::size_t i = 0; i < markers.size(); ++i) {
    if (markers[i] < 1 || markers[i] > probs.cols()) {
      throw MarkerOutOfRange("marker " + std::to_string(markers[i]) + " outside [1, " +
                             std::to_string(probs.cols()) + "]");
    }
    t[i] = markers[i] - 1;
  }
  return cross_entropy(probs, std::span<const int>(t));
}

// ---------------------------------------------------------------------------
// Default (vocabulary) loss over positions whose target is a default token.
// ---------------------------------------------------------------------------

template <typename Scalar>
Scalar default_lm_loss(const Matrix<Scalar>& logits, std::span<const TokenId> targets,
                       std::span<const Role> roles) {
  if (targets.size() != roles.size() || static_cast<std::size_t>(logits.rows()) != targets.size()) {
    throw LengthMismatch("default_lm_loss: logits, targets and roles must align");
  }
  std::vector<Eigen::Index> rows;
  std::vector<int> t;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (roles[i] == Role::kDefault) {
      rows.push_back(static_cast<Eigen::Index>(i));
      t.push_back(targets[i]);
    }
  }
  if (rows.empty()) return Scalar(0);
  Matrix<Scalar> selected(static_cast<Eigen::Index>(rows.size()), logits.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) selected.row(static_cast<Eigen::Index>(r)) = logits.row(rows[r]);
  return cross_entropy(softmax_rows(selected), std::span<const int>(t));
}

}  // namespace citelm
