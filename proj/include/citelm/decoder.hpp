#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "citelm/backbone.hpp"
#include "citelm/corpus.hpp"
#include "citelm/fusion.hpp"
#include "citelm/heads.hpp"

namespace citelm {

struct DecodeConfig {
  enum class Mode { kGreedy, kSampled };

  int max_new_tokens = 64;
  Mode mode = Mode::kGreedy;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  // A step emits a citation when p_citation exceeds this.
  double router_threshold = 0.5;

  void validate() const;
};

// Scores for the next position given everything emitted so far.
struct StepScores {
  std::array<double, 2> router{0.5, 0.5};  // (p_default, p_citation)
  std::vector<double> logits;              // vocabulary
  std::vector<double> alignment;           // over markers 1..N
};

// What the decode loop needs from a model. The real implementation runs the
// backbone; tests substitute scripted doubles.
class StepModel {
 public:
  virtual ~StepModel() = default;
  virtual StepScores score(std::span<const TaggedToken> sequence) const = 0;
};

struct GenerationRecord {
  std::vector<TaggedToken> emitted;             // excludes the end token
  std::vector<std::array<double, 2>> router;    // one per step
  std::vector<std::vector<double>> alignment;   // one per citation step
  AttributedResponse response;
  bool reached_end = false;
  int leading_citations = 0;
};

// Segmentation: default tokens accumulate into a sentence, periods
// close it, and citations attach to the most recent sentence. A citation
// before any content opens an empty sentence and is counted in
// `leading_citations`.
AttributedResponse segment(std::span<const TaggedToken> tokens, int* leading_citations = nullptr);

GenerationRecord generate(const StepModel& model, std::span<const TaggedToken> prompt,
                          const Vocabulary& vocab, const DecodeConfig& config);

nlohmann::ordered_json to_json(const GenerationRecord& record, const Vocabulary& vocab);
GenerationRecord generation_from_json(const nlohmann::ordered_json& j, int n_docs,
                                      const Vocabulary& vocab);

// Backbone-backed step model: splices the live citation embeddings into the
// running sequence and reads the last position.
template <typename Scalar>
class ModelStepModel final : public StepModel {
 public:
  ModelStepModel(const ModelState<Scalar>& state, const CitationEmbeddingSet<Scalar>& set)
      : state_(state), set_(set) {}

  StepScores score(std::span<const TaggedToken> sequence) const override {
    const ForwardTrace<Scalar> tr = forward(state_, splice(state_, sequence, set_));
    const Matrix<Scalar> h = tr.hidden.bottomRows(1);
    StepScores s;
    const Matrix<Scalar> r = route(state_, h);
    s.router = {static_cast<double>(r(0, 0)), static_cast<double>(r(0, 1))};
    s.logits.resize(static_cast<std::size_t>(tr.logits.cols()));
    for (Eigen::Index v = 0; v < tr.logits.cols(); ++v) {
      s.logits[static_cast<std::size_t>(v)] = static_cast<double>(tr.logits(tr.logits.rows() - 1, v));
    }
    const AlignmentOutput<Scalar> al = align(state_, h, set_);
    for (Eigen::Index i = 0; i < al.probs.cols(); ++i) s.alignment.push_back(static_cast<double>(al.probs(0, i)));
    return s;
  }

 private:
  const ModelState<Scalar>& state_;
  const CitationEmbeddingSet<Scalar>& set_;
};

template <typename Scalar>
GenerationRecord generate(const ModelState<Scalar>& state, const Example& example,
                          const CitationEmbeddingSet<Scalar>& set, const DecodeConfig& config) {
  const Vocabulary vocab = state.config.vocabulary();
  const Prompt prompt = assemble_prompt(example, vocab);
  return generate(ModelStepModel<Scalar>(state, set), std::span<const TaggedToken>(prompt.tokens), vocab,
                  config);
}

}  // namespace citelm
