#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "citelm/decoder.hpp"
#include "citelm/evalkit.hpp"
#include "citelm/model.hpp"
#include "citelm/objective.hpp"

namespace citelm {

struct TrainConfig {
  BackboneConfig model;
  double alpha = 0.2;
  double beta = 0.1;
  double gamma = 0.1;
  double learning_rate = 3e-3;
  int n_steps = 2000;
  int batch_size = 16;
  std::uint64_t seed = 0;
  bool disable_fusion = false;  // "w/o CAE": citation tokens keep plain table rows
  bool disable_attn = false;    // "w/o Attn": gamma forced to 0
  double attn_budget = kAttentionBudget;
  double grad_clip = 1.0;  // global L2 norm
  int warmup_steps = 100;
  double min_lr_ratio = 0.1;  // cosine decay floor
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, applied to every tensor
  int checkpoint_every = 0;  // 0 disables intermediate checkpoints
  std::filesystem::path checkpoint_dir;

  void validate() const;
  ObjectiveOptions objective() const;
  double effective_gamma() const { return disable_attn ? 0.0 : gamma; }
  double learning_rate_at(int step) const;
};

nlohmann::ordered_json to_json(const TrainConfig& config);
// FNV-1a over the canonical JSON; `with_ablation` false drops the two
// ablation flags so variants of one run share a base hash.
std::string config_hash(const TrainConfig& config, bool with_ablation = true);

struct TrainRecord {
  int step = 0;
  LossBreakdown losses;  // batch mean
  double grad_norm = 0.0;
  double learning_rate = 0.0;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  double wall_clock_seconds = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  LossWeights weights;
};

struct TrainResult {
  ModelState<double> state;
  TrainLog log;
};

using StepCallback = std::function<void(const TrainRecord&, const ModelState<double>&)>;

// Deterministic given config.seed and the initial state: batches are drawn
// from per-epoch shuffles, gradients are accumulated in example order.
TrainResult train(const TrainConfig& config, std::span<const Example> corpus,
                  ModelState<double> initial, const StepCallback& on_step = {});

// Batch-mean objective and gradient; the building block of train().
LossBreakdown batch_objective(const ModelState<double>& state, std::span<const Example* const> batch,
                              const ObjectiveOptions& options, ModelState<double>* grad);

void write_train_log(const std::filesystem::path& path, const TrainLog& log);
nlohmann::ordered_json to_json(const TrainRecord& record, const LossWeights& weights);

// FNV-1a over every parameter's bytes in checkpoint order.
std::uint64_t parameter_hash(const ModelState<double>& state);

// Held-out evaluation of a trained model.
struct HeldOutEvaluation {
  HeadStats heads;  // teacher-forced router / marker accuracy
  MetricsReport metrics;
  std::vector<GenerationRecord> generations;
  std::size_t invalid_markers = 0;  // emitted markers outside [1, N]
};

HeldOutEvaluation evaluate_model(const ModelState<double>& state, std::span<const Example> heldout,
                                 bool contextual_citations, const DecodeConfig& decode);

struct AblationVariant {
  std::string name;
  TrainConfig config;
  std::string config_hash;
  std::string base_config_hash;
  LossBreakdown final_losses;
  HeldOutEvaluation evaluation;
};

struct AblationReport {
  std::vector<AblationVariant> variants;  // full, w/o CAE, w/o Attn

  nlohmann::ordered_json to_json() const;
};

// Rows per metric (citation F1, correctness) with the full model's value and
// each ablation's value and relative drop, in percent.
nlohmann::ordered_json ablation_table(const AblationReport& report);

// Trains the full model and both ablations from identical seeds and
// evaluates each on `heldout`.
AblationReport ablate(const TrainConfig& config, std::span<const Example> train_corpus,
                      std::span<const Example> heldout, const DecodeConfig& decode,
                      const StepCallback& on_step = {});

}  // namespace citelm
