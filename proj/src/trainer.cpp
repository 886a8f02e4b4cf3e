#include "citelm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "citelm/hash.hpp"

namespace citelm {

void TrainConfig::validate() const {
  model.validate();
  if (alpha < 0 || beta < 0 || gamma < 0) throw InvalidConfig("loss coefficients must be nonnegative");
  if (!(learning_rate > 0)) throw InvalidConfig("learning_rate must be positive");
  if (n_steps < 0 || batch_size < 1) throw InvalidConfig("n_steps >= 0 and batch_size >= 1 required");
  if (!(attn_budget > 0)) throw InvalidConfig("attn_budget must be positive");
  if (weight_decay < 0) throw InvalidConfig("weight_decay must be nonnegative");
  if (warmup_steps < 0 || checkpoint_every < 0) throw InvalidConfig("step counts must be nonnegative");
}

ObjectiveOptions TrainConfig::objective() const {
  ObjectiveOptions o;
  o.weights.alpha = alpha;
  o.weights.beta = beta;
  o.weights.gamma = effective_gamma();
  o.contextual_citations = !disable_fusion;
  o.attn_budget = attn_budget;
  return o;
}

// Linear warmup, then cosine decay to min_lr_ratio * learning_rate.
double TrainConfig::learning_rate_at(int step) const {
  if (step < warmup_steps) return learning_rate * static_cast<double>(step + 1) / warmup_steps;
  const int span = std::max(1, n_steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return learning_rate * (min_lr_ratio + (1.0 - min_lr_ratio) * cosine);
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = to_json(c.model);
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  j["gamma"] = c.gamma;
  j["learning_rate"] = c.learning_rate;
  j["n_steps"] = c.n_steps;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["disable_fusion"] = c.disable_fusion;
  j["disable_attn"] = c.disable_attn;
  j["attn_budget"] = c.attn_budget;
  j["grad_clip"] = c.grad_clip;
  j["warmup_steps"] = c.warmup_steps;
  j["min_lr_ratio"] = c.min_lr_ratio;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["weight_decay"] = c.weight_decay;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

std::string config_hash(const TrainConfig& config, bool with_ablation) {
  nlohmann::ordered_json j = to_json(config);
  if (!with_ablation) {
    j.erase("disable_fusion");
    j.erase("disable_attn");
  }
  return hex64(fnv1a(j.dump()));
}

LossBreakdown batch_objective(const ModelState<double>& state, std::span<const Example* const> batch,
                              const ObjectiveOptions& options, ModelState<double>* grad) {
  LossBreakdown sum;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const Example* ex : batch) {
    const LossBreakdown b = example_objective(state, *ex, options, grad, scale);
    sum.l_default += b.l_default * scale;
    sum.l_citation += b.l_citation * scale;
    sum.l_router += b.l_router * scale;
    sum.l_attn += b.l_attn * scale;
  }
  return combined_loss(sum.l_default, sum.l_citation, sum.l_router, sum.l_attn, options.weights);
}

namespace {

double global_norm(ModelState<double>& grad) {
  double sq = 0.0;
  for (auto& [name, m] : grad.tensors()) sq += m->squaredNorm();
  return std::sqrt(sq);
}

class Adam {
 public:
  Adam(const BackboneConfig& cfg, double b1, double b2, double eps, double decay)
      : m_(ModelState<double>::zeros(cfg)),
        v_(ModelState<double>::zeros(cfg)),
        b1_(b1),
        b2_(b2),
        eps_(eps),
        decay_(decay) {}

  void step(ModelState<double>& params, ModelState<double>& grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    auto p = params.tensors();
    auto g = grad.tensors();
    auto m = m_.tensors();
    auto v = v_.tensors();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i].second->array() = b1_ * m[i].second->array() + (1.0 - b1_) * g[i].second->array();
      v[i].second->array() = b2_ * v[i].second->array() + (1.0 - b2_) * g[i].second->array().square();
      if (decay_ > 0) *p[i].second *= 1.0 - lr * decay_;
      p[i].second->array() -=
          lr * (m[i].second->array() / c1) / ((v[i].second->array() / c2).sqrt() + eps_);
    }
  }

 private:
  ModelState<double> m_, v_;
  double b1_, b2_, eps_, decay_;
  int t_ = 0;
};

}  // namespace

TrainResult train(const TrainConfig& config, std::span<const Example> corpus,
                  ModelState<double> initial, const StepCallback& on_step) {
  config.validate();
  if (corpus.empty()) throw InvalidConfig("training corpus is empty");
  if (!(initial.config == config.model)) throw InvalidConfig("initial state does not match model config");
  const auto t0 = std::chrono::steady_clock::now();

  TrainResult result{std::move(initial), {}};
  result.log.seed = config.seed;
  result.log.config_hash = config_hash(config);
  const ObjectiveOptions options = config.objective();
  result.log.weights = options.weights;

  ModelState<double>& state = result.state;
  ModelState<double> grad = ModelState<double>::zeros(config.model);
  Adam adam(config.model, config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay);

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(corpus.size());
  std::size_t cursor = order.size();
  std::vector<const Example*> batch;

  for (int step = 0; step < config.n_steps; ++step) {
    batch.clear();
    while (batch.size() < static_cast<std::size_t>(config.batch_size)) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&corpus[order[cursor++]]);
    }
    grad.set_zero();
    TrainRecord rec;
    rec.step = step;
    try {
      rec.losses = batch_objective(state, batch, options, &grad);
    } catch (const NonFiniteLoss& e) {
      throw NonFiniteLoss("step " + std::to_string(step) + ": " + e.what());
    }
    rec.grad_norm = global_norm(grad);
    if (!std::isfinite(rec.grad_norm)) {
      throw NonFiniteLoss("step " + std::to_string(step) + ": non-finite gradient");
    }
    if (config.grad_clip > 0 && rec.grad_norm > config.grad_clip) {
      const double s = config.grad_clip / rec.grad_norm;
      for (auto& [name, m] : grad.tensors()) *m *= s;
    }
    rec.learning_rate = config.learning_rate_at(step);
    adam.step(state, grad, rec.learning_rate);
    result.log.records.push_back(rec);
    if (on_step) on_step(rec, state);
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
        !config.checkpoint_dir.empty()) {
      std::filesystem::create_directories(config.checkpoint_dir);
      save_checkpoint(config.checkpoint_dir / ("step_" + std::to_string(step + 1) + ".ckpt"), state,
                      nlohmann::ordered_json(to_json(config)));
    }
  }
  result.log.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

nlohmann::ordered_json to_json(const TrainRecord& r, const LossWeights& w) {
  return {{"step", r.step},
          {"l_default", r.losses.l_default},
          {"l_citation", r.losses.l_citation},
          {"l_router", r.losses.l_router},
          {"l_attn", r.losses.l_attn},
          {"total", r.losses.total},
          {"alpha", w.alpha},
          {"beta", w.beta},
          {"gamma", w.gamma},
          {"grad_norm", r.grad_norm},
          {"learning_rate", r.learning_rate}};
}

void write_train_log(const std::filesystem::path& path, const TrainLog& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string());
  for (const TrainRecord& r : log.records) out << to_json(r, log.weights).dump() << '\n';
  out << nlohmann::ordered_json{{"summary", true},
                                {"seed", log.seed},
                                {"config_hash", log.config_hash},
                                {"wall_clock_seconds", log.wall_clock_seconds},
                                {"steps", log.records.size()}}
             .dump()
      << '\n';
}

std::uint64_t parameter_hash(const ModelState<double>& state) {
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, m] : state.tensors()) {
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(m->data()),
                               sizeof(double) * static_cast<std::size_t>(m->size())),
              h);
  }
  return h;
}

HeldOutEvaluation evaluate_model(const ModelState<double>& state, std::span<const Example> heldout,
                                 bool contextual_citations, const DecodeConfig& decode) {
  HeldOutEvaluation ev;
  const Vocabulary vocab = state.config.vocabulary();
  ObjectiveOptions options;
  options.contextual_citations = contextual_citations;
  std::vector<AttributedResponse> responses;
  for (const Example& ex : heldout) {
    example_objective<double>(state, ex, options, nullptr, 1.0, &ev.heads);
    const auto set = citation_set_for(state, ex, contextual_citations);
    GenerationRecord rec = generate(state, ex, set, decode);
    for (const TaggedToken& t : rec.emitted) {
      if (t.is_citation() && (t.marker < 1 || t.marker > ex.n_docs())) ++ev.invalid_markers;
    }
    responses.push_back(rec.response);
    ev.generations.push_back(std::move(rec));
  }
  ev.metrics = score(responses, heldout, ContainmentOracle(vocab), vocab);
  return ev;
}

AblationReport ablate(const TrainConfig& config, std::span<const Example> train_corpus,
                      std::span<const Example> heldout, const DecodeConfig& decode,
                      const StepCallback& on_step) {
  AblationReport report;
  const std::pair<const char*, std::pair<bool, bool>> variants[] = {
      {"full", {false, false}}, {"w/o CAE", {true, false}}, {"w/o Attn", {false, true}}};
  for (const auto& [name, flags] : variants) {
    AblationVariant v;
    v.name = name;
    v.config = config;
    v.config.disable_fusion = flags.first;
    v.config.disable_attn = flags.second;
    v.config_hash = config_hash(v.config);
    v.base_config_hash = config_hash(v.config, false);
    TrainResult r = train(v.config, train_corpus, ModelState<double>::initialize(v.config.model), on_step);
    if (!r.log.records.empty()) v.final_losses = r.log.records.back().losses;
    v.evaluation = evaluate_model(r.state, heldout, !v.config.disable_fusion, decode);
    report.variants.push_back(std::move(v));
  }
  return report;
}

nlohmann::ordered_json ablation_table(const AblationReport& report) {
  using Metric = double (*)(const ExampleMetrics&);
  const std::pair<const char*, Metric> metrics[] = {
      {"citation_f1", [](const ExampleMetrics& m) { return m.citation_f1; }},
      {"correctness", [](const ExampleMetrics& m) { return m.correctness; }}};
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  if (report.variants.empty()) return table;
  for (const auto& [name, get] : metrics) {
    const double ours = round1(100.0 * get(report.variants.front().evaluation.metrics.aggregate));
    nlohmann::ordered_json row;
    row["metric"] = name;
    row["ours"] = ours;
    for (std::size_t i = 1; i < report.variants.size(); ++i) {
      const double v = round1(100.0 * get(report.variants[i].evaluation.metrics.aggregate));
      row[report.variants[i].name] = {{"value", v},
                                      {"degradation_percent", ours > 0 ? round1(100.0 * (ours - v) / ours) : 0.0}};
    }
    table.push_back(std::move(row));
  }
  return table;
}

nlohmann::ordered_json AblationReport::to_json() const {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const AblationVariant& v : variants) {
    const auto& agg = v.evaluation.metrics.aggregate;
    rows.push_back({{"variant", v.name},
                    {"disable_fusion", v.config.disable_fusion},
                    {"disable_attn", v.config.disable_attn},
                    {"config_hash", v.config_hash},
                    {"base_config_hash", v.base_config_hash},
                    {"citation_f1", round1(100.0 * agg.citation_f1)},
                    {"citation_precision", round1(100.0 * agg.citation_precision)},
                    {"citation_recall", round1(100.0 * agg.citation_recall)},
                    {"correctness", round1(100.0 * agg.correctness)},
                    {"router_accuracy", v.evaluation.heads.router_accuracy()},
                    {"marker_accuracy", v.evaluation.heads.marker_accuracy()},
                    {"final_losses",
                     {{"l_default", v.final_losses.l_default},
                      {"l_citation", v.final_losses.l_citation},
                      {"l_router", v.final_losses.l_router},
                      {"l_attn", v.final_losses.l_attn},
                      {"total", v.final_losses.total}}}});
  }
  nlohmann::ordered_json j;
  j["variants"] = std::move(rows);
  j["table"] = ablation_table(*this);
  return j;
}

}  // namespace citelm
