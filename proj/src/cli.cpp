#include "citelm/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "citelm/config.hpp"
#include "citelm/evalkit.hpp"
#include "citelm/hash.hpp"
#include "citelm/trainer.hpp"

namespace citelm {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;  // key=value

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Config file (key = value, [section] headers)")
        ->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "Seed for corpus, initialization, batching and sampling");
    app->add_option("--set", overrides, "Override one config key, e.g. --set train.n_steps=500");
  }

  // Defaults, then the config file, then --set, then --seed. Command flags
  // are applied by the caller afterwards.
  RunConfig resolve() const {
    RunConfig c;
    if (!config_path.empty()) apply_config(c, read_config_file(config_path));
    for (const std::string& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw InvalidConfig("--set expects key=value, got '" + kv + "'");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) c.set("seed", std::to_string(*seed));
    return c;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

class Manifest {
 public:
  Manifest(std::string command, std::vector<std::string> argv)
      : command_(std::move(command)), argv_(std::move(argv)), start_(std::chrono::steady_clock::now()) {}

  void input(const fs::path& p) { inputs_.push_back(p); }
  void output(const fs::path& p) { outputs_.push_back(p); }

  // Written next to `primary` as `<primary>.manifest.json`.
  void write(const fs::path& primary, const RunConfig& config, const Json& summary) const {
    Json j;
    j["command"] = command_;
    j["argv"] = argv_;
    j["config"] = to_json(config);
    j["seed"] = config.train.seed;
    auto files = [](const std::vector<fs::path>& paths) {
      Json arr = Json::array();
      for (const fs::path& p : paths) arr.push_back({{"path", p.string()}, {"fnv1a64", file_hash(p)}});
      return arr;
    };
    j["inputs"] = files(inputs_);
    j["outputs"] = files(outputs_);
    j["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    j["summary"] = summary;
    fs::path path = primary;
    path += ".manifest.json";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  std::vector<fs::path> inputs_, outputs_;
  std::chrono::steady_clock::time_point start_;
};

void write_json(const fs::path& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

struct Checkpoint {
  ModelState<double> state;
  bool contextual = true;
};

Checkpoint open_checkpoint(const fs::path& path) {
  Checkpoint c{load_checkpoint<double>(path), true};
  const Json header = read_checkpoint_header(path);
  if (header.contains("training")) c.contextual = !header["training"].value("disable_fusion", false);
  return c;
}

std::vector<Example> limit(std::vector<Example> v, int n) {
  if (n >= 0 && static_cast<std::size_t>(n) < v.size()) v.resize(static_cast<std::size_t>(n));
  return v;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attributed generation with contextual citation embeddings (desk scale)"};
  app.require_subcommand(1);
  const std::vector<std::string> args(argv, argv + argc);

  // synth
  Common synth_common;
  std::string synth_out, synth_heldout_out;
  std::optional<int> synth_n, synth_docs, synth_facts, synth_answers, synth_heldout;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic attributed-QA corpus");
  synth_common.attach(synth);
  synth->add_option("--out", synth_out, "Training corpus (JSONL)")->required();
  synth->add_option("--heldout-out", synth_heldout_out, "Held-out corpus (JSONL)");
  synth->add_option("--n-examples", synth_n, "Training examples");
  synth->add_option("--n-docs", synth_docs, "Documents per example");
  synth->add_option("--facts-per-doc", synth_facts, "Fact tokens per document");
  synth->add_option("--max-answers", synth_answers, "Most documents one query asks about");
  synth->add_option("--heldout", synth_heldout, "Held-out examples written to --heldout-out");

  // train
  Common train_common;
  std::string train_data, train_out, train_log;
  std::optional<int> train_steps, train_batch;
  std::optional<double> train_lr;
  bool train_no_fusion = false, train_no_attn = false, train_progress = false;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  train_common.attach(train_cmd);
  train_cmd->add_option("--data", train_data, "Training corpus (JSONL)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--log", train_log, "Loss log (JSONL); default <out>.log.jsonl");
  train_cmd->add_option("--steps", train_steps, "Optimizer steps");
  train_cmd->add_option("--batch-size", train_batch, "Examples per step");
  train_cmd->add_option("--lr", train_lr, "Peak learning rate");
  train_cmd->add_flag("--disable-fusion", train_no_fusion, "Plain citation-token embeddings (w/o CAE)");
  train_cmd->add_flag("--disable-attn", train_no_attn, "Drop the attention-shaping loss (w/o Attn)");
  train_cmd->add_flag("--progress", train_progress, "Print losses every 100 steps to stderr");

  // generate
  Common gen_common;
  std::string gen_ckpt, gen_data, gen_out, gen_mode;
  std::optional<double> gen_temp, gen_threshold;
  std::optional<int> gen_max;
  int gen_limit = -1;
  CLI::App* gen = app.add_subcommand("generate", "Decode attributed responses for a corpus");
  gen_common.attach(gen);
  gen->add_option("--checkpoint", gen_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  gen->add_option("--data", gen_data, "Corpus (JSONL)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Generations (JSONL)")->required();
  gen->add_option("--mode", gen_mode, "greedy or sampled");
  gen->add_option("--temperature", gen_temp, "Sampling temperature");
  gen->add_option("--router-threshold", gen_threshold, "Citation probability needed to emit a marker");
  gen->add_option("--max-new-tokens", gen_max, "Decode budget per response");
  gen->add_option("--limit", gen_limit, "Only the first N examples");

  // eval
  Common eval_common;
  std::string eval_data, eval_gens, eval_ckpt, eval_out, eval_judgments;
  int eval_limit = -1;
  CLI::App* eval = app.add_subcommand("eval", "Score responses (gold by default)");
  eval_common.attach(eval);
  eval->add_option("--data", eval_data, "Corpus (JSONL)")->required()->check(CLI::ExistingFile);
  auto* g_opt = eval->add_option("--generations", eval_gens, "Generations from `generate`")->check(CLI::ExistingFile);
  auto* c_opt = eval->add_option("--checkpoint", eval_ckpt, "Decode with this model, then score")->check(CLI::ExistingFile);
  g_opt->excludes(c_opt);
  eval->add_option("--judgments", eval_judgments, "Judgment table replacing the containment oracle")
      ->check(CLI::ExistingFile);
  eval->add_option("--out", eval_out, "Metrics report (JSON)")->required();
  eval->add_option("--limit", eval_limit, "Only the first N examples");

  // ablate
  Common abl_common;
  std::string abl_data, abl_heldout, abl_out;
  std::vector<std::uint64_t> abl_seeds;
  std::optional<int> abl_steps;
  CLI::App* abl = app.add_subcommand("ablate", "Train full, w/o CAE and w/o Attn variants and compare");
  abl_common.attach(abl);
  abl->add_option("--data", abl_data, "Training corpus (JSONL)")->required()->check(CLI::ExistingFile);
  abl->add_option("--heldout", abl_heldout, "Held-out corpus (JSONL)")->required()->check(CLI::ExistingFile);
  abl->add_option("--out", abl_out, "Comparison report (JSON)")->required();
  abl->add_option("--seeds", abl_seeds, "Training seeds; medians are reported across them");
  abl->add_option("--steps", abl_steps, "Optimizer steps per variant");

  // heatmap
  Common hm_common;
  std::string hm_ckpt, hm_data, hm_out, hm_source = "gold";
  int hm_index = 0;
  CLI::App* hm = app.add_subcommand("heatmap", "Export last-layer attention over one response");
  hm_common.attach(hm);
  hm->add_option("--checkpoint", hm_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  hm->add_option("--data", hm_data, "Corpus (JSONL)")->required()->check(CLI::ExistingFile);
  hm->add_option("--index", hm_index, "Example index")->check(CLI::NonNegativeNumber);
  hm->add_option("--source", hm_source, "gold or generated")->check(CLI::IsMember({"gold", "generated"}));
  hm->add_option("--out", hm_out, "Attention grid (CSV); index sidecar at <out>.index.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  Manifest manifest(command, args);
  RunConfig config;
  try {
    if (command == "synth") {
      config = synth_common.resolve();
      if (synth_n) config.set("synth.n_examples", std::to_string(*synth_n));
      if (synth_docs) config.set("synth.n_docs", std::to_string(*synth_docs));
      if (synth_facts) config.set("synth.facts_per_doc", std::to_string(*synth_facts));
      if (synth_answers) config.set("synth.max_answers", std::to_string(*synth_answers));
      if (synth_heldout) config.set("synth.heldout", std::to_string(*synth_heldout));
    } else if (command == "train") {
      config = train_common.resolve();
      if (train_steps) config.train.n_steps = *train_steps;
      if (train_batch) config.train.batch_size = *train_batch;
      if (train_lr) config.train.learning_rate = *train_lr;
      config.train.disable_fusion = config.train.disable_fusion || train_no_fusion;
      config.train.disable_attn = config.train.disable_attn || train_no_attn;
    } else if (command == "generate") {
      config = gen_common.resolve();
      if (!gen_mode.empty()) config.set("decode.mode", gen_mode);
      if (gen_temp) config.decode.temperature = *gen_temp;
      if (gen_threshold) config.decode.router_threshold = *gen_threshold;
      if (gen_max) config.decode.max_new_tokens = *gen_max;
    } else if (command == "eval") {
      config = eval_common.resolve();
    } else if (command == "ablate") {
      config = abl_common.resolve();
      if (abl_steps) config.train.n_steps = *abl_steps;
    } else {
      config = hm_common.resolve();
    }
    config.validate();
    if (command == "synth") config.train.model.vocabulary();
  } catch (const Error& e) {
    err << command << ": " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    const Vocabulary vocab = config.train.model.vocabulary();

    if (command == "synth") {
      SynthOptions opts = config.synth;
      const bool split = !synth_heldout_out.empty();
      const int n_train = opts.n_examples;
      if (split) opts.n_examples += config.heldout;
      const std::vector<Example> all = generate_synthetic_corpus(opts, vocab);
      const std::span<const Example> whole(all);
      write_jsonl(synth_out, whole.first(static_cast<std::size_t>(n_train)), vocab);
      manifest.output(synth_out);
      if (split) {
        write_jsonl(synth_heldout_out, whole.subspan(static_cast<std::size_t>(n_train)), vocab);
        manifest.output(synth_heldout_out);
      }
      const Json summary = {{"train_examples", n_train},
                            {"heldout_examples", split ? config.heldout : 0},
                            {"corpus_hash", file_hash(synth_out)}};
      manifest.write(synth_out, config, summary);
      out << "synth: " << n_train << " examples -> " << synth_out;
      if (split) out << ", " << config.heldout << " held-out -> " << synth_heldout_out;
      out << '\n';
      return kExitOk;
    }

    if (command == "train") {
      const std::vector<Example> data = read_jsonl(train_data, vocab);
      manifest.input(train_data);
      StepCallback progress;
      if (train_progress) {
        progress = [&err](const TrainRecord& r, const ModelState<double>&) {
          if (r.step % 100 == 0) {
            err << "step " << r.step << " total " << fmt("%.4f", r.losses.total) << " default "
                << fmt("%.4f", r.losses.l_default) << " citation " << fmt("%.4f", r.losses.l_citation)
                << " router " << fmt("%.4f", r.losses.l_router) << " attn " << fmt("%.4f", r.losses.l_attn)
                << '\n';
          }
        };
      }
      const TrainResult result =
          train(config.train, data, ModelState<double>::initialize(config.train.model), progress);
      save_checkpoint(train_out, result.state, Json(to_json(config.train)));
      const fs::path log_path = train_log.empty() ? fs::path(train_out + ".log.jsonl") : fs::path(train_log);
      write_train_log(log_path, result.log);
      manifest.output(train_out);
      manifest.output(log_path);
      const double final_total = result.log.records.empty() ? 0.0 : result.log.records.back().losses.total;
      const Json summary = {{"steps", config.train.n_steps},
                            {"final_total_loss", final_total},
                            {"train_seconds", result.log.wall_clock_seconds},
                            {"config_hash", result.log.config_hash},
                            {"parameter_hash", hex64(parameter_hash(result.state))}};
      manifest.write(train_out, config, summary);
      out << "train: " << config.train.n_steps << " steps in " << fmt("%.1f", result.log.wall_clock_seconds)
          << "s, final loss " << fmt("%.4f", final_total) << " -> " << train_out << '\n';
      return kExitOk;
    }

    if (command == "generate") {
      const Checkpoint ck = open_checkpoint(gen_ckpt);
      const Vocabulary mv = ck.state.config.vocabulary();
      const std::vector<Example> data = limit(read_jsonl(gen_data, mv), gen_limit);
      manifest.input(gen_ckpt);
      manifest.input(gen_data);
      std::ofstream file(gen_out, std::ios::binary);
      if (!file) throw Error("cannot write " + gen_out);
      std::size_t invalid = 0, citations = 0;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const auto set = citation_set_for(ck.state, data[i], ck.contextual);
        const GenerationRecord rec = generate(ck.state, data[i], set, config.decode);
        for (const TaggedToken& t : rec.emitted) {
          if (!t.is_citation()) continue;
          ++citations;
          invalid += t.marker < 1 || t.marker > data[i].n_docs();
        }
        Json line = to_json(rec, mv);
        line["example"] = i;
        file << line.dump() << '\n';
      }
      file.close();
      manifest.output(gen_out);
      const Json summary = {{"responses", data.size()}, {"citations", citations}, {"out_of_range_markers", invalid}};
      manifest.write(gen_out, config, summary);
      out << "generate: " << data.size() << " responses, " << citations << " citations, " << invalid
          << " out-of-range markers -> " << gen_out << '\n';
      return kExitOk;
    }

    if (command == "eval") {
      std::optional<Checkpoint> ck;
      if (!eval_ckpt.empty()) ck = open_checkpoint(eval_ckpt);
      const Vocabulary mv = ck ? ck->state.config.vocabulary() : vocab;
      const std::vector<Example> data = limit(read_jsonl(eval_data, mv), eval_limit);
      manifest.input(eval_data);
      std::vector<AttributedResponse> responses;
      std::string source = "gold";
      Json heads;
      if (ck) {
        source = "checkpoint";
        manifest.input(eval_ckpt);
        const HeldOutEvaluation ev = evaluate_model(ck->state, data, ck->contextual, config.decode);
        for (const GenerationRecord& g : ev.generations) responses.push_back(g.response);
        heads = {{"router_accuracy", ev.heads.router_accuracy()},
                 {"marker_accuracy", ev.heads.marker_accuracy()},
                 {"out_of_range_markers", ev.invalid_markers}};
      } else if (!eval_gens.empty()) {
        source = "generations";
        manifest.input(eval_gens);
        std::ifstream in(eval_gens, std::ios::binary);
        std::size_t line_no = 0;
        for (std::string line; std::getline(in, line);) {
          ++line_no;
          if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
          Json j;
          try {
            j = Json::parse(line);
          } catch (const nlohmann::json::exception& e) {
            throw ParseError(line_no, e.what());
          }
          const std::size_t idx = j.value("example", responses.size());
          if (idx >= data.size()) throw ParseError(line_no, "generation for unknown example " + std::to_string(idx));
          responses.push_back(generation_from_json(j, data[idx].n_docs(), mv).response);
        }
        if (responses.size() != data.size()) {
          throw LengthMismatch(std::to_string(responses.size()) + " generations for " +
                               std::to_string(data.size()) + " examples");
        }
      } else {
        for (const Example& ex : data) responses.push_back(ex.gold);
      }
      std::unique_ptr<EntailmentOracle> oracle;
      if (!eval_judgments.empty()) {
        manifest.input(eval_judgments);
        std::ifstream in(eval_judgments, std::ios::binary);
        oracle = std::make_unique<JudgmentTableOracle>(mv, nlohmann::json::parse(in));
      } else {
        oracle = std::make_unique<ContainmentOracle>(mv);
      }
      const MetricsReport report = score(responses, data, *oracle, mv);
      Json j = report.to_json();
      j["source"] = source;
      if (!heads.is_null()) j["heads"] = heads;
      write_json(eval_out, j);
      manifest.output(eval_out);
      manifest.write(eval_out, config, j["aggregate"]);
      const auto& a = report.aggregate;
      out << "eval (" << source << "): P " << fmt("%.1f", round1(100 * a.citation_precision)) << " R "
          << fmt("%.1f", round1(100 * a.citation_recall)) << " F1 " << fmt("%.1f", round1(100 * a.citation_f1))
          << " correctness " << fmt("%.1f", round1(100 * a.correctness)) << " over " << data.size()
          << " examples -> " << eval_out << '\n';
      return kExitOk;
    }

    if (command == "ablate") {
      const std::vector<Example> data = read_jsonl(abl_data, vocab);
      const std::vector<Example> heldout = read_jsonl(abl_heldout, vocab);
      manifest.input(abl_data);
      manifest.input(abl_heldout);
      if (abl_seeds.empty()) abl_seeds.push_back(config.train.seed);
      Json runs = Json::array();
      std::vector<std::vector<double>> f1(3), corr(3);
      std::vector<std::string> names;
      for (std::uint64_t seed : abl_seeds) {
        TrainConfig tc = config.train;
        tc.seed = tc.model.seed = seed;
        const AblationReport r = ablate(tc, data, heldout, config.decode);
        names.clear();
        for (std::size_t i = 0; i < r.variants.size(); ++i) {
          names.push_back(r.variants[i].name);
          f1[i].push_back(round1(100.0 * r.variants[i].evaluation.metrics.aggregate.citation_f1));
          corr[i].push_back(round1(100.0 * r.variants[i].evaluation.metrics.aggregate.correctness));
        }
        Json one = r.to_json();
        one["seed"] = seed;
        runs.push_back(std::move(one));
      }
      Json table = Json::array();
      const std::pair<const char*, std::vector<std::vector<double>>*> metrics[] = {{"citation_f1", &f1},
                                                                                  {"correctness", &corr}};
      for (const auto& [metric, values] : metrics) {
        Json row;
        row["metric"] = metric;
        const double ours = median((*values)[0]);
        row["ours"] = ours;
        for (std::size_t i = 1; i < names.size(); ++i) {
          const double v = median((*values)[i]);
          row[names[i]] = {{"value", v}, {"degradation_percent", ours > 0 ? round1(100.0 * (ours - v) / ours) : 0.0}};
        }
        table.push_back(std::move(row));
      }
      Json j;
      j["seeds"] = abl_seeds;
      j["median_table"] = table;
      j["runs"] = std::move(runs);
      write_json(abl_out, j);
      manifest.output(abl_out);
      manifest.write(abl_out, config, table);
      out << "ablate: median citation F1 over " << abl_seeds.size() << " seed(s): ours "
          << fmt("%.1f", median(f1[0])) << ", w/o CAE " << fmt("%.1f", median(f1[1])) << ", w/o Attn "
          << fmt("%.1f", median(f1[2])) << " -> " << abl_out << '\n';
      return kExitOk;
    }

    // heatmap
    const Checkpoint ck = open_checkpoint(hm_ckpt);
    const Vocabulary mv = ck.state.config.vocabulary();
    const std::vector<Example> data = read_jsonl(hm_data, mv);
    manifest.input(hm_ckpt);
    manifest.input(hm_data);
    if (static_cast<std::size_t>(hm_index) >= data.size()) {
      throw InvalidConfig("--index " + std::to_string(hm_index) + " outside corpus of " +
                          std::to_string(data.size()));
    }
    const Example& ex = data[static_cast<std::size_t>(hm_index)];
    const auto set = citation_set_for(ck.state, ex, ck.contextual);
    std::vector<TaggedToken> tokens;
    std::size_t begin = 0;
    if (hm_source == "gold") {
      const TrainingSequence seq = training_sequence(ex, mv);
      tokens = seq.tokens;
      begin = seq.response_start;
    } else {
      const Prompt prompt = assemble_prompt(ex, mv);
      const GenerationRecord rec = generate(ck.state, ex, set, config.decode);
      tokens = prompt.tokens;
      begin = tokens.size();
      tokens.insert(tokens.end(), rec.emitted.begin(), rec.emitted.end());
    }
    const ForwardTrace<double> tr = forward(ck.state, splice(ck.state, std::span<const TaggedToken>(tokens), set));
    export_heatmap(tr, begin, tokens.size(), tokens, mv, hm_out);
    manifest.output(hm_out);
    manifest.output(hm_out + ".index.csv");
    const std::size_t n = tokens.size() - begin;
    const Json summary = {{"example", hm_index}, {"source", hm_source}, {"size", n}};
    manifest.write(hm_out, config, summary);
    out << "heatmap: " << n << "x" << n << " grid for example " << hm_index << " (" << hm_source << ") -> "
        << hm_out << '\n';
    return kExitOk;
  } catch (const InvalidConfig& e) {
    err << command << ": " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << command << ": " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace citelm
