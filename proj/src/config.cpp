#include "citelm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace citelm {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw InvalidConfig("bad value '" + std::string(text) + "' for " + std::string(key));
  }
  return v;
}

// std::from_chars for double is unavailable on some toolchains.
template <>
double parse_number<double>(std::string_view key, std::string_view text) {
  const std::string s(text);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size()) throw InvalidConfig("bad value '" + s + "' for " + std::string(key));
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw InvalidConfig("bad value '" + std::string(text) + "' for " + std::string(key) + " (expected true/false)");
}

using Setter = std::function<void(RunConfig&, std::string_view, std::string_view)>;

template <typename T, typename Get>
Setter number(Get get) {
  return [get](RunConfig& c, std::string_view key, std::string_view v) { get(c) = parse_number<T>(key, v); };
}

template <typename Get>
Setter boolean(Get get) {
  return [get](RunConfig& c, std::string_view key, std::string_view v) { get(c) = parse_bool(key, v); };
}

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"synth.n_examples", number<int>([](RunConfig& c) -> int& { return c.synth.n_examples; })},
      {"synth.n_docs", number<int>([](RunConfig& c) -> int& { return c.synth.n_docs; })},
      {"synth.facts_per_doc", number<int>([](RunConfig& c) -> int& { return c.synth.facts_per_doc; })},
      {"synth.max_answers", number<int>([](RunConfig& c) -> int& { return c.synth.max_answers; })},
      {"synth.heldout", number<int>([](RunConfig& c) -> int& { return c.heldout; })},
      {"model.vocab_size", number<int>([](RunConfig& c) -> int& { return c.train.model.vocab_size; })},
      {"model.hidden_size", number<int>([](RunConfig& c) -> int& { return c.train.model.hidden_size; })},
      {"model.n_layers", number<int>([](RunConfig& c) -> int& { return c.train.model.n_layers; })},
      {"model.n_heads", number<int>([](RunConfig& c) -> int& { return c.train.model.n_heads; })},
      {"model.max_seq_len", number<int>([](RunConfig& c) -> int& { return c.train.model.max_seq_len; })},
      {"model.max_citations", number<int>([](RunConfig& c) -> int& { return c.train.model.max_citations; })},
      {"model.ffn_multiplier", number<int>([](RunConfig& c) -> int& { return c.train.model.ffn_multiplier; })},
      {"model.init_std", number<double>([](RunConfig& c) -> double& { return c.train.model.init_std; })},
      {"train.alpha", number<double>([](RunConfig& c) -> double& { return c.train.alpha; })},
      {"train.beta", number<double>([](RunConfig& c) -> double& { return c.train.beta; })},
      {"train.gamma", number<double>([](RunConfig& c) -> double& { return c.train.gamma; })},
      {"train.learning_rate", number<double>([](RunConfig& c) -> double& { return c.train.learning_rate; })},
      {"train.n_steps", number<int>([](RunConfig& c) -> int& { return c.train.n_steps; })},
      {"train.batch_size", number<int>([](RunConfig& c) -> int& { return c.train.batch_size; })},
      {"train.disable_fusion", boolean([](RunConfig& c) -> bool& { return c.train.disable_fusion; })},
      {"train.disable_attn", boolean([](RunConfig& c) -> bool& { return c.train.disable_attn; })},
      {"train.attn_budget", number<double>([](RunConfig& c) -> double& { return c.train.attn_budget; })},
      {"train.grad_clip", number<double>([](RunConfig& c) -> double& { return c.train.grad_clip; })},
      {"train.warmup_steps", number<int>([](RunConfig& c) -> int& { return c.train.warmup_steps; })},
      {"train.min_lr_ratio", number<double>([](RunConfig& c) -> double& { return c.train.min_lr_ratio; })},
      {"train.adam_beta1", number<double>([](RunConfig& c) -> double& { return c.train.adam_beta1; })},
      {"train.adam_beta2", number<double>([](RunConfig& c) -> double& { return c.train.adam_beta2; })},
      {"train.adam_eps", number<double>([](RunConfig& c) -> double& { return c.train.adam_eps; })},
      {"train.weight_decay", number<double>([](RunConfig& c) -> double& { return c.train.weight_decay; })},
      {"train.checkpoint_every", number<int>([](RunConfig& c) -> int& { return c.train.checkpoint_every; })},
      {"train.checkpoint_dir",
       [](RunConfig& c, std::string_view, std::string_view v) { c.train.checkpoint_dir = std::string(v); }},
      {"decode.max_new_tokens", number<int>([](RunConfig& c) -> int& { return c.decode.max_new_tokens; })},
      {"decode.temperature", number<double>([](RunConfig& c) -> double& { return c.decode.temperature; })},
      {"decode.router_threshold",
       number<double>([](RunConfig& c) -> double& { return c.decode.router_threshold; })},
      {"decode.mode",
       [](RunConfig& c, std::string_view key, std::string_view v) {
         if (v == "greedy") {
           c.decode.mode = DecodeConfig::Mode::kGreedy;
         } else if (v == "sampled") {
           c.decode.mode = DecodeConfig::Mode::kSampled;
         } else {
           throw InvalidConfig("bad value '" + std::string(v) + "' for " + std::string(key) +
                               " (expected greedy or sampled)");
         }
       }},
      // One seed drives corpus generation, initialization, batching and sampling.
      {"seed",
       [](RunConfig& c, std::string_view key, std::string_view v) {
         const auto s = parse_number<std::uint64_t>(key, v);
         c.synth.seed = c.train.seed = c.train.model.seed = c.decode.seed = s;
       }},
  };
  return table;
}

}  // namespace

RunConfig::RunConfig() {
  synth.n_examples = 2000;
}

void RunConfig::set(std::string_view key, std::string_view value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw InvalidConfig("unknown config key '" + std::string(key) + "'");
  it->second(*this, key, trim(value));
}

void RunConfig::validate() const {
  train.validate();
  decode.validate();
  if (heldout < 0) throw InvalidConfig("synth.heldout must be nonnegative");
  if (synth.n_docs > train.model.max_citations) {
    throw InvalidConfig("synth.n_docs " + std::to_string(synth.n_docs) + " exceeds the limit of " +
                        std::to_string(train.model.max_citations) + " reserved citation tokens");
  }
}

nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["synth"] = {{"seed", c.synth.seed},
                {"n_examples", c.synth.n_examples},
                {"n_docs", c.synth.n_docs},
                {"facts_per_doc", c.synth.facts_per_doc},
                {"max_answers", c.synth.max_answers},
                {"heldout", c.heldout}};
  j["train"] = to_json(c.train);
  j["decode"] = {{"max_new_tokens", c.decode.max_new_tokens},
                 {"mode", c.decode.mode == DecodeConfig::Mode::kGreedy ? "greedy" : "sampled"},
                 {"seed", c.decode.seed},
                 {"temperature", c.decode.temperature},
                 {"router_threshold", c.decode.router_threshold}};
  return j;
}

ConfigValues parse_config(std::string_view text) {
  ConfigValues out;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(line_no, "unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(line_no, "expected key = value");
    const std::string_view key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError(line_no, "empty key");
    out[section.empty() ? std::string(key) : section + "." + std::string(key)] =
        std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

ConfigValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidConfig("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void apply_config(RunConfig& config, const ConfigValues& values) {
  for (const auto& [key, value] : values) config.set(key, value);
}

}  // namespace citelm
