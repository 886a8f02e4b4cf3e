#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "citelm/corpus.hpp"
#include "citelm/decoder.hpp"
#include "citelm/trainer.hpp"

namespace citelm {

// Everything a command can be configured with. Keys are dotted, e.g.
// "train.learning_rate", "model.hidden_size", "synth.n_docs".
struct RunConfig {
  SynthOptions synth;
  TrainConfig train;
  DecodeConfig decode;
  int heldout = 200;  // trailing examples of a generated corpus kept for evaluation

  RunConfig();
  // Sets one key from its text form; unknown keys and unparsable values
  // raise InvalidConfig.
  void set(std::string_view key, std::string_view value);
  void validate() const;
};

nlohmann::ordered_json to_json(const RunConfig& config);

using ConfigValues = std::map<std::string, std::string>;

// Reads `key = value` lines. `[section]` prefixes later keys with
// "section."; `#` starts a comment; blank lines are ignored.
ConfigValues parse_config(std::string_view text);
ConfigValues read_config_file(const std::filesystem::path& path);

void apply_config(RunConfig& config, const ConfigValues& values);

}  // namespace citelm
