#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "citelm/corpus.hpp"
#include "citelm/model.hpp"

namespace citelm::testing {

// Two layers, H = 16: small enough for finite differences.
inline BackboneConfig small_config(std::uint64_t seed = 0) {
  BackboneConfig c;
  c.hidden_size = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 96;
  c.seed = seed;
  return c;
}

// Parameters large enough that every loss term has curvature well above
// double round-off, so central differences resolve it.
inline ModelState<double> probe_state(std::uint64_t seed = 0) {
  BackboneConfig c = small_config(seed);
  c.init_std = 0.25;
  ModelState<double> s = ModelState<double>::initialize(c);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < s.token_embedding.size(); ++i) s.token_embedding.data()[i] = normal(rng);
  for (auto& [name, m] : s.tensors()) {
    if (name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2")) {
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = 0.1 * normal(rng);
    }
  }
  return s;
}

inline Example small_example(const Vocabulary& vocab, std::uint64_t seed = 0) {
  SynthOptions o;
  o.seed = seed;
  o.n_examples = 1;
  return generate_synthetic_corpus(o, vocab).front();
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("citelm_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace citelm::testing
