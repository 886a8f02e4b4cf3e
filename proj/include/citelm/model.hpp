#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "citelm/errors.hpp"
#include "citelm/vocab.hpp"

namespace citelm {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

struct BackboneConfig {
  int vocab_size = 512;
  int hidden_size = 64;
  int n_layers = 2;
  int n_heads = 4;
  int max_seq_len = 512;
  int max_citations = 8;
  int ffn_multiplier = 4;
  double init_std = 0.1;
  std::uint64_t seed = 0;

  int head_dim() const { return hidden_size / n_heads; }
  int ffn_size() const { return ffn_multiplier * hidden_size; }
  Vocabulary vocabulary() const { return Vocabulary(vocab_size, max_citations); }

  void validate() const {
    if (vocab_size <= 0 || hidden_size <= 0 || n_layers < 0 || n_heads <= 0 || max_seq_len <= 0 ||
        max_citations <= 0 || ffn_multiplier <= 0) {
      throw InvalidConfig("backbone dimensions must be positive");
    }
    if (hidden_size % n_heads != 0) {
      throw InvalidConfig("hidden_size " + std::to_string(hidden_size) + " not divisible by n_heads " +
                          std::to_string(n_heads));
    }
    (void)vocabulary();
  }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

inline nlohmann::ordered_json to_json(const BackboneConfig& c) {
  return {{"vocab_size", c.vocab_size},   {"hidden_size", c.hidden_size},
          {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
          {"max_seq_len", c.max_seq_len}, {"max_citations", c.max_citations},
          {"ffn_multiplier", c.ffn_multiplier}, {"init_std", c.init_std},
          {"seed", c.seed}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::ordered_json& j) {
  BackboneConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.hidden_size = j.at("hidden_size").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.max_citations = j.at("max_citations").get<int>();
  c.ffn_multiplier = j.at("ffn_multiplier").get<int>();
  c.init_std = j.at("init_std").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

template <typename Scalar>
struct LayerParams {
  Matrix<Scalar> ln1_gain, ln1_bias;
  Matrix<Scalar> wq, wk, wv, wo;  // H x H, applied as x * W
  Matrix<Scalar> ln2_gain, ln2_bias;
  Matrix<Scalar> w1, b1;  // H x F, 1 x F
  Matrix<Scalar> w2, b2;  // F x H, 1 x H
};

// All trainable parameters: the decoder stack plus the vocabulary head, the
// 2 x H router matrix and the H x H (+ bias) citation-space map. Row-vector
// convention throughout: activations are (positions x H).
template <typename Scalar>
struct ModelState {
  BackboneConfig config;
  Matrix<Scalar> token_embedding;     // V x H
  Matrix<Scalar> position_embedding;  // P x H
  std::vector<LayerParams<Scalar>> layers;
  Matrix<Scalar> lm_weight, lm_bias;  // H x V, 1 x V
  Matrix<Scalar> router_weight;       // 2 x H
  Matrix<Scalar> align_weight;        // H x H
  Matrix<Scalar> align_bias;          // 1 x H

  using Tensor = std::pair<std::string, Matrix<Scalar>*>;
  using ConstTensor = std::pair<std::string, const Matrix<Scalar>*>;

  // Stable (name, tensor) enumeration; defines checkpoint order.
  std::vector<Tensor> tensors() {
    std::vector<Tensor> out;
    out.emplace_back("embedding.token", &token_embedding);
    out.emplace_back("embedding.position", &position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      LayerParams<Scalar>& L = layers[l];
      out.emplace_back(p + "ln1.gain", &L.ln1_gain);
      out.emplace_back(p + "ln1.bias", &L.ln1_bias);
      out.emplace_back(p + "attn.wq", &L.wq);
      out.emplace_back(p + "attn.wk", &L.wk);
      out.emplace_back(p + "attn.wv", &L.wv);
      out.emplace_back(p + "attn.wo", &L.wo);
      out.emplace_back(p + "ln2.gain", &L.ln2_gain);
      out.emplace_back(p + "ln2.bias", &L.ln2_bias);
      out.emplace_back(p + "mlp.w1", &L.w1);
      out.emplace_back(p + "mlp.b1", &L.b1);
      out.emplace_back(p + "mlp.w2", &L.w2);
      out.emplace_back(p + "mlp.b2", &L.b2);
    }
    out.emplace_back("lm_head.weight", &lm_weight);
    out.emplace_back("lm_head.bias", &lm_bias);
    out.emplace_back("router.weight", &router_weight);
    out.emplace_back("align.weight", &align_weight);
    out.emplace_back("align.bias", &align_bias);
    return out;
  }

  std::vector<ConstTensor> tensors() const {
    std::vector<ConstTensor> out;
    for (auto& [name, m] : const_cast<ModelState*>(this)->tensors()) out.emplace_back(name, m);
    return out;
  }

  Matrix<Scalar>* find(const std::string& name) {
    for (auto& [n, m] : tensors()) {
      if (n == name) return m;
    }
    return nullptr;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : tensors()) n += static_cast<std::size_t>(m->size());
    return n;
  }

  // Same shapes, all zeros.
  static ModelState zeros(const BackboneConfig& config) {
    config.validate();
    const int H = config.hidden_size, V = config.vocab_size, F = config.ffn_size();
    ModelState s;
    s.config = config;
    s.token_embedding = Matrix<Scalar>::Zero(V, H);
    s.position_embedding = Matrix<Scalar>::Zero(config.max_seq_len, H);
    s.layers.resize(static_cast<std::size_t>(config.n_layers));
    for (LayerParams<Scalar>& L : s.layers) {
      L.ln1_gain = Matrix<Scalar>::Zero(1, H);
      L.ln1_bias = Matrix<Scalar>::Zero(1, H);
      L.wq = Matrix<Scalar>::Zero(H, H);
      L.wk = Matrix<Scalar>::Zero(H, H);
      L.wv = Matrix<Scalar>::Zero(H, H);
      L.wo = Matrix<Scalar>::Zero(H, H);
      L.ln2_gain = Matrix<Scalar>::Zero(1, H);
      L.ln2_bias = Matrix<Scalar>::Zero(1, H);
      L.w1 = Matrix<Scalar>::Zero(H, F);
      L.b1 = Matrix<Scalar>::Zero(1, F);
      L.w2 = Matrix<Scalar>::Zero(F, H);
      L.b2 = Matrix<Scalar>::Zero(1, H);
    }
    s.lm_weight = Matrix<Scalar>::Zero(H, V);
    s.lm_bias = Matrix<Scalar>::Zero(1, V);
    s.router_weight = Matrix<Scalar>::Zero(2, H);
    s.align_weight = Matrix<Scalar>::Zero(H, H);
    s.align_bias = Matrix<Scalar>::Zero(1, H);
    return s;
  }

  // Gaussian weights (std = init_std), unit layer-norm gains, zero biases.
  static ModelState initialize(const BackboneConfig& config) {
    ModelState s = zeros(config);
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, config.init_std);
    for (auto& [name, m] : s.tensors()) {
      const bool is_gain = name.ends_with(".gain");
      const bool is_bias = name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2");
      if (is_gain) {
        m->setOnes();
      } else if (!is_bias) {
        for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = static_cast<Scalar>(normal(rng));
      }
    }
    return s;
  }

  void set_zero() {
    for (auto& [name, m] : tensors()) m->setZero();
  }

  template <typename Other>
  ModelState<Other> cast() const {
    ModelState<Other> out = ModelState<Other>::zeros(config);
    auto src = tensors();
    auto dst = out.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<Other>();
    return out;
  }
};

// Closed-form parameter count for a config, independent of any instance.
inline std::size_t parameter_count(const BackboneConfig& c) {
  const std::size_t H = static_cast<std::size_t>(c.hidden_size);
  const std::size_t V = static_cast<std::size_t>(c.vocab_size);
  const std::size_t P = static_cast<std::size_t>(c.max_seq_len);
  const std::size_t F = static_cast<std::size_t>(c.ffn_size());
  const std::size_t per_layer = 4 * H + 4 * H * H + H * F + F + F * H + H;
  return V * H + P * H + static_cast<std::size_t>(c.n_layers) * per_layer + H * V + V + 2 * H +
         H * H + H;
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   "CITELMCK" | u32 version | u32 json_len | config json
//   u32 n_tensors, then per tensor:
//   u32 name_len | name | u32 rows | u32 cols | u8 bytes_per_scalar | data
//
// Data is row-major, little-endian, float32 or float64 as declared.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'C', 'I', 'T', 'E', 'L', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError("truncated checkpoint");
  return v;
}

}  // namespace detail

// `training` (optional) is stored beside the backbone config under the
// "training" key, e.g. the ablation flags a decoder must honour.
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ModelState<Scalar>& state,
                     const nlohmann::ordered_json& training = nullptr) {
  static_assert(sizeof(Scalar) == 4 || sizeof(Scalar) == 8);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(out, kCheckpointVersion);
  nlohmann::ordered_json header = to_json(state.config);
  if (!training.is_null()) header["training"] = training;
  const std::string cfg = header.dump();
  detail::write_pod(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto tensors = state.tensors();
  detail::write_pod(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    detail::write_pod(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(out, static_cast<std::uint32_t>(m->rows()));
    detail::write_pod(out, static_cast<std::uint32_t>(m->cols()));
    detail::write_pod(out, static_cast<std::uint8_t>(sizeof(Scalar)));
    out.write(reinterpret_cast<const char*>(m->data()),
              static_cast<std::streamsize>(sizeof(Scalar) * static_cast<std::size_t>(m->size())));
  }
  if (!out) throw CheckpointError("failed writing " + path.string());
}

namespace detail {

inline nlohmann::ordered_json read_header(std::istream& in, const std::filesystem::path& path) {
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  std::string cfg(read_pod<std::uint32_t>(in), '\0');
  in.read(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  if (!in) throw CheckpointError("truncated checkpoint");
  try {
    return nlohmann::ordered_json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
  }
}

}  // namespace detail

// The config JSON of a checkpoint, including any "training" metadata.
inline nlohmann::ordered_json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return detail::read_header(in, path);
}

template <typename Scalar>
ModelState<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  BackboneConfig config;
  try {
    config = backbone_config_from_json(detail::read_header(in, path));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
  }
  ModelState<Scalar> state = ModelState<Scalar>::zeros(config);
  auto tensors = state.tensors();
  const auto count = detail::read_pod<std::uint32_t>(in);
  if (count != tensors.size()) throw CheckpointError("tensor count mismatch");
  for (auto& [expected, m] : tensors) {
    std::string name(detail::read_pod<std::uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rows = detail::read_pod<std::uint32_t>(in);
    const auto cols = detail::read_pod<std::uint32_t>(in);
    const auto width = detail::read_pod<std::uint8_t>(in);
    if (name != expected || rows != m->rows() || cols != m->cols()) {
      throw CheckpointError("unexpected tensor '" + name + "' (wanted '" + expected + "')");
    }
    const auto n = static_cast<std::size_t>(rows) * cols;
    if (width == 8) {
      std::vector<double> buf(n);
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 8));
      for (std::size_t i = 0; i < n; ++i) m->data()[i] = static_cast<Scalar>(buf[i]);
    } else if (width == 4) {
      std::vector<float> buf(n);
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
      for (std::size_t i = 0; i < n; ++i) m->data()[i] = static_cast<Scalar>(buf[i]);
    } else {
      throw CheckpointError("unsupported precision width " + std::to_string(width));
    }
    if (!in) throw CheckpointError("truncated checkpoint");
  }
  return state;
}

}  // namespace citelm
