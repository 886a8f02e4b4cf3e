#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "citelm/errors.hpp"
#include "citelm/model.hpp"

namespace citelm {

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise layer norm. Keeps the normalized input and the inverse std for
// the backward pass.
template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> xhat;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd;
};

template <typename Scalar>
Matrix<Scalar> layer_norm(const Matrix<Scalar>& x, const Matrix<Scalar>& gain,
                          const Matrix<Scalar>& bias, LayerNormCache<Scalar>& cache) {
  const Eigen::Index L = x.rows(), H = x.cols();
  cache.xhat.resize(L, H);
  cache.rstd.resize(L);
  for (Eigen::Index t = 0; t < L; ++t) {
    const Scalar mean = x.row(t).mean();
    const Scalar var = (x.row(t).array() - mean).square().mean();
    const Scalar rstd = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
    cache.rstd(t) = rstd;
    cache.xhat.row(t) = (x.row(t).array() - mean) * rstd;
  }
  Matrix<Scalar> y = cache.xhat.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  return y;
}

// Returns dL/dx and accumulates the gain/bias gradients.
template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const Matrix<Scalar>& dy, const Matrix<Scalar>& gain,
                                   const LayerNormCache<Scalar>& cache, Matrix<Scalar>& d_gain,
                                   Matrix<Scalar>& d_bias) {
  d_gain.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  d_bias.row(0) += dy.colwise().sum();
  Matrix<Scalar> dxhat = dy.array().rowwise() * gain.row(0).array();
  Matrix<Scalar> dx(dy.rows(), dy.cols());
  for (Eigen::Index t = 0; t < dy.rows(); ++t) {
    const Scalar m1 = dxhat.row(t).mean();
    const Scalar m2 = (dxhat.row(t).array() * cache.xhat.row(t).array()).mean();
    dx.row(t) = cache.rstd(t) * (dxhat.row(t).array() - m1 - cache.xhat.row(t).array() * m2);
  }
  return dx;
}

// tanh-approximated GELU.
template <typename Scalar>
Scalar gelu(Scalar u) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return Scalar(0.5) * u * (Scalar(1) + std::tanh(Scalar(k) * (u + Scalar(0.044715) * u * u * u)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar u) {
  constexpr double k = 0.7978845608028654;
  const Scalar th = std::tanh(Scalar(k) * (u + Scalar(0.044715) * u * u * u));
  return Scalar(0.5) * (Scalar(1) + th) +
         Scalar(0.5) * u * (Scalar(1) - th * th) * Scalar(k) * (Scalar(1) + Scalar(3 * 0.044715) * u * u);
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits) {
  Matrix<Scalar> p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Scalar m = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

template <typename Scalar>
struct LayerCache {
  Matrix<Scalar> input;
  LayerNormCache<Scalar> ln1;
  Matrix<Scalar> ln1_out, q, k, v;
  std::vector<Matrix<Scalar>> probs;  // per head, L x L (upper triangle zero)
  Matrix<Scalar> attn_out;            // concatenated heads before wo
  Matrix<Scalar> mid;                 // residual after attention
  LayerNormCache<Scalar> ln2;
  Matrix<Scalar> ln2_out, pre_act, act;
};

// Everything the heads and losses read from one forward pass.
template <typename Scalar>
struct ForwardTrace {
  Matrix<Scalar> inputs;     // e_t as supplied (before position embeddings)
  Matrix<Scalar> hidden;     // h_t, last-layer residual stream
  Matrix<Scalar> queries;    // last-layer Q_t, head h in columns [h*d, (h+1)*d)
  Matrix<Scalar> keys;       // last-layer K_t
  Matrix<Scalar> logits;     // vocabulary logits
  Matrix<Scalar> attention;  // last-layer softmax weights averaged over heads
  std::vector<LayerCache<Scalar>> cache;
  int n_heads = 1;

  Eigen::Index length() const { return inputs.rows(); }
};

// Plain table lookup.
template <typename Scalar>
Matrix<Scalar> embed(const ModelState<Scalar>& state, std::span<const TokenId> ids) {
  Matrix<Scalar> out(static_cast<Eigen::Index>(ids.size()), state.config.hidden_size);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= state.config.vocab_size) {
      throw UnknownToken("token id " + std::to_string(ids[t]) + " outside vocabulary of " +
                         std::to_string(state.config.vocab_size));
    }
    out.row(static_cast<Eigen::Index>(t)) = state.token_embedding.row(ids[t]);
  }
  return out;
}

// Gradient of embed: scatter-add rows into the table gradient.
template <typename Scalar>
void embed_backward(std::span<const TokenId> ids, const Matrix<Scalar>& d_out,
                    ModelState<Scalar>& grad) {
  for (std::size_t t = 0; t < ids.size(); ++t) {
    grad.token_embedding.row(ids[t]) += d_out.row(static_cast<Eigen::Index>(t));
  }
}

// Pre-norm causal decoder stack over already-embedded inputs. Learned
// absolute positions are added here, after any citation splicing.
template <typename Scalar>
ForwardTrace<Scalar> forward(const ModelState<Scalar>& state, const Matrix<Scalar>& embeddings) {
  const BackboneConfig& cfg = state.config;
  const Eigen::Index L = embeddings.rows();
  const int H = cfg.hidden_size, nh = cfg.n_heads, d = cfg.head_dim();
  if (L > cfg.max_seq_len) {
    throw SequenceTooLong("sequence of " + std::to_string(L) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
  }
  if (embeddings.cols() != H) throw LengthMismatch("embedding width != hidden_size");

  ForwardTrace<Scalar> tr;
  tr.n_heads = nh;
  tr.inputs = embeddings;
  Matrix<Scalar> x = embeddings + state.position_embedding.topRows(L);
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(d));

  tr.cache.resize(state.layers.size());
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    const LayerParams<Scalar>& P = state.layers[l];
    LayerCache<Scalar>& c = tr.cache[l];
    c.input = x;
    c.ln1_out = layer_norm(x, P.ln1_gain, P.ln1_bias, c.ln1);
    c.q = c.ln1_out * P.wq;
    c.k = c.ln1_out * P.wk;
    c.v = c.ln1_out * P.wv;
    c.attn_out.resize(L, H);
    c.probs.assign(static_cast<std::size_t>(nh), Matrix<Scalar>::Zero(L, L));
    for (int h = 0; h < nh; ++h) {
      Matrix<Scalar> scores = (c.q.middleCols(h * d, d) * c.k.middleCols(h * d, d).transpose()) * scale;
      Matrix<Scalar>& p = c.probs[static_cast<std::size_t>(h)];
      for (Eigen::Index i = 0; i < L; ++i) {
        const Scalar m = scores.row(i).head(i + 1).maxCoeff();
        p.row(i).head(i + 1) = (scores.row(i).head(i + 1).array() - m).exp();
        p.row(i).head(i + 1) /= p.row(i).head(i + 1).sum();
      }
      c.attn_out.middleCols(h * d, d) = p * c.v.middleCols(h * d, d);
    }
    c.mid = x + c.attn_out * P.wo;
    c.ln2_out = layer_norm(c.mid, P.ln2_gain, P.ln2_bias, c.ln2);
    c.pre_act = c.ln2_out * P.w1;
    c.pre_act.rowwise() += P.b1.row(0);
    c.act = c.pre_act.unaryExpr([](Scalar u) { return gelu(u); });
    x = c.mid + c.act * P.w2;
    x.rowwise() += P.b2.row(0);
  }
  tr.hidden = x;
  tr.logits = tr.hidden * state.lm_weight;
  tr.logits.rowwise() += state.lm_bias.row(0);
  if (!tr.cache.empty()) {
    const LayerCache<Scalar>& last = tr.cache.back();
    tr.queries = last.q;
    tr.keys = last.k;
    tr.attention = Matrix<Scalar>::Zero(L, L);
    for (const Matrix<Scalar>& p : last.probs) tr.attention += p;
    tr.attention /= Scalar(nh);
  }
  return tr;
}

// Upstream gradients into a ForwardTrace. Empty matrices mean "no gradient".
template <typename Scalar>
struct TraceGradient {
  Matrix<Scalar> hidden;
  Matrix<Scalar> logits;
  Matrix<Scalar> queries;
  Matrix<Scalar> keys;
};

// Backpropagates through the stack, accumulating parameter gradients into
// `grad` and returning dL/d(embeddings).
template <typename Scalar>
Matrix<Scalar> backward(const ModelState<Scalar>& state, const ForwardTrace<Scalar>& tr,
                        const TraceGradient<Scalar>& upstream, ModelState<Scalar>& grad) {
  const BackboneConfig& cfg = state.config;
  const Eigen::Index L = tr.length();
  const int H = cfg.hidden_size, nh = cfg.n_heads, d = cfg.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(d));

  Matrix<Scalar> dx = upstream.hidden.size() ? upstream.hidden : Matrix<Scalar>::Zero(L, H);
  if (upstream.logits.size()) {
    grad.lm_weight.noalias() += tr.hidden.transpose() * upstream.logits;
    grad.lm_bias.row(0) += upstream.logits.colwise().sum();
    dx.noalias() += upstream.logits * state.lm_weight.transpose();
  }

  for (std::size_t li = state.layers.size(); li-- > 0;) {
    const LayerParams<Scalar>& P = state.layers[li];
    LayerParams<Scalar>& G = grad.layers[li];
    const LayerCache<Scalar>& c = tr.cache[li];

    // feed-forward block
    G.w2.noalias() += c.act.transpose() * dx;
    G.b2.row(0) += dx.colwise().sum();
    Matrix<Scalar> d_act = dx * P.w2.transpose();
    Matrix<Scalar> d_pre = d_act.array() * c.pre_act.unaryExpr([](Scalar u) { return gelu_derivative(u); }).array();
    G.w1.noalias() += c.ln2_out.transpose() * d_pre;
    G.b1.row(0) += d_pre.colwise().sum();
    Matrix<Scalar> d_ln2 = d_pre * P.w1.transpose();
    Matrix<Scalar> d_mid = dx + layer_norm_backward(d_ln2, P.ln2_gain, c.ln2, G.ln2_gain, G.ln2_bias);

    // attention block
    G.wo.noalias() += c.attn_out.transpose() * d_mid;
    Matrix<Scalar> d_attn = d_mid * P.wo.transpose();
    Matrix<Scalar> dq = Matrix<Scalar>::Zero(L, H), dk = Matrix<Scalar>::Zero(L, H),
                   dv = Matrix<Scalar>::Zero(L, H);
    for (int h = 0; h < nh; ++h) {
      const Matrix<Scalar>& p = c.probs[static_cast<std::size_t>(h)];
      const Matrix<Scalar> d_out = d_attn.middleCols(h * d, d);
      Matrix<Scalar> dp = d_out * c.v.middleCols(h * d, d).transpose();
      dv.middleCols(h * d, d).noalias() += p.transpose() * d_out;
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_dot = (p.array() * dp.array()).rowwise().sum();
      Matrix<Scalar> ds = p.array() * (dp.colwise() - row_dot).array();
      dq.middleCols(h * d, d).noalias() += (ds * c.k.middleCols(h * d, d)) * scale;
      dk.middleCols(h * d, d).noalias() += (ds.transpose() * c.q.middleCols(h * d, d)) * scale;
    }
    if (li + 1 == state.layers.size()) {
      if (upstream.queries.size()) dq += upstream.queries;
      if (upstream.keys.size()) dk += upstream.keys;
    }
    G.wq.noalias() += c.ln1_out.transpose() * dq;
    G.wk.noalias() += c.ln1_out.transpose() * dk;
    G.wv.noalias() += c.ln1_out.transpose() * dv;
    Matrix<Scalar> d_ln1 = dq * P.wq.transpose();
    d_ln1.noalias() += dk * P.wk.transpose();
    d_ln1.noalias() += dv * P.wv.transpose();
    dx = d_mid + layer_norm_backward(d_ln1, P.ln1_gain, c.ln1, G.ln1_gain, G.ln1_bias);
  }
  grad.position_embedding.topRows(L) += dx;
  return dx;
}

}  // namespace citelm
