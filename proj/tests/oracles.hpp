// Independent loop-based references used by the unit and acceptance suites.
// Everything here is deliberately written against the mathematical
// definitions with plain index loops, sharing no code with the tape path.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "dcp/encoder.hpp"
#include "dcp/tensor.hpp"

namespace oracle {

// C = A(m x k) * B(k x n), naive triple loop.
inline std::vector<double> matmul_ref(const std::vector<double>& a, const std::vector<double>& b,
                                      std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t kk = 0; kk < k; ++kk) c[i * n + j] += a[i * k + kk] * b[kk * n + j];
  return c;
}

inline std::vector<long double> softmax_row_ld(const std::vector<long double>& x) {
  long double mx = x[0];
  for (long double v : x) mx = std::max(mx, v);
  std::vector<long double> out(x.size());
  long double sum = 0.0L;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    sum += out[i];
  }
  for (long double& v : out) v /= sum;
  return out;
}

inline long double gelu_ld(long double x) {
  return 0.5L * x * (1.0L + std::erf(x / std::sqrt(2.0L)));
}

// Mean over rows of -log softmax(logits)[label], extended precision.
inline long double cross_entropy_ld(const std::vector<double>& logits,
                                    const std::vector<std::size_t>& labels, std::size_t b,
                                    std::size_t k) {
  long double total = 0.0L;
  for (std::size_t i = 0; i < b; ++i) {
    long double mx = logits[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, (long double)logits[i * k + j]);
    long double sum = 0.0L;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp((long double)logits[i * k + j] - mx);
    total += mx + std::log(sum) - (long double)logits[i * k + labels[i]];
  }
  return total / (long double)b;
}

// Row-wise softmax in double, max-subtracted.
inline std::vector<double> softmax_rows_ref(const std::vector<double>& x, std::size_t m,
                                            std::size_t n) {
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = x[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(x[i * n + j] - mx);
      sum += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
  }
  return out;
}

inline std::vector<double> layer_norm_ref(const std::vector<double>& x,
                                          const std::vector<double>& gain,
                                          const std::vector<double>& bias, std::size_t rows,
                                          std::size_t d, double eps) {
  std::vector<double> out(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[r * d + j];
    mu /= (double)d;
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[r * d + j] - mu) * (x[r * d + j] - mu);
    var /= (double)d;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j)
      out[r * d + j] = gain[j] * (x[r * d + j] - mu) * inv + bias[j];
  }
  return out;
}

// Single-head scaled dot-product attention over full matrices:
// softmax(Q K^T / sqrt(d) + mask) V, mask optional (t x t).
inline std::vector<double> single_head_attention_ref(const std::vector<double>& q,
                                                     const std::vector<double>& k,
                                                     const std::vector<double>& v, std::size_t t,
                                                     std::size_t d,
                                                     const std::vector<double>* mask) {
  std::vector<double> scores(t * t, 0.0);
  const double scale = 1.0 / std::sqrt((double)d);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < d; ++kk) acc += q[i * d + kk] * k[j * d + kk];
      scores[i * t + j] = acc * scale + (mask ? (*mask)[i * t + j] : 0.0);
    }
  const std::vector<double> attn = softmax_rows_ref(scores, t, t);
  std::vector<double> out(t * d, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j)
      for (std::size_t kk = 0; kk < d; ++kk) out[i * d + kk] += attn[i * t + j] * v[j * d + kk];
  return out;
}

// The bare cross-modal prompt update per modality pair, multi-head over
// column blocks, no learned projections:
// next = concat_h softmax(Q_h K_h^T / sqrt(d/h)) V_h with Q from the other
// modality and K = V = the modality being updated.
inline std::vector<double> cmpa_bare_ref(const std::vector<double>& query_side,
                                         const std::vector<double>& kv_side, std::size_t m,
                                         std::size_t d, std::size_t heads) {
  const std::size_t dk = d / heads;
  std::vector<double> out(m * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<double> scores(m * m, 0.0);
    const double scale = 1.0 / std::sqrt((double)dk);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t kk = 0; kk < dk; ++kk)
          acc += query_side[i * d + h * dk + kk] * kv_side[j * d + h * dk + kk];
        scores[i * m + j] = acc * scale;
      }
    const std::vector<double> attn = softmax_rows_ref(scores, m, m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t kk = 0; kk < dk; ++kk)
          out[i * d + h * dk + kk] += attn[i * m + j] * kv_side[j * d + h * dk + kk];
  }
  return out;
}

// ---- full encoder forward, layer by layer -----------------------------------

namespace detail {

inline std::vector<double> linear_bias_ref(const std::vector<double>& x,
                                           const std::vector<double>& w,
                                           const std::vector<double>& b, std::size_t t,
                                           std::size_t din, std::size_t dout) {
  std::vector<double> out = matmul_ref(x, w, t, din, dout);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < dout; ++j) out[i * dout + j] += b[j];
  return out;
}

inline std::vector<double> block_ref(const dcp::LayerParams& lp, std::vector<double> x,
                                     std::size_t t, std::size_t d, std::size_t heads,
                                     const std::vector<double>* mask, double eps) {
  const std::size_t dh = d / heads;
  const std::vector<double> h =
      layer_norm_ref(x, lp.ln1_gain.values(), lp.ln1_bias.values(), t, d, eps);
  const std::vector<double> q = linear_bias_ref(h, lp.attn.wq.values(), lp.attn.bq.values(), t, d, d);
  const std::vector<double> k = linear_bias_ref(h, lp.attn.wk.values(), lp.attn.bk.values(), t, d, d);
  const std::vector<double> v = linear_bias_ref(h, lp.attn.wv.values(), lp.attn.bv.values(), t, d, d);
  std::vector<double> cat(t * d, 0.0);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    std::vector<double> qh(t * dh), kh(t * dh), vh(t * dh);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < dh; ++j) {
        qh[i * dh + j] = q[i * d + hd * dh + j];
        kh[i * dh + j] = k[i * d + hd * dh + j];
        vh[i * dh + j] = v[i * d + hd * dh + j];
      }
    const std::vector<double> oh = single_head_attention_ref(qh, kh, vh, t, dh, mask);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < dh; ++j) cat[i * d + hd * dh + j] = oh[i * dh + j];
  }
  const std::vector<double> attn_out =
      linear_bias_ref(cat, lp.attn.wo.values(), lp.attn.bo.values(), t, d, d);
  for (std::size_t i = 0; i < t * d; ++i) x[i] += attn_out[i];

  const std::vector<double> h2 =
      layer_norm_ref(x, lp.ln2_gain.values(), lp.ln2_bias.values(), t, d, eps);
  const std::size_t f = lp.ffn_w1.shape[1];
  std::vector<double> mid = linear_bias_ref(h2, lp.ffn_w1.values(), lp.ffn_b1.values(), t, d, f);
  for (double& u : mid) u = (double)gelu_ld((long double)u);
  const std::vector<double> mlp_out =
      linear_bias_ref(mid, lp.ffn_w2.values(), lp.ffn_b2.values(), t, f, d);
  for (std::size_t i = 0; i < t * d; ++i) x[i] += mlp_out[i];
  return x;
}

}  // namespace detail

/// Layer-by-layer vision forward mirroring the production layout:
/// [class token, prompts, embedded patches], positions bound to the class
/// token and patches in prompt-free order (prompt rows get none), prompt rows
/// replaced ahead of each prompted block, class-token readout through the
/// final norm and projection.
inline std::vector<double> encode_image_ref(const dcp::EncoderParams& p,
                                            const std::vector<double>& patches, std::size_t n_patch,
                                            const std::vector<std::vector<double>>& prompts,
                                            std::size_t m) {
  const dcp::EncoderConfig& c = p.config;
  const std::size_t d = c.model_dim;
  const std::size_t t = 1 + m + n_patch;
  const std::vector<double> embedded = detail::linear_bias_ref(
      patches, p.patch_proj.values(), p.patch_bias.values(), n_patch, c.patch_dim, d);
  std::vector<double> x(t * d);
  for (std::size_t j = 0; j < d; ++j) x[j] = p.class_token.values()[j] + p.pos_embed.values()[j];
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) x[(1 + i) * d + j] = prompts[0][i * d + j];
  for (std::size_t i = 0; i < n_patch; ++i)
    for (std::size_t j = 0; j < d; ++j)
      x[(1 + m + i) * d + j] = embedded[i * d + j] + p.pos_embed.values()[(1 + i) * d + j];

  for (std::size_t layer = 0; layer < c.n_layers; ++layer) {
    if (layer > 0 && layer < prompts.size())
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) x[(1 + i) * d + j] = prompts[layer][i * d + j];
    x = detail::block_ref(p.layers[layer], std::move(x), t, d, c.n_heads, nullptr, c.ln_eps);
  }
  const std::vector<double> normed =
      layer_norm_ref(x, p.final_ln_gain.values(), p.final_ln_bias.values(), t, d, c.ln_eps);
  std::vector<double> readout(normed.begin(), normed.begin() + d);
  return matmul_ref(readout, p.output_proj.values(), 1, d, c.embed_dim);
}

/// Layer-by-layer text forward: [start, prompts, word ids, end] under a
/// causal mask, positions bound to the ordinary tokens in prompt-free order,
/// end-sentinel readout.
inline std::vector<double> encode_text_ref(const dcp::EncoderParams& p,
                                           const std::vector<std::size_t>& ids,
                                           const std::vector<std::vector<double>>& prompts,
                                           std::size_t m) {
  const dcp::EncoderConfig& c = p.config;
  const std::size_t d = c.model_dim;
  const std::size_t t = 2 + m + ids.size();
  const auto& table = p.token_table.values();
  const auto& pos = p.pos_embed.values();
  std::vector<double> x(t * d);
  for (std::size_t j = 0; j < d; ++j) x[j] = table[dcp::kStartToken * d + j] + pos[j];
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) x[(1 + i) * d + j] = prompts[0][i * d + j];
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      x[(1 + m + i) * d + j] = table[ids[i] * d + j] + pos[(1 + i) * d + j];
  for (std::size_t j = 0; j < d; ++j)
    x[(t - 1) * d + j] = table[dcp::kEndToken * d + j] + pos[(1 + ids.size()) * d + j];

  std::vector<double> mask(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) mask[i * t + j] = -1e9;

  for (std::size_t layer = 0; layer < c.n_layers; ++layer) {
    if (layer > 0 && layer < prompts.size())
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) x[(1 + i) * d + j] = prompts[layer][i * d + j];
    x = detail::block_ref(p.layers[layer], std::move(x), t, d, c.n_heads, &mask, c.ln_eps);
  }
  const std::vector<double> normed =
      layer_norm_ref(x, p.final_ln_gain.values(), p.final_ln_bias.values(), t, d, c.ln_eps);
  std::vector<double> readout(normed.begin() + (t - 1) * d, normed.begin() + t * d);
  return matmul_ref(readout, p.output_proj.values(), 1, d, c.embed_dim);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace oracle
