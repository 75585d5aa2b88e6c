#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dcp/errors.hpp"
#include "dcp/rng.hpp"
#include "dcp/tape.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

// Token id layout of the text encoder: two reserved sentinels, everything
// else is ordinary vocabulary.
inline constexpr std::size_t kStartToken = 0;
inline constexpr std::size_t kEndToken = 1;
inline constexpr std::size_t kFirstWordToken = 2;

struct EncoderConfig {
  std::size_t n_layers = 6;
  std::size_t model_dim = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t max_seq = 40;
  std::size_t embed_dim = 32;  // shared projection space
  std::size_t vocab_size = 0;  // text encoders only
  std::size_t patch_dim = 0;   // vision encoders only
  double ln_eps = 1e-5;

  bool is_text() const { return vocab_size > 0; }
  bool is_vision() const { return patch_dim > 0; }

  void validate() const {
    if (n_layers == 0 || model_dim == 0 || n_heads == 0 || ffn_dim == 0 || max_seq == 0 ||
        embed_dim == 0)
      throw ConfigError("encoder config: all extents must be positive");
    if (model_dim % n_heads != 0)
      throw ConfigError("encoder config: model_dim " + std::to_string(model_dim) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    if (is_text() == is_vision())
      throw ConfigError("encoder config: set exactly one of vocab_size / patch_dim");
    if (is_text() && vocab_size <= kFirstWordToken)
      throw ConfigError("encoder config: vocab_size must exceed the reserved sentinels");
    if (ln_eps <= 0.0) throw ConfigError("encoder config: ln_eps must be positive");
  }
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  AttentionParams attn;
  Tensor ln2_gain, ln2_bias;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

/// Weights of one encoder. Frozen during prompt tuning: the training loop
/// registers these as non-trainable tape leaves.
struct EncoderParams {
  EncoderConfig config;
  Tensor token_table;             // text: vocab x d
  Tensor patch_proj, patch_bias;  // vision: patch_dim x d, d
  Tensor class_token;             // vision: 1 x d
  Tensor pos_embed;               // max_seq x d
  std::vector<LayerParams> layers;
  Tensor final_ln_gain, final_ln_bias;
  Tensor output_proj;  // d x embed_dim
};

template <typename Params, typename Fn>
void for_each_encoder_param_impl(Params& p, Fn&& fn) {
  if (p.config.is_text()) {
    fn("token_table", p.token_table);
  } else {
    fn("patch_proj", p.patch_proj);
    fn("patch_bias", p.patch_bias);
    fn("class_token", p.class_token);
  }
  fn("pos_embed", p.pos_embed);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const std::string base = "layers." + std::to_string(i) + ".";
    auto& layer = p.layers[i];
    fn(base + "ln1.gain", layer.ln1_gain);
    fn(base + "ln1.bias", layer.ln1_bias);
    fn(base + "attn.wq", layer.attn.wq);
    fn(base + "attn.bq", layer.attn.bq);
    fn(base + "attn.wk", layer.attn.wk);
    fn(base + "attn.bk", layer.attn.bk);
    fn(base + "attn.wv", layer.attn.wv);
    fn(base + "attn.bv", layer.attn.bv);
    fn(base + "attn.wo", layer.attn.wo);
    fn(base + "attn.bo", layer.attn.bo);
    fn(base + "ln2.gain", layer.ln2_gain);
    fn(base + "ln2.bias", layer.ln2_bias);
    fn(base + "ffn.w1", layer.ffn_w1);
    fn(base + "ffn.b1", layer.ffn_b1);
    fn(base + "ffn.w2", layer.ffn_w2);
    fn(base + "ffn.b2", layer.ffn_b2);
  }
  fn("final_ln.gain", p.final_ln_gain);
  fn("final_ln.bias", p.final_ln_bias);
  fn("output_proj", p.output_proj);
}

template <typename Fn>
void for_each_param(EncoderParams& p, Fn&& fn) {
  for_each_encoder_param_impl(p, std::forward<Fn>(fn));
}
template <typename Fn>
void for_each_param(const EncoderParams& p, Fn&& fn) {
  for_each_encoder_param_impl(p, std::forward<Fn>(fn));
}

namespace detail {

inline LayerParams init_layer(const EncoderConfig& c, Rng& rng, double weight_std) {
  LayerParams lp;
  const std::size_t d = c.model_dim, f = c.ffn_dim;
  lp.ln1_gain = full({d}, 1.0);
  lp.ln1_bias = zeros({d});
  lp.attn.wq = random_normal({d, d}, weight_std, rng);
  lp.attn.bq = zeros({d});
  lp.attn.wk = random_normal({d, d}, weight_std, rng);
  lp.attn.bk = zeros({d});
  lp.attn.wv = random_normal({d, d}, weight_std, rng);
  lp.attn.bv = zeros({d});
  lp.attn.wo = random_normal({d, d}, weight_std, rng);
  lp.attn.bo = zeros({d});
  lp.ln2_gain = full({d}, 1.0);
  lp.ln2_bias = zeros({d});
  lp.ffn_w1 = random_normal({d, f}, weight_std, rng);
  lp.ffn_b1 = zeros({f});
  lp.ffn_w2 = random_normal({f, d}, weight_std, rng);
  lp.ffn_b2 = zeros({d});
  return lp;
}

}  // namespace detail

/// Deterministic pseudo-random initialization: scaled normals (std 0.02) for
/// projections and embeddings, zeros for biases, ones for layer-norm gains.
inline EncoderParams init_encoder(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  constexpr double kStd = 0.02;
  Rng rng(mix_seed(seed, config.is_text() ? 0x7e87u : 0x51f7u));
  EncoderParams p;
  p.config = config;
  const std::size_t d = config.model_dim;
  if (config.is_text()) {
    p.token_table = random_normal({config.vocab_size, d}, kStd, rng);
  } else {
    p.patch_proj = random_normal({config.patch_dim, d}, kStd, rng);
    p.patch_bias = zeros({d});
    p.class_token = random_normal({1, d}, kStd, rng);
  }
  p.pos_embed = random_normal({config.max_seq, d}, kStd, rng);
  p.layers.reserve(config.n_layers);
  for (std::size_t i = 0; i < config.n_layers; ++i)
    p.layers.push_back(detail::init_layer(config, rng, kStd));
  p.final_ln_gain = full({d}, 1.0);
  p.final_ln_bias = zeros({d});
  p.output_proj = random_normal({d, config.embed_dim}, kStd, rng);
  return p;
}

/// Closed-form trainable/frozen parameter count for a config.
inline std::size_t parameter_count(const EncoderConfig& c) {
  const std::size_t d = c.model_dim, f = c.ffn_dim;
  const std::size_t per_layer = 4 * d * d + 4 * d    // attention projections + biases
                                + 2 * d * f + f + d  // feed-forward
                                + 4 * d;             // two layer norms
  std::size_t n = c.max_seq * d + c.n_layers * per_layer + 2 * d + d * c.embed_dim;
  if (c.is_text()) n += c.vocab_size * d;
  if (c.is_vision()) n += c.patch_dim * d + d + d;  // patch proj + bias + class token
  return n;
}

/// FNV-1a over parameter names and raw value bits; order is the visitor order.
inline std::uint64_t checksum(const EncoderParams& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* bytes, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for_each_param(p, [&](const std::string& name, const Tensor& t) {
    feed(name.data(), name.size());
    feed(t.values().data(), t.size() * sizeof(double));
  });
  return h;
}

/// Re-register every weight tensor on a tape. Frozen passes use
/// trainable=false, which keeps gradients from being computed for them.
inline EncoderParams register_on_tape(Tape& tape, const EncoderParams& p, bool trainable) {
  EncoderParams out = p;
  for_each_param(out, [&](const std::string&, Tensor& t) { t = tape.leaf(t, trainable); });
  return out;
}

/// Replace rows [begin, end) of x with the given rows.
inline Tensor splice_rows(Tape& tape, const Tensor& x, std::size_t begin, std::size_t end,
                          const Tensor& rows) {
  if (x.rank() != 2 || rows.rank() != 2 || rows.shape[0] != end - begin ||
      rows.shape[1] != x.shape[1])
    throw ContractError("splice_rows: replacement " + shape_str(rows.shape) +
                        " does not fit rows [" + std::to_string(begin) + ", " +
                        std::to_string(end) + ") of " + shape_str(x.shape));
  std::vector<Tensor> parts;
  if (begin > 0) parts.push_back(tape.slice_axis(x, 0, 0, begin));
  parts.push_back(rows);
  if (end < x.shape[0]) parts.push_back(tape.slice_axis(x, 0, end, x.shape[0]));
  return tape.concat_axis(parts, 0);
}

/// One pre-norm transformer block: multi-head attention then a GELU MLP,
/// both with residual connections. Pass a mask to make attention causal.
inline Tensor encoder_layer_forward(Tape& tape, const LayerParams& lp, const Tensor& x,
                                    std::size_t n_heads, const Tensor* causal_mask,
                                    double ln_eps) {
  const std::size_t d = x.shape[1];
  const std::size_t dh = d / n_heads;
  Tensor h = tape.layer_norm(x, lp.ln1_gain, lp.ln1_bias, ln_eps);
  Tensor q = tape.add(tape.matmul(h, lp.attn.wq), lp.attn.bq);
  Tensor k = tape.add(tape.matmul(h, lp.attn.wk), lp.attn.bk);
  Tensor v = tape.add(tape.matmul(h, lp.attn.wv), lp.attn.bv);
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t hd = 0; hd < n_heads; ++hd) {
    Tensor qh = tape.slice_axis(q, 1, hd * dh, (hd + 1) * dh);
    Tensor kh = tape.slice_axis(k, 1, hd * dh, (hd + 1) * dh);
    Tensor vh = tape.slice_axis(v, 1, hd * dh, (hd + 1) * dh);
    Tensor scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
    if (causal_mask) scores = tape.add(scores, *causal_mask);
    heads.push_back(tape.matmul(tape.softmax_rows(scores), vh));
  }
  Tensor attn_out = tape.add(tape.matmul(tape.concat_axis(heads, 1), lp.attn.wo), lp.attn.bo);
  Tensor x1 = tape.add(x, attn_out);
  Tensor h2 = tape.layer_norm(x1, lp.ln2_gain, lp.ln2_bias, ln_eps);
  Tensor f = tape.gelu(tape.add(tape.matmul(h2, lp.ffn_w1), lp.ffn_b1));
  Tensor mlp_out = tape.add(tape.matmul(f, lp.ffn_w2), lp.ffn_b2);
  return tape.add(x1, mlp_out);
}

namespace detail {

inline Tensor causal_mask_values(std::size_t t) {
  // Finite large negative keeps every tensor free of infinities; the masked
  // probabilities underflow to exactly zero after max subtraction.
  std::vector<double> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = -1e9;
  return Tensor({t, t}, std::move(m));
}

inline void check_prompts(const std::vector<Tensor>& prompts, std::size_t model_dim,
                          std::size_t n_layers, const char* what) {
  if (prompts.size() > n_layers)
    throw ContractError(std::string(what) + ": " + std::to_string(prompts.size()) +
                        " prompt layers exceed encoder depth " + std::to_string(n_layers));
  for (const Tensor& p : prompts) {
    if (p.rank() != 2 || p.shape[1] != model_dim || p.shape[0] != prompts[0].shape[0] ||
        p.shape[0] == 0)
      throw ContractError(std::string(what) + ": prompt tensor " + shape_str(p.shape) +
                          " inconsistent with model_dim " + std::to_string(model_dim));
  }
}

}  // namespace detail

/// Vision forward pass. The token layout is [class token, prompts, patches];
/// prompt layer i replaces the prompt rows before block i runs, and beyond
/// the prompt depth the last prompt outputs travel on as ordinary tokens.
/// Positional embeddings attach to the class token and patches in their
/// prompt-free order; prompt rows are free vectors and receive none, so
/// inserting prompts never displaces the content positions.
/// Returns the class-token representation projected into the shared space
/// (rank-1, length embed_dim). Not normalized here; scoring normalizes.
inline Tensor encode_image(Tape& tape, const EncoderParams& p, const Tensor& patches,
                           const std::vector<Tensor>& visual_prompts) {
  const EncoderConfig& c = p.config;
  if (!c.is_vision()) throw ContractError("encode_image: not a vision encoder");
  if (patches.rank() != 2 || patches.shape[1] != c.patch_dim)
    throw ContractError("encode_image: patch grid " + shape_str(patches.shape) +
                        " does not match patch_dim " + std::to_string(c.patch_dim));
  detail::check_prompts(visual_prompts, c.model_dim, c.n_layers, "encode_image");
  const std::size_t n_prompt_layers = visual_prompts.size();
  const std::size_t m = n_prompt_layers == 0 ? 0 : visual_prompts[0].shape[0];
  const std::size_t t = 1 + m + patches.shape[0];
  if (t > c.max_seq)
    throw ContractError("encode_image: sequence length " + std::to_string(t) + " exceeds max_seq " +
                        std::to_string(c.max_seq));

  Tensor embedded = tape.add(tape.matmul(patches, p.patch_proj), p.patch_bias);
  Tensor content = tape.concat_axis({p.class_token, embedded}, 0);
  content = tape.add(content, tape.slice_axis(p.pos_embed, 0, 0, 1 + patches.shape[0]));
  Tensor x = content;
  if (m > 0) {
    x = tape.concat_axis({tape.slice_axis(content, 0, 0, 1), visual_prompts[0],
                          tape.slice_axis(content, 0, 1, 1 + patches.shape[0])},
                         0);
  }

  for (std::size_t i = 0; i < c.n_layers; ++i) {
    if (i > 0 && i < n_prompt_layers) x = splice_rows(tape, x, 1, 1 + m, visual_prompts[i]);
    x = encoder_layer_forward(tape, p.layers[i], x, c.n_heads, nullptr, c.ln_eps);
  }
  Tensor readout = tape.slice_axis(tape.layer_norm(x, p.final_ln_gain, p.final_ln_bias, c.ln_eps),
                                   0, 0, 1);
  return tape.reshape(tape.matmul(readout, p.output_proj), {c.embed_dim});
}

/// Text forward pass under causal masking. The token layout is
/// [start sentinel, prompts, word ids, end sentinel]; the readout is the end
/// sentinel position projected into the shared space (rank-1). As in the
/// vision path, positional embeddings attach to the ordinary tokens in their
/// prompt-free order and prompt rows receive none.
inline Tensor encode_text(Tape& tape, const EncoderParams& p, const std::vector<std::size_t>& ids,
                          const std::vector<Tensor>& text_prompts) {
  const EncoderConfig& c = p.config;
  if (!c.is_text()) throw ContractError("encode_text: not a text encoder");
  detail::check_prompts(text_prompts, c.model_dim, c.n_layers, "encode_text");
  const std::size_t n_prompt_layers = text_prompts.size();
  const std::size_t m = n_prompt_layers == 0 ? 0 : text_prompts[0].shape[0];
  const std::size_t t = 2 + m + ids.size();
  if (t > c.max_seq)
    throw ContractError("encode_text: sequence overflow, length " + std::to_string(t) +
                        " exceeds max_seq " + std::to_string(c.max_seq));

  std::vector<std::size_t> full_ids{kStartToken};
  full_ids.insert(full_ids.end(), ids.begin(), ids.end());
  full_ids.push_back(kEndToken);
  Tensor content = tape.embed_rows(p.token_table, full_ids);
  content = tape.add(content, tape.slice_axis(p.pos_embed, 0, 0, full_ids.size()));
  Tensor x = content;
  if (m > 0) {
    x = tape.concat_axis({tape.slice_axis(content, 0, 0, 1), text_prompts[0],
                          tape.slice_axis(content, 0, 1, full_ids.size())},
                         0);
  }

  Tensor mask = tape.constant(detail::causal_mask_values(t));
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    if (i > 0 && i < n_prompt_layers) x = splice_rows(tape, x, 1, 1 + m, text_prompts[i]);
    x = encoder_layer_forward(tape, p.layers[i], x, c.n_heads, &mask, c.ln_eps);
  }
  Tensor readout = tape.slice_axis(tape.layer_norm(x, p.final_ln_gain, p.final_ln_bias, c.ln_eps),
                                   0, t - 1, t);
  return tape.reshape(tape.matmul(readout, p.output_proj), {c.embed_dim});
}

}  // namespace dcp
