#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dcp/encoder.hpp"
#include "dcp/errors.hpp"
#include "dcp/rng.hpp"
#include "dcp/tape.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

/// How the class/batch axis of expanded prompts is collapsed before the
/// cross-modal attention step.
enum class FusionMode { Avg, Max, First };

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::Avg: return "avg";
    case FusionMode::Max: return "max";
    case FusionMode::First: return "first";
  }
  return "?";
}

inline FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "avg") return FusionMode::Avg;
  if (s == "max") return FusionMode::Max;
  if (s == "first") return FusionMode::First;
  throw ConfigError("unknown fusion mode '" + s + "' (expected avg, max or first)");
}

struct PromptConfig {
  std::size_t length = 16;   // prompt tokens per modality (equal on both sides)
  std::size_t depth = 9;     // number of prompted layers
  std::size_t d_attn = 64;   // cross-attention width
  std::size_t n_heads = 4;
  FusionMode fusion = FusionMode::Avg;
  bool share_params = true;
  bool residual = false;
  bool use_layer_norm = false;
  // Test-only mode: identity projections reproduce the bare update
  // P_t' = softmax(P_v P_t^T / sqrt(d_k)) P_t. Requires equal widths.
  bool literal = false;

  void validate() const {
    if (depth < 1) throw ConfigError("prompt config: depth must be at least 1");
    if (d_attn == 0 || n_heads == 0 || d_attn % n_heads != 0)
      throw ConfigError("prompt config: d_attn " + std::to_string(d_attn) +
                        " not divisible by n_heads " + std::to_string(n_heads));
  }

  void validate_against(const EncoderConfig& text, const EncoderConfig& vision) const {
    validate();
    if (depth > text.n_layers || depth > vision.n_layers)
      throw ConfigError("prompt config: depth " + std::to_string(depth) +
                        " exceeds encoder depth min(" + std::to_string(text.n_layers) + ", " +
                        std::to_string(vision.n_layers) + ")");
    if (literal && (text.model_dim != vision.model_dim || text.model_dim != d_attn))
      throw ConfigError("prompt config: literal mode requires d_text == d_vision == d_attn");
  }
};

/// Learned projections of one cross-modal attention block. Queries for each
/// update come from the other modality; keys and values come from the
/// modality being updated.
struct CmpaParams {
  Tensor wq_text, wk_text, wv_text, wo_text;      // text update (queries from vision)
  Tensor wq_vision, wk_vision, wv_vision, wo_vision;  // vision update (queries from text)
};

/// The trainable state of prompt tuning: first-layer prompts for both
/// modalities plus the cross-modal attention blocks that generate the rest.
struct PromptBank {
  PromptConfig config;
  Tensor text_first;    // length x d_text
  Tensor vision_first;  // length x d_vision
  std::vector<CmpaParams> blocks;  // 1 if shared, depth-1 otherwise, 0 in literal mode
};

template <typename Bank, typename Fn>
void for_each_bank_param_impl(Bank& b, Fn&& fn) {
  fn("text_first", b.text_first);
  fn("vision_first", b.vision_first);
  for (std::size_t i = 0; i < b.blocks.size(); ++i) {
    const std::string base = "blocks." + std::to_string(i) + ".";
    auto& blk = b.blocks[i];
    fn(base + "wq_text", blk.wq_text);
    fn(base + "wk_text", blk.wk_text);
    fn(base + "wv_text", blk.wv_text);
    fn(base + "wo_text", blk.wo_text);
    fn(base + "wq_vision", blk.wq_vision);
    fn(base + "wk_vision", blk.wk_vision);
    fn(base + "wv_vision", blk.wv_vision);
    fn(base + "wo_vision", blk.wo_vision);
  }
}

template <typename Fn>
void for_each_param(PromptBank& b, Fn&& fn) {
  for_each_bank_param_impl(b, std::forward<Fn>(fn));
}
template <typename Fn>
void for_each_param(const PromptBank& b, Fn&& fn) {
  for_each_bank_param_impl(b, std::forward<Fn>(fn));
}

inline std::uint64_t checksum(const PromptBank& b) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for_each_param(b, [&](const std::string& name, const Tensor& t) {
    feed(name.data(), name.size());
    feed(t.values().data(), t.size() * sizeof(double));
  });
  return h;
}

inline constexpr double kPromptInitStd = 0.02;

/// First-layer text prompts: rows are the embeddings of the template tokens,
/// truncated or padded to exactly M rows; pad rows are N(0, 0.02^2).
inline Tensor init_text_prompts(const Tensor& embed_table,
                                const std::vector<std::size_t>& template_ids, std::size_t m,
                                Rng& rng) {
  if (embed_table.rank() != 2) throw ContractError("init_text_prompts: table must be rank 2");
  const std::size_t d = embed_table.shape[1];
  std::vector<double> rows(m * d);
  const auto& tv = embed_table.values();
  for (std::size_t i = 0; i < m; ++i) {
    if (i < template_ids.size()) {
      const std::size_t id = template_ids[i];
      if (id >= embed_table.shape[0])
        throw IndexError("init_text_prompts: template id " + std::to_string(id) + " out of range");
      for (std::size_t j = 0; j < d; ++j) rows[i * d + j] = tv[id * d + j];
    } else {
      for (std::size_t j = 0; j < d; ++j) rows[i * d + j] = rng.normal(0.0, kPromptInitStd);
    }
  }
  return Tensor({m, d}, std::move(rows));
}

/// First-layer visual prompts: i.i.d. N(0, 0.02^2).
inline Tensor init_visual_prompts(std::size_t m, std::size_t d_vision, Rng& rng) {
  return random_normal({m, d_vision}, kPromptInitStd, rng);
}

// Query/key/value projections start at 0.02-scale normals; the output maps
// start at zero so freshly generated deep prompts are exact zero rows until
// training moves them. That keeps the frozen encoders unperturbed at step 0.
inline CmpaParams init_cmpa_block(std::size_t d_text, std::size_t d_vision, std::size_t d_attn,
                                  Rng& rng) {
  CmpaParams p;
  p.wq_text = random_normal({d_vision, d_attn}, kPromptInitStd, rng);
  p.wk_text = random_normal({d_text, d_attn}, kPromptInitStd, rng);
  p.wv_text = random_normal({d_text, d_attn}, kPromptInitStd, rng);
  p.wo_text = zeros({d_attn, d_text});
  p.wq_vision = random_normal({d_text, d_attn}, kPromptInitStd, rng);
  p.wk_vision = random_normal({d_vision, d_attn}, kPromptInitStd, rng);
  p.wv_vision = random_normal({d_vision, d_attn}, kPromptInitStd, rng);
  p.wo_vision = zeros({d_attn, d_vision});
  return p;
}

inline std::size_t cmpa_block_param_count(std::size_t d_text, std::size_t d_vision,
                                          std::size_t d_attn) {
  return 4 * d_attn * (d_text + d_vision);
}

/// Closed-form trainable parameter count of a bank.
inline std::size_t trainable_count(const PromptConfig& cfg, std::size_t d_text,
                                   std::size_t d_vision) {
  const std::size_t first = cfg.length * (d_text + d_vision);
  if (cfg.literal) return first;
  const std::size_t n_blocks = cfg.share_params ? 1 : cfg.depth - 1;
  return first + n_blocks * cmpa_block_param_count(d_text, d_vision, cfg.d_attn);
}

inline PromptBank init_prompt_bank(const PromptConfig& cfg, const Tensor& text_embed_table,
                                   const std::vector<std::size_t>& template_ids,
                                   std::size_t d_vision, std::uint64_t seed) {
  cfg.validate();
  PromptBank bank;
  bank.config = cfg;
  Rng rng(mix_seed(seed, 0xba62ULL));
  Rng text_rng = rng.derive(1);
  Rng vision_rng = rng.derive(2);
  Rng block_rng = rng.derive(3);
  bank.text_first = init_text_prompts(text_embed_table, template_ids, cfg.length, text_rng);
  bank.vision_first = init_visual_prompts(cfg.length, d_vision, vision_rng);
  const std::size_t d_text = text_embed_table.shape[1];
  if (cfg.literal && d_text != d_vision)
    throw ConfigError("prompt bank: literal mode requires d_text == d_vision");
  if (!cfg.literal) {
    const std::size_t n_blocks = cfg.share_params ? 1 : cfg.depth - 1;
    for (std::size_t i = 0; i < n_blocks; ++i)
      bank.blocks.push_back(init_cmpa_block(d_text, d_vision, cfg.d_attn, block_rng));
  }
  return bank;
}

inline PromptBank register_on_tape(Tape& tape, const PromptBank& bank, bool trainable) {
  PromptBank out = bank;
  for_each_param(out, [&](const std::string&, Tensor& t) { t = tape.leaf(t, trainable); });
  return out;
}

namespace detail {

inline Tensor cross_attention_half(Tape& tape, const Tensor& query_src, const Tensor& kv_src,
                                   const Tensor* wq, const Tensor* wk, const Tensor* wv,
                                   const Tensor* wo, std::size_t n_heads) {
  Tensor q = wq ? tape.matmul(query_src, *wq) : query_src;
  Tensor k = wk ? tape.matmul(kv_src, *wk) : kv_src;
  Tensor v = wv ? tape.matmul(kv_src, *wv) : kv_src;
  const std::size_t da = q.shape[1];
  if (k.shape[1] != da || da % n_heads != 0)
    throw ContractError("cmpa_step: attention width mismatch");
  const std::size_t dk = da / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor qh = tape.slice_axis(q, 1, h * dk, (h + 1) * dk);
    Tensor kh = tape.slice_axis(k, 1, h * dk, (h + 1) * dk);
    Tensor vh = tape.slice_axis(v, 1, h * dk, (h + 1) * dk);
    Tensor attn = tape.softmax_rows(tape.scale(tape.matmul(qh, tape.transpose(kh)), scale));
    heads.push_back(tape.matmul(attn, vh));
  }
  Tensor cat = n_heads == 1 ? heads[0] : tape.concat_axis(heads, 1);
  return wo ? tape.matmul(cat, *wo) : cat;
}

}  // namespace detail

/// One cross-modal prompt attention step. Both updates read only the layer-l
/// inputs (simultaneous update): the text prompts are refreshed by attention
/// queried from the visual prompts and vice versa. Pass block = nullptr in
/// literal mode.
inline std::pair<Tensor, Tensor> cmpa_step(Tape& tape, const Tensor& p_text,
                                           const Tensor& p_vision, const CmpaParams* block,
                                           const PromptConfig& cfg) {
  if (p_text.rank() != 2 || p_vision.rank() != 2 || p_text.shape[0] != p_vision.shape[0])
    throw ContractError("cmpa_step: prompts must be rank 2 with equal row counts, got " +
                        shape_str(p_text.shape) + " and " + shape_str(p_vision.shape));
  if (!cfg.literal && block == nullptr)
    throw ContractError("cmpa_step: missing projection block");
  if (cfg.literal && p_text.shape[1] != p_vision.shape[1])
    throw ContractError("cmpa_step: literal mode requires equal prompt widths");

  Tensor next_text, next_vision;
  if (cfg.literal) {
    next_text = detail::cross_attention_half(tape, p_vision, p_text, nullptr, nullptr, nullptr,
                                             nullptr, cfg.n_heads);
    next_vision = detail::cross_attention_half(tape, p_text, p_vision, nullptr, nullptr, nullptr,
                                               nullptr, cfg.n_heads);
  } else {
    next_text = detail::cross_attention_half(tape, p_vision, p_text, &block->wq_text,
                                             &block->wk_text, &block->wv_text, &block->wo_text,
                                             cfg.n_heads);
    next_vision = detail::cross_attention_half(tape, p_text, p_vision, &block->wq_vision,
                                               &block->wk_vision, &block->wv_vision,
                                               &block->wo_vision, cfg.n_heads);
  }
  if (cfg.residual) {
    next_text = tape.add(next_text, p_text);
    next_vision = tape.add(next_vision, p_vision);
  }
  if (cfg.use_layer_norm) {
    Tensor gain_t = tape.constant(full({p_text.shape[1]}, 1.0));
    Tensor bias_t = tape.constant(zeros({p_text.shape[1]}));
    next_text = tape.layer_norm(next_text, gain_t, bias_t);
    Tensor gain_v = tape.constant(full({p_vision.shape[1]}, 1.0));
    Tensor bias_v = tape.constant(zeros({p_vision.shape[1]}));
    next_vision = tape.layer_norm(next_vision, gain_v, bias_v);
  }
  return {next_text, next_vision};
}

/// Collapse the leading (class/batch) axis of expanded prompts ahead of the
/// cross-modal step. The step's outputs apply identically to every leading
/// entry afterwards.
inline std::pair<Tensor, Tensor> fuse_batch(Tape& tape, const Tensor& text_prompts,
                                            const Tensor& visual_prompts, FusionMode mode) {
  if (text_prompts.rank() != 3 || visual_prompts.rank() != 3)
    throw ContractError("fuse_batch: expected rank-3 inputs (batch x length x width)");
  if (text_prompts.shape[0] == 0 || visual_prompts.shape[0] == 0)
    throw ContractError("fuse_batch: empty leading axis");
  auto collapse = [&](const Tensor& t) -> Tensor {
    switch (mode) {
      case FusionMode::Avg: return tape.reduce_mean_axis(t, 0);
      case FusionMode::Max: return tape.reduce_max_axis(t, 0);
      case FusionMode::First:
        return tape.reshape(tape.slice_axis(t, 0, 0, 1), {t.shape[1], t.shape[2]});
    }
    throw ConfigError("fuse_batch: unknown fusion mode");
  };
  return {collapse(text_prompts), collapse(visual_prompts)};
}

/// Per-layer prompt tensors consumed by the encoders.
struct PromptSchedules {
  std::vector<Tensor> text;
  std::vector<Tensor> vision;
};

/// Full prompt pipeline: expand the first-layer prompts over the class and
/// batch axes, collapse them back with the configured fusion, and roll the
/// cross-modal chain. Every class (and every batch sample) then consumes the
/// same schedule.
inline PromptSchedules dcp_schedules(Tape& tape, const PromptBank& bank, std::size_t n_classes,
                                     std::size_t n_batch);

/// Iterate the cross-modal step depth-1 times from the (fused) first-layer
/// prompts. With shared parameters the single block applies at every layer;
/// otherwise block l produces the layer l+1 prompts.
inline PromptSchedules roll_prompts(Tape& tape, const PromptBank& bank, const Tensor& first_text,
                                    const Tensor& first_vision) {
  const PromptConfig& cfg = bank.config;
  const std::size_t expected = cfg.literal ? 0 : (cfg.share_params ? 1 : cfg.depth - 1);
  if (bank.blocks.size() != expected)
    throw ContractError("roll_prompts: bank holds " + std::to_string(bank.blocks.size()) +
                        " blocks, expected " + std::to_string(expected));
  PromptSchedules out;
  out.text.reserve(cfg.depth);
  out.vision.reserve(cfg.depth);
  out.text.push_back(first_text);
  out.vision.push_back(first_vision);
  for (std::size_t l = 1; l < cfg.depth; ++l) {
    const CmpaParams* block = nullptr;
    if (!cfg.literal) block = cfg.share_params ? &bank.blocks[0] : &bank.blocks[l - 1];
    auto [next_t, next_v] = cmpa_step(tape, out.text.back(), out.vision.back(), block, cfg);
    out.text.push_back(next_t);
    out.vision.push_back(next_v);
  }
  return out;
}

inline PromptSchedules dcp_schedules(Tape& tape, const PromptBank& bank, std::size_t n_classes,
                                     std::size_t n_batch) {
  Tensor expanded_text = tape.tile_leading(bank.text_first, n_classes);
  Tensor expanded_vision = tape.tile_leading(bank.vision_first, n_batch);
  auto [fused_text, fused_vision] =
      fuse_batch(tape, expanded_text, expanded_vision, bank.config.fusion);
  return roll_prompts(tape, bank, fused_text, fused_vision);
}

}  // namespace dcp
