#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dcp/config.hpp"
#include "dcp/encoder.hpp"
#include "dcp/errors.hpp"
#include "dcp/objective.hpp"
#include "dcp/optimizer.hpp"
#include "dcp/prompts.hpp"
#include "dcp/report.hpp"
#include "dcp/rng.hpp"
#include "dcp/serialize.hpp"
#include "dcp/synthdata.hpp"
#include "dcp/tape.hpp"

namespace dcp {

// ---- methods ------------------------------------------------------------------

enum class Method { ZeroShot, CoopTextOnly, VptDeepVisionOnly, DualIndependent, Dcp };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::ZeroShot: return "zero_shot";
    case Method::CoopTextOnly: return "coop_text_only";
    case Method::VptDeepVisionOnly: return "vpt_deep_vision_only";
    case Method::DualIndependent: return "dual_independent";
    case Method::Dcp: return "dcp";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  if (s == "zero_shot") return Method::ZeroShot;
  if (s == "coop_text_only") return Method::CoopTextOnly;
  if (s == "vpt_deep_vision_only") return Method::VptDeepVisionOnly;
  if (s == "dual_independent") return Method::DualIndependent;
  if (s == "dcp") return Method::Dcp;
  throw ConfigError("unknown method '" + s + "'");
}

// ---- run configuration ----------------------------------------------------------

struct PretrainConfig {
  bool enabled = true;  // contrastive warm-up before freezing
  std::size_t steps = 60;
  double learning_rate = 0.01;
  double grad_clip = 1.0;  // global-norm clip; the warm-up diverges without one
  // Optimize the prompted-slot condition alongside the plain one so that
  // prompt tuning starts from the same alignment zero-shot evaluation sees.
  bool prompted_slots = true;
  std::size_t slot_rows = 16;  // rows inserted during the prompted condition
};

struct RunConfig {
  Method method = Method::Dcp;
  std::string dataset_dir;
  std::vector<std::size_t> shots{1, 2, 4, 8, 16};
  std::size_t epochs = 20;
  std::size_t batch_size = 4;
  double learning_rate = 0.0035;
  double momentum = 0.9;
  double grad_clip = 1.0;  // global-norm clip on the prompt gradients (0 = off)
  Temperature tau{0.07};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  PromptConfig prompt;
  EncoderConfig text_encoder;
  EncoderConfig vision_encoder;
  PretrainConfig pretrain;
  std::string save_weights_dir;  // empty: do not save

  /// Sorted key-value echo embedded in every report.
  std::map<std::string, std::string> echo;
};

namespace detail {

inline std::string join_u64(const std::vector<std::uint64_t>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
  return out;
}
inline std::string join_sizes(const std::vector<std::size_t>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
  return out;
}

}  // namespace detail

/// Apply defaults, read overrides, validate, and build the config echo.
/// The prompt depth is capped at the encoder depth.
inline RunConfig resolve_run_config(const KeyValueConfig& kv) {
  RunConfig rc;
  rc.method = method_from_string(kv.get_string("method", "dcp"));
  rc.dataset_dir = kv.get_string("dataset", "");
  {
    auto shots64 = kv.get_u64_list("shots", {1, 2, 4, 8, 16});
    rc.shots.assign(shots64.begin(), shots64.end());
    for (std::size_t s : rc.shots)
      if (s == 0) throw ConfigError("shots must be positive");
  }
  rc.epochs = kv.get_u64("epochs", 20);
  rc.batch_size = kv.get_u64("batch_size", 4);
  if (rc.batch_size == 0) throw ConfigError("batch_size must be positive");
  rc.learning_rate = kv.get_double("learning_rate", 0.0035);
  rc.momentum = kv.get_double("momentum", 0.9);
  rc.grad_clip = kv.get_double("grad_clip", 1.0);
  rc.tau.value = kv.get_double("tau", 0.07);
  rc.tau.validate();
  rc.seeds = kv.get_u64_list("seeds", {0, 1, 2});

  rc.text_encoder.n_layers = kv.get_u64("text.layers", 6);
  rc.text_encoder.model_dim = kv.get_u64("text.dim", 48);
  rc.text_encoder.n_heads = kv.get_u64("text.heads", 4);
  rc.text_encoder.ffn_dim = kv.get_u64("text.ffn", 96);
  rc.text_encoder.max_seq = kv.get_u64("text.max_seq", 32);
  rc.text_encoder.embed_dim = kv.get_u64("embed_dim", 32);
  rc.text_encoder.vocab_size = kv.get_u64("text.vocab", 64);
  rc.text_encoder.patch_dim = 0;

  rc.vision_encoder.n_layers = kv.get_u64("vision.layers", 6);
  rc.vision_encoder.model_dim = kv.get_u64("vision.dim", 64);
  rc.vision_encoder.n_heads = kv.get_u64("vision.heads", 4);
  rc.vision_encoder.ffn_dim = kv.get_u64("vision.ffn", 128);
  rc.vision_encoder.max_seq = kv.get_u64("vision.max_seq", 40);
  rc.vision_encoder.embed_dim = rc.text_encoder.embed_dim;
  rc.vision_encoder.vocab_size = 0;
  rc.vision_encoder.patch_dim = kv.get_u64("vision.patch_dim", 12);

  rc.prompt.length = kv.get_u64("prompt.length", 16);
  const std::size_t depth_cap =
      std::min(rc.text_encoder.n_layers, rc.vision_encoder.n_layers);
  rc.prompt.depth = std::min<std::size_t>(kv.get_u64("prompt.depth", 9), depth_cap);
  rc.prompt.d_attn = kv.get_u64("prompt.d_attn", 64);
  rc.prompt.n_heads = kv.get_u64("prompt.heads", 4);
  rc.prompt.fusion = fusion_mode_from_string(kv.get_string("prompt.fusion", "avg"));
  rc.prompt.share_params = kv.get_bool("prompt.share", true);
  rc.prompt.residual = kv.get_bool("prompt.residual", false);
  rc.prompt.use_layer_norm = kv.get_bool("prompt.layer_norm", false);
  rc.prompt.literal = kv.get_bool("prompt.literal", false);

  rc.pretrain.enabled = kv.get_bool("pretrain.enabled", true);
  rc.pretrain.steps = kv.get_u64("pretrain.steps", 60);
  rc.pretrain.learning_rate = kv.get_double("pretrain.learning_rate", 0.01);
  rc.pretrain.grad_clip = kv.get_double("pretrain.grad_clip", 1.0);
  rc.pretrain.prompted_slots = kv.get_bool("pretrain.prompted_slots", true);
  rc.pretrain.slot_rows = kv.get_u64("pretrain.slot_rows", rc.prompt.length);

  rc.save_weights_dir = kv.get_string("save_weights", "");

  rc.text_encoder.validate();
  rc.vision_encoder.validate();
  if (rc.prompt.length > 0 || rc.method == Method::Dcp)
    rc.prompt.validate_against(rc.text_encoder, rc.vision_encoder);

  auto& e = rc.echo;
  e["method"] = to_string(rc.method);
  e["dataset"] = rc.dataset_dir;
  e["shots"] = detail::join_sizes(rc.shots);
  e["epochs"] = std::to_string(rc.epochs);
  e["batch_size"] = std::to_string(rc.batch_size);
  e["learning_rate"] = fmt_double(rc.learning_rate);
  e["momentum"] = fmt_double(rc.momentum);
  e["grad_clip"] = fmt_double(rc.grad_clip);
  e["tau"] = fmt_double(rc.tau.value);
  e["seeds"] = detail::join_u64(rc.seeds);
  e["prompt.length"] = std::to_string(rc.prompt.length);
  e["prompt.depth"] = std::to_string(rc.prompt.depth);
  e["prompt.d_attn"] = std::to_string(rc.prompt.d_attn);
  e["prompt.heads"] = std::to_string(rc.prompt.n_heads);
  e["prompt.fusion"] = to_string(rc.prompt.fusion);
  e["prompt.share"] = rc.prompt.share_params ? "true" : "false";
  e["prompt.residual"] = rc.prompt.residual ? "true" : "false";
  e["prompt.layer_norm"] = rc.prompt.use_layer_norm ? "true" : "false";
  e["prompt.literal"] = rc.prompt.literal ? "true" : "false";
  e["text.layers"] = std::to_string(rc.text_encoder.n_layers);
  e["text.dim"] = std::to_string(rc.text_encoder.model_dim);
  e["text.heads"] = std::to_string(rc.text_encoder.n_heads);
  e["text.ffn"] = std::to_string(rc.text_encoder.ffn_dim);
  e["text.max_seq"] = std::to_string(rc.text_encoder.max_seq);
  e["text.vocab"] = std::to_string(rc.text_encoder.vocab_size);
  e["vision.layers"] = std::to_string(rc.vision_encoder.n_layers);
  e["vision.dim"] = std::to_string(rc.vision_encoder.model_dim);
  e["vision.heads"] = std::to_string(rc.vision_encoder.n_heads);
  e["vision.ffn"] = std::to_string(rc.vision_encoder.ffn_dim);
  e["vision.max_seq"] = std::to_string(rc.vision_encoder.max_seq);
  e["vision.patch_dim"] = std::to_string(rc.vision_encoder.patch_dim);
  e["embed_dim"] = std::to_string(rc.text_encoder.embed_dim);
  e["pretrain.enabled"] = rc.pretrain.enabled ? "true" : "false";
  e["pretrain.steps"] = std::to_string(rc.pretrain.steps);
  e["pretrain.learning_rate"] = fmt_double(rc.pretrain.learning_rate);
  e["pretrain.grad_clip"] = fmt_double(rc.pretrain.grad_clip);
  e["pretrain.prompted_slots"] = rc.pretrain.prompted_slots ? "true" : "false";
  e["pretrain.slot_rows"] = std::to_string(rc.pretrain.slot_rows);
  return rc;
}

// ---- per-method trainable state ---------------------------------------------------

/// Trainable leaves of one method. dcp owns a PromptBank; the baselines own
/// plain per-layer prompt tensors.
struct MethodBank {
  Method method = Method::ZeroShot;
  PromptConfig prompt_cfg;
  PromptBank dcp;                          // Method::Dcp
  Tensor coop_text;                        // Method::CoopTextOnly (first layer only)
  std::vector<Tensor> vpt_vision;          // Method::VptDeepVisionOnly, depth entries
  std::vector<Tensor> dual_text;           // Method::DualIndependent, depth entries
  std::vector<Tensor> dual_vision;

  std::vector<Tensor*> leaves() {
    std::vector<Tensor*> out;
    switch (method) {
      case Method::ZeroShot: break;
      case Method::CoopTextOnly: out.push_back(&coop_text); break;
      case Method::VptDeepVisionOnly:
        for (Tensor& t : vpt_vision) out.push_back(&t);
        break;
      case Method::DualIndependent:
        for (Tensor& t : dual_text) out.push_back(&t);
        for (Tensor& t : dual_vision) out.push_back(&t);
        break;
      case Method::Dcp:
        for_each_param(dcp, [&](const std::string&, Tensor& t) { out.push_back(&t); });
        break;
    }
    return out;
  }

  std::size_t trainable_params(std::size_t d_text, std::size_t d_vision) const {
    const std::size_t m = prompt_cfg.length, n = prompt_cfg.depth;
    switch (method) {
      case Method::ZeroShot: return 0;
      case Method::CoopTextOnly: return m * d_text;
      case Method::VptDeepVisionOnly: return n * m * d_vision;
      case Method::DualIndependent: return n * m * (d_text + d_vision);
      case Method::Dcp: return trainable_count(prompt_cfg, d_text, d_vision);
    }
    return 0;
  }
};

/// Whether text sequences carry the discrete template prefix (methods with no
/// learned text prompts) or rely on the continuous prompt rows instead.
inline bool uses_discrete_template(Method m) {
  return m == Method::ZeroShot || m == Method::VptDeepVisionOnly;
}

inline std::vector<std::vector<std::size_t>> method_class_ids(Method m, const Dataset& ds) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(ds.class_token_ids.size());
  const std::vector<std::size_t> prefix =
      uses_discrete_template(m) ? template_token_ids(ds.spec.vocab_size)
                                : std::vector<std::size_t>{};
  for (const auto& name_ids : ds.class_token_ids) {
    std::vector<std::size_t> ids = prefix;
    ids.insert(ids.end(), name_ids.begin(), name_ids.end());
    out.push_back(std::move(ids));
  }
  return out;
}

inline MethodBank init_method_bank(Method method, const PromptConfig& prompt_cfg,
                                   const EncoderParams& text_enc, std::size_t d_vision,
                                   const std::vector<std::size_t>& template_ids,
                                   std::uint64_t seed) {
  MethodBank bank;
  bank.method = method;
  bank.prompt_cfg = prompt_cfg;
  const std::size_t m = prompt_cfg.length, n = prompt_cfg.depth;
  const std::size_t d_text = text_enc.config.model_dim;
  Rng rng(mix_seed(seed, 0x6a11ULL));
  switch (method) {
    case Method::ZeroShot: break;
    case Method::CoopTextOnly: {
      Rng r = rng.derive(1);
      bank.coop_text = init_text_prompts(text_enc.token_table, template_ids, m, r);
      break;
    }
    case Method::VptDeepVisionOnly: {
      for (std::size_t l = 0; l < n; ++l) {
        Rng r = rng.derive(10 + l);
        bank.vpt_vision.push_back(init_visual_prompts(m, d_vision, r));
      }
      break;
    }
    case Method::DualIndependent: {
      Rng r0 = rng.derive(1);
      bank.dual_text.push_back(init_text_prompts(text_enc.token_table, template_ids, m, r0));
      for (std::size_t l = 1; l < n; ++l) {
        Rng r = rng.derive(20 + l);
        bank.dual_text.push_back(random_normal({m, d_text}, kPromptInitStd, r));
      }
      for (std::size_t l = 0; l < n; ++l) {
        Rng r = rng.derive(40 + l);
        bank.dual_vision.push_back(init_visual_prompts(m, d_vision, r));
      }
      break;
    }
    case Method::Dcp:
      bank.dcp = init_prompt_bank(prompt_cfg, text_enc.token_table, template_ids, d_vision, seed);
      break;
  }
  return bank;
}

inline MethodBank register_method_bank(Tape& tape, const MethodBank& bank, bool trainable) {
  MethodBank out = bank;
  for (Tensor* t : out.leaves()) *t = tape.leaf(*t, trainable);
  return out;
}

/// Per-layer prompt schedules a method feeds to the encoders. The bank must
/// already be registered on the tape.
inline PromptSchedules method_schedules(Tape& tape, const MethodBank& bank, std::size_t n_classes,
                                        std::size_t n_batch) {
  PromptSchedules out;
  switch (bank.method) {
    case Method::ZeroShot: break;
    case Method::CoopTextOnly: out.text = {bank.coop_text}; break;
    case Method::VptDeepVisionOnly: out.vision = bank.vpt_vision; break;
    case Method::DualIndependent:
      out.text = bank.dual_text;
      out.vision = bank.dual_vision;
      break;
    case Method::Dcp: out = dcp_schedules(tape, bank.dcp, n_classes, n_batch); break;
  }
  return out;
}

// ---- frozen encoders with contrastive warm-up -------------------------------------

struct EncoderPair {
  EncoderParams text;
  EncoderParams vision;
};

namespace detail {

template <typename Params>
std::vector<Tensor*> collect_tensors(Params& p) {
  std::vector<Tensor*> out;
  for_each_param(p, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

}  // namespace detail

/// Contrastive warm-up of both encoders on the train split (one sample per
/// class per step), then freeze. Gives the zero-shot baseline a meaningful
/// starting alignment instead of pure chance.
///
/// Each step optimizes the plain format and, when prompted_slots is on, the
/// same pairs with freshly drawn prompt-slot rows spliced in (template
/// embeddings plus noise on the text side, 0.02-scale noise on the vision
/// side, zero rows at the deeper layers). Prompt tuning then starts from the
/// alignment that zero-shot evaluation sees instead of falling off a cliff
/// the moment prompt tokens appear.
inline EncoderPair pretrain_encoders(const Dataset& ds, const EncoderConfig& text_cfg,
                                     const EncoderConfig& vision_cfg, const PretrainConfig& pt,
                                     Temperature tau, std::uint64_t seed) {
  EncoderPair pair{init_encoder(text_cfg, mix_seed(seed, 0x7e87ULL)),
                   init_encoder(vision_cfg, mix_seed(seed, 0x51f7ULL))};
  if (!pt.enabled || pt.steps == 0) return pair;
  if (text_cfg.vocab_size != ds.spec.vocab_size)
    throw ConfigError("pretrain: text vocab " + std::to_string(text_cfg.vocab_size) +
                      " does not match dataset vocab " + std::to_string(ds.spec.vocab_size));

  const std::size_t k = ds.spec.classes;
  const auto plain_ids = method_class_ids(Method::ZeroShot, ds);
  const auto name_ids = method_class_ids(Method::Dcp, ds);
  const auto template_ids = template_token_ids(ds.spec.vocab_size);
  Rng rng(mix_seed(seed, 0x93e1ULL));
  SgdMomentum sgd(pt.learning_rate, 0.9, pt.grad_clip);

  for (std::size_t step = 0; step < pt.steps; ++step) {
    Tape tape;
    EncoderParams text = register_on_tape(tape, pair.text, true);
    EncoderParams vision = register_on_tape(tape, pair.vision, true);

    std::vector<Tensor> slot_text, slot_vision;
    if (pt.prompted_slots && pt.slot_rows > 0) {
      Rng draw = rng.derive(step + 1);
      slot_text.push_back(tape.constant(
          init_text_prompts(pair.text.token_table, template_ids, pt.slot_rows, draw)));
      slot_vision.push_back(
          tape.constant(init_visual_prompts(pt.slot_rows, vision_cfg.model_dim, draw)));
      for (std::size_t l = 1; l < text_cfg.n_layers; ++l)
        slot_text.push_back(tape.constant(zeros({pt.slot_rows, text_cfg.model_dim})));
      for (std::size_t l = 1; l < vision_cfg.n_layers; ++l)
        slot_vision.push_back(tape.constant(zeros({pt.slot_rows, vision_cfg.model_dim})));
    }

    std::vector<Tensor> img_plain, txt_plain, img_slot, txt_slot;
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t idx =
          c * ds.spec.train_per_class + rng.below(ds.spec.train_per_class);
      img_plain.push_back(encode_image(tape, vision, ds.train[idx].patches, {}));
      txt_plain.push_back(encode_text(tape, text, plain_ids[c], {}));
      if (!slot_text.empty()) {
        img_slot.push_back(encode_image(tape, vision, ds.train[idx].patches, slot_vision));
        txt_slot.push_back(encode_text(tape, text, name_ids[c], slot_text));
      }
    }
    Tensor loss = contrastive_pair_loss(tape, tape.stack_rows(img_plain),
                                        tape.stack_rows(txt_plain), tau);
    if (!slot_text.empty()) {
      Tensor slot_loss = contrastive_pair_loss(tape, tape.stack_rows(img_slot),
                                               tape.stack_rows(txt_slot), tau);
      loss = tape.scale(tape.add(loss, slot_loss), 0.5);
    }
    if (!std::isfinite(loss.at(0)))
      throw ContractError("pretrain diverged at step " + std::to_string(step));
    GradientMap grads = tape.backward(loss);

    std::vector<Tensor*> masters = detail::collect_tensors(pair.text);
    auto vision_masters = detail::collect_tensors(pair.vision);
    masters.insert(masters.end(), vision_masters.begin(), vision_masters.end());
    std::vector<Tensor> taped;
    for (Tensor* t : detail::collect_tensors(text)) taped.push_back(*t);
    for (Tensor* t : detail::collect_tensors(vision)) taped.push_back(*t);
    sgd.step(masters, taped, grads);
  }
  return pair;
}

/// Lazily pretrains and caches one frozen encoder pair per seed.
class EncoderProvider {
 public:
  EncoderProvider(const Dataset& ds, const EncoderConfig& text_cfg,
                  const EncoderConfig& vision_cfg, const PretrainConfig& pt, Temperature tau)
      : ds_(ds), text_cfg_(text_cfg), vision_cfg_(vision_cfg), pretrain_(pt), tau_(tau) {}

  const EncoderPair& get(std::uint64_t seed) {
    auto it = cache_.find(seed);
    if (it == cache_.end()) {
      it = cache_
               .emplace(seed,
                        pretrain_encoders(ds_, text_cfg_, vision_cfg_, pretrain_, tau_, seed))
               .first;
    }
    return it->second;
  }

 private:
  const Dataset& ds_;
  EncoderConfig text_cfg_;
  EncoderConfig vision_cfg_;
  PretrainConfig pretrain_;
  Temperature tau_;
  std::map<std::uint64_t, EncoderPair> cache_;
};

// ---- evaluation ------------------------------------------------------------------

/// Fraction of split samples whose argmax class matches the label. Ties
/// resolve to the lowest class index.
inline double evaluate_split(const MethodBank& bank, const EncoderPair& encoders,
                             const Dataset& ds, const std::vector<Sample>& split,
                             Temperature tau) {
  if (split.empty()) throw ContractError("evaluate: empty split");
  const auto class_ids = method_class_ids(bank.method, ds);

  Tape tape;
  EncoderParams text = register_on_tape(tape, encoders.text, false);
  EncoderParams vision = register_on_tape(tape, encoders.vision, false);
  MethodBank frozen = register_method_bank(tape, bank, false);
  PromptSchedules schedules = method_schedules(tape, frozen, class_ids.size(), 1);

  std::vector<Tensor> class_embeds;
  class_embeds.reserve(class_ids.size());
  for (const auto& ids : class_ids)
    class_embeds.push_back(encode_text(tape, text, ids, schedules.text).detached());

  std::size_t correct = 0;
  for (const Sample& sample : split) {
    Tensor features = encode_image(tape, vision, sample.patches, schedules.vision);
    const std::vector<double> probs = predict_probs(features.detached(), class_embeds, tau);
    if (argmax_class(probs) == sample.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

// ---- training --------------------------------------------------------------------

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::vector<double> epoch_losses;
  double accuracy = 0.0;
  bool diverged = false;
  MethodBank bank;  // trained state (used by shift evaluation / weight export)
};

struct ShotResult {
  std::size_t shot = 0;
  std::vector<SeedOutcome> seeds;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  std::size_t trainable_params = 0;
};

/// Train one (method, shot) setting across every configured seed.
inline ShotResult train_shot(const RunConfig& rc, const Dataset& ds, EncoderProvider& provider,
                             std::size_t shot) {
  ShotResult result;
  result.shot = shot;
  const auto template_ids = template_token_ids(ds.spec.vocab_size);
  const auto class_ids = method_class_ids(rc.method, ds);
  const std::size_t d_vision = rc.vision_encoder.model_dim;

  for (std::uint64_t seed : rc.seeds) {
    SeedOutcome outcome;
    outcome.seed = seed;
    const EncoderPair& encoders = provider.get(seed);
    MethodBank bank = init_method_bank(rc.method, rc.prompt, encoders.text, d_vision,
                                       template_ids, mix_seed(seed, 0x05edULL));
    result.trainable_params = bank.trainable_params(rc.text_encoder.model_dim, d_vision);

    if (rc.method != Method::ZeroShot) {
      FewShotTask task = sample_few_shot(ds, shot, seed);
      SgdMomentum sgd(rc.learning_rate, rc.momentum, rc.grad_clip);
      Rng shuffle_rng(mix_seed(seed, 0x54f1ULL));

      for (std::size_t epoch = 0; epoch < rc.epochs && !outcome.diverged; ++epoch) {
        std::vector<std::size_t> order = task.train_indices;
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += rc.batch_size) {
          const std::size_t stop = std::min(order.size(), start + rc.batch_size);
          FewShotBatch batch;
          for (std::size_t i = start; i < stop; ++i) {
            batch.patch_grids.push_back(ds.train[order[i]].patches);
            batch.labels.push_back(ds.train[order[i]].label);
          }
          Tape tape;
          EncoderParams text = register_on_tape(tape, encoders.text, false);
          EncoderParams vision = register_on_tape(tape, encoders.vision, false);
          MethodBank taped = register_method_bank(tape, bank, true);
          PromptSchedules schedules =
              method_schedules(tape, taped, class_ids.size(), batch.patch_grids.size());
          Tensor loss =
              classification_loss(tape, batch, class_ids, text, vision, schedules, rc.tau);
          if (!std::isfinite(loss.at(0))) {
            outcome.diverged = true;
            break;
          }
          GradientMap grads = tape.backward(loss);
          std::vector<Tensor> taped_leaves;
          for (Tensor* t : taped.leaves()) taped_leaves.push_back(*t);
          sgd.step(bank.leaves(), taped_leaves, grads);
          loss_sum += loss.at(0);
          ++n_batches;
        }
        if (!outcome.diverged)
          outcome.epoch_losses.push_back(loss_sum / static_cast<double>(n_batches));
      }
    }

    if (!outcome.diverged)
      outcome.accuracy = evaluate_split(bank, encoders, ds, ds.test, rc.tau);
    outcome.bank = std::move(bank);
    result.seeds.push_back(std::move(outcome));
  }

  std::vector<double> accs;
  for (const SeedOutcome& o : result.seeds)
    if (!o.diverged) accs.push_back(o.accuracy);
  result.mean_accuracy = mean_of(accs);
  result.std_accuracy = stddev_of(accs);
  return result;
}

inline std::string render_train_report(const RunConfig& rc, const ShotResult& sr) {
  ReportDoc doc("training run");
  for (const auto& [key, value] : rc.echo) doc.kv(key, value);
  doc.kv("shot", std::to_string(sr.shot));

  doc.begin_table("epochs", {"seed", "epoch", "train_loss"});
  for (const SeedOutcome& o : sr.seeds)
    for (std::size_t e = 0; e < o.epoch_losses.size(); ++e)
      doc.row({std::to_string(o.seed), std::to_string(e + 1), fmt_double(o.epoch_losses[e])});

  doc.begin_table("seeds", {"seed", "test_accuracy", "status"});
  for (const SeedOutcome& o : sr.seeds)
    doc.row({std::to_string(o.seed), fmt_double(o.accuracy), o.diverged ? "diverged" : "ok"});

  doc.begin_table("summary", {"key", "value"});
  doc.row({"mean_accuracy", fmt_double(sr.mean_accuracy)});
  doc.row({"std_accuracy", fmt_double(sr.std_accuracy)});
  doc.row({"trainable_params", std::to_string(sr.trainable_params)});
  doc.row({"seeds_ok", std::to_string(std::count_if(sr.seeds.begin(), sr.seeds.end(),
                                                    [](const SeedOutcome& o) {
                                                      return !o.diverged;
                                                    }))});

  doc.machine_line("RESULT command=train method=" + to_string(rc.method) +
                   " shot=" + std::to_string(sr.shot) + " mean_acc=" + fmt_fixed(sr.mean_accuracy) +
                   " std_acc=" + fmt_fixed(sr.std_accuracy) +
                   " params=" + std::to_string(sr.trainable_params));
  return doc.render();
}

/// Full sweep over the configured shots. Returns results and writes one
/// report per shot into out_dir (if non-empty).
inline std::vector<ShotResult> train(const RunConfig& rc, const Dataset& ds,
                                     EncoderProvider& provider,
                                     const std::filesystem::path& out_dir) {
  std::vector<ShotResult> results;
  for (std::size_t shot : rc.shots) {
    ShotResult sr = train_shot(rc, ds, provider, shot);
    if (!out_dir.empty()) {
      const std::string name =
          "train_" + to_string(rc.method) + "_s" + std::to_string(shot) + ".txt";
      atomic_write_file(out_dir / name, render_train_report(rc, sr));
    }
    if (!rc.save_weights_dir.empty()) {
      for (const SeedOutcome& o : sr.seeds) {
        const EncoderPair& encoders = provider.get(o.seed);
        std::vector<WeightSection> sections{encoder_section("encoder.text", encoders.text),
                                            encoder_section("encoder.vision", encoders.vision)};
        if (o.bank.method == Method::Dcp)
          sections.push_back(bank_section(o.bank.dcp, rc.text_encoder.model_dim,
                                          rc.vision_encoder.model_dim));
        const std::string name = "weights_" + to_string(rc.method) + "_s" +
                                 std::to_string(shot) + "_seed" + std::to_string(o.seed) +
                                 ".dcpw";
        save_weight_container(std::filesystem::path(rc.save_weights_dir) / name, sections);
      }
    }
    results.push_back(std::move(sr));
  }
  return results;
}

// ---- ablations ---------------------------------------------------------------------

/// Feature-fusion comparison: identical runs that differ only in fusion mode.
inline std::string ablate_fusion(const RunConfig& base, const Dataset& ds,
                                 EncoderProvider& provider) {
  ReportDoc doc("feature fusion ablation");
  for (const auto& [key, value] : base.echo) doc.kv(key, value);
  doc.begin_table("fusion", {"mode", "shot", "mean_accuracy", "std_accuracy",
                             "trainable_params"});
  for (FusionMode mode : {FusionMode::Avg, FusionMode::Max, FusionMode::First}) {
    RunConfig rc = base;
    rc.method = Method::Dcp;
    rc.prompt.fusion = mode;
    rc.echo["method"] = to_string(rc.method);
    rc.echo["prompt.fusion"] = to_string(mode);
    for (std::size_t shot : rc.shots) {
      ShotResult sr = train_shot(rc, ds, provider, shot);
      doc.row({to_string(mode), std::to_string(shot), fmt_double(sr.mean_accuracy),
               fmt_double(sr.std_accuracy), std::to_string(sr.trainable_params)});
      doc.machine_line("RESULT command=ablate-fusion mode=" + to_string(mode) +
                       " shot=" + std::to_string(shot) +
                       " mean_acc=" + fmt_fixed(sr.mean_accuracy));
    }
  }
  return doc.render();
}

/// Parameter-sharing comparison: paired accuracies plus trainable counts of
/// the shared and unshared variants.
inline std::string ablate_param_sharing(const RunConfig& base, const Dataset& ds,
                                        EncoderProvider& provider) {
  ReportDoc doc("parameter sharing ablation");
  for (const auto& [key, value] : base.echo) doc.kv(key, value);
  doc.begin_table("param_sharing", {"variant", "shot", "mean_accuracy", "std_accuracy",
                                    "trainable_params"});
  for (bool share : {true, false}) {
    RunConfig rc = base;
    rc.method = Method::Dcp;
    rc.prompt.share_params = share;
    rc.echo["method"] = to_string(rc.method);
    rc.echo["prompt.share"] = share ? "true" : "false";
    for (std::size_t shot : rc.shots) {
      ShotResult sr = train_shot(rc, ds, provider, shot);
      doc.row({share ? "with_sharing" : "without_sharing", std::to_string(shot),
               fmt_double(sr.mean_accuracy), fmt_double(sr.std_accuracy),
               std::to_string(sr.trainable_params)});
      doc.machine_line(std::string("RESULT command=ablate-ps variant=") +
                       (share ? "with_sharing" : "without_sharing") +
                       " shot=" + std::to_string(shot) +
                       " mean_acc=" + fmt_fixed(sr.mean_accuracy) +
                       " params=" + std::to_string(sr.trainable_params));
    }
  }
  return doc.render();
}

// ---- domain shift -------------------------------------------------------------------

struct ShiftLevel {
  double angle_deg = 0.0;
  double noise_mult = 1.0;
};

/// Train on the source dataset, then evaluate the frozen result on a ladder
/// of shifted variants. The zero-shift row equals the source accuracy
/// exactly; the summary reports the mean over the non-identity targets.
inline std::string domain_shift_eval(const RunConfig& rc, const Dataset& source,
                                     EncoderProvider& provider, std::size_t shot,
                                     const std::vector<ShiftLevel>& levels) {
  if (levels.empty()) throw ConfigError("shift-eval: no shift levels");
  ShotResult trained = train_shot(rc, source, provider, shot);

  ReportDoc doc("domain shift evaluation");
  for (const auto& [key, value] : rc.echo) doc.kv(key, value);
  doc.kv("shot", std::to_string(shot));

  doc.begin_table("source", {"seed", "test_accuracy"});
  std::vector<double> source_accs;
  for (const SeedOutcome& o : trained.seeds) {
    doc.row({std::to_string(o.seed), fmt_double(o.accuracy)});
    source_accs.push_back(o.accuracy);
  }

  doc.begin_table("shifts", {"angle_deg", "noise_mult", "mean_accuracy", "std_accuracy"});
  std::vector<double> ood_means;
  for (const ShiftLevel& level : levels) {
    Dataset shifted = apply_shift(source, ShiftSpec{level.angle_deg, level.noise_mult});
    std::vector<double> accs;
    for (const SeedOutcome& o : trained.seeds) {
      if (o.diverged) continue;
      accs.push_back(
          evaluate_split(o.bank, provider.get(o.seed), shifted, shifted.test, rc.tau));
    }
    const double mean = mean_of(accs);
    doc.row({fmt_double(level.angle_deg), fmt_double(level.noise_mult), fmt_double(mean),
             fmt_double(stddev_of(accs))});
    if (!ShiftSpec{level.angle_deg, level.noise_mult}.is_identity()) ood_means.push_back(mean);
  }

  doc.begin_table("summary", {"key", "value"});
  doc.row({"source_mean_accuracy", fmt_double(mean_of(source_accs))});
  doc.row({"ood_average", fmt_double(mean_of(ood_means))});
  doc.machine_line("RESULT command=shift-eval method=" + to_string(rc.method) +
                   " source_acc=" + fmt_fixed(mean_of(source_accs)) +
                   " ood_average=" + fmt_fixed(mean_of(ood_means)));
  return doc.render();
}

}  // namespace dcp
