#pragma once

#include <cstddef>
#include <vector>

#include "dcp/encoder.hpp"
#include "dcp/errors.hpp"
#include "dcp/prompts.hpp"
#include "dcp/tape.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

/// Softmax temperature applied to cosine logits. Fixed (not trainable);
/// 0.07 is the conventional converged contrastive value.
struct Temperature {
  double value = 0.07;
  void validate() const {
    if (!(value > 0.0)) throw ConfigError("temperature must be positive");
  }
};

/// Cosine-similarity logits between row sets, scaled by 1/tau. Both sides
/// are normalized internally; a zero-norm row raises DegenerateInputError.
inline Tensor cosine_logits(Tape& tape, const Tensor& features, const Tensor& class_embeds,
                            Temperature tau) {
  tau.validate();
  Tensor f = tape.l2_normalize_rows(features);
  Tensor w = tape.l2_normalize_rows(class_embeds);
  return tape.scale(tape.matmul(f, tape.transpose(w)), 1.0 / tau.value);
}

/// Probability that a feature vector belongs to each class:
/// p_y = exp(cos(x, w_y)/tau) / sum_i exp(cos(x, w_i)/tau).
inline std::vector<double> predict_probs(const Tensor& x, const std::vector<Tensor>& class_embeds,
                                         Temperature tau) {
  if (class_embeds.empty()) throw ContractError("predict_probs: no classes");
  Tape tape;
  Tensor features = tape.stack_rows({tape.constant(x.detached())});
  std::vector<Tensor> rows;
  rows.reserve(class_embeds.size());
  for (const Tensor& w : class_embeds) rows.push_back(tape.constant(w.detached()));
  Tensor logits = cosine_logits(tape, features, tape.stack_rows(rows), tau);
  return tape.softmax_rows(logits).values();
}

/// Deterministic argmax: ties resolve to the lowest class index.
inline std::size_t argmax_class(const std::vector<double>& probs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i)
    if (probs[i] > probs[best]) best = i;
  return best;
}

/// One training batch: per-sample patch grids with integer labels.
struct FewShotBatch {
  std::vector<Tensor> patch_grids;
  std::vector<std::size_t> labels;
};

/// Shared scoring path: encodes every class text and every batch image with
/// the given prompt schedules, then returns the mean cross entropy of the
/// cosine logits. Used by all prompt-tuning variants.
inline Tensor classification_loss(Tape& tape, const FewShotBatch& batch,
                                  const std::vector<std::vector<std::size_t>>& class_token_ids,
                                  const EncoderParams& text_enc, const EncoderParams& vision_enc,
                                  const PromptSchedules& schedules, Temperature tau) {
  if (batch.patch_grids.empty()) throw ContractError("classification_loss: empty batch");
  if (batch.patch_grids.size() != batch.labels.size())
    throw ContractError("classification_loss: batch size / label count mismatch");
  const std::size_t k = class_token_ids.size();
  for (std::size_t label : batch.labels)
    if (label >= k) throw IndexError("classification_loss: label out of range");

  std::vector<Tensor> class_rows;
  class_rows.reserve(k);
  for (const auto& ids : class_token_ids)
    class_rows.push_back(encode_text(tape, text_enc, ids, schedules.text));
  std::vector<Tensor> feature_rows;
  feature_rows.reserve(batch.patch_grids.size());
  for (const Tensor& patches : batch.patch_grids)
    feature_rows.push_back(encode_image(tape, vision_enc, patches, schedules.vision));

  Tensor logits = cosine_logits(tape, tape.stack_rows(feature_rows), tape.stack_rows(class_rows),
                                tau);
  return tape.cross_entropy_with_logits(logits, batch.labels);
}

/// The deep cross-modal objective: expand the first-layer prompts over the
/// class/batch axes, fuse them back, roll the cross-modal chain, and score.
/// Differentiable to the prompt bank leaves only when the encoders were
/// registered frozen.
inline Tensor few_shot_loss(Tape& tape, const FewShotBatch& batch,
                            const std::vector<std::vector<std::size_t>>& class_token_ids,
                            const PromptBank& bank, const EncoderParams& text_enc,
                            const EncoderParams& vision_enc, Temperature tau) {
  PromptSchedules schedules =
      dcp_schedules(tape, bank, class_token_ids.size(), batch.patch_grids.size());
  return classification_loss(tape, batch, class_token_ids, text_enc, vision_enc, schedules, tau);
}

/// Symmetric pairwise contrastive loss over matched (image, text) rows.
/// Internal to encoder warm-up; not a tuned deliverable.
inline Tensor contrastive_pair_loss(Tape& tape, const Tensor& image_features,
                                    const Tensor& text_features, Temperature tau) {
  if (image_features.shape != text_features.shape)
    throw ContractError("contrastive_pair_loss: feature shapes differ");
  const std::size_t b = image_features.shape[0];
  std::vector<std::size_t> diagonal(b);
  for (std::size_t i = 0; i < b; ++i) diagonal[i] = i;
  Tensor logits = cosine_logits(tape, image_features, text_features, tau);
  Tensor image_to_text = tape.cross_entropy_with_logits(logits, diagonal);
  Tensor text_to_image = tape.cross_entropy_with_logits(tape.transpose(logits), diagonal);
  return tape.scale(tape.add(image_to_text, text_to_image), 0.5);
}

}  // namespace dcp
