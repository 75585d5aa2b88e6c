#pragma once

#include <string>
#include <vector>

#include "dcp/encoder.hpp"
#include "dcp/gradcheck.hpp"
#include "dcp/harness.hpp"
#include "dcp/objective.hpp"
#include "dcp/prompts.hpp"
#include "dcp/report.hpp"
#include "dcp/rng.hpp"
#include "dcp/synthdata.hpp"

namespace dcp {

inline constexpr double kAuditTolerance = 1e-4;

namespace detail {

/// Project a differentiable output to a scalar with fixed random weights so
/// every output element influences the loss differently.
inline Tensor weighted_sum(Tape& tape, const Tensor& y, const Tensor& weights) {
  return tape.sum(tape.mul(y, tape.constant(weights)));
}

inline Tensor rand_t(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = scale * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

inline void fold(FdCheckResult& into, const FdCheckResult& piece) {
  into.max_rel_error = std::max(into.max_rel_error, piece.max_rel_error);
  into.comparisons += piece.comparisons;
}

template <typename MakeLeaves, typename MakeLoss>
FdCheckResult repeat_check(const std::string& name, std::size_t instances, Rng& rng,
                           MakeLeaves make_leaves, MakeLoss make_loss) {
  FdCheckResult total{name};
  for (std::size_t i = 0; i < instances; ++i) {
    std::vector<Tensor> leaves = make_leaves(rng);
    ScalarFn fn = make_loss(rng, leaves);
    fold(total, fd_check(name, leaves, fn));
  }
  return total;
}

}  // namespace detail

/// Finite-difference audit of every differentiable operation, both encoders,
/// the cross-modal prompt step, and the end-to-end deep prompting loss on a
/// 2-class / 4-sample toy problem.
inline std::vector<FdCheckResult> gradcheck_suite(std::size_t instances_per_op = 10) {
  using detail::rand_t;
  using detail::weighted_sum;
  std::vector<FdCheckResult> results;
  Rng rng(0xabcdef12345ULL);

  auto simple = [&](const std::string& name, Shape shape, auto op) {
    results.push_back(detail::repeat_check(
        name, instances_per_op, rng,
        [shape](Rng& r) { return std::vector<Tensor>{rand_t(shape, r)}; },
        [op](Rng& r, const std::vector<Tensor>&) -> ScalarFn {
          // weight shape is determined lazily from the op output
          auto seed = r.next_u64();
          return [op, seed](Tape& t, const std::vector<Tensor>& leaves) {
            Tensor y = op(t, leaves[0]);
            Rng wr(seed);
            return weighted_sum(t, y, rand_t(y.shape, wr));
          };
        }));
  };

  simple("numerics.transpose", {3, 4},
         [](Tape& t, const Tensor& a) { return t.transpose(a); });
  simple("numerics.reshape", {3, 4},
         [](Tape& t, const Tensor& a) { return t.reshape(a, {2, 6}); });
  simple("numerics.scale", {2, 5},
         [](Tape& t, const Tensor& a) { return t.scale(a, -1.7); });
  simple("numerics.gelu", {4, 3}, [](Tape& t, const Tensor& a) { return t.gelu(a); });
  simple("numerics.softmax_rows", {3, 5},
         [](Tape& t, const Tensor& a) { return t.softmax_rows(a); });
  simple("numerics.l2_normalize_rows", {3, 4},
         [](Tape& t, const Tensor& a) { return t.l2_normalize_rows(a); });
  simple("numerics.slice_axis", {4, 6},
         [](Tape& t, const Tensor& a) { return t.slice_axis(a, 1, 1, 4); });
  simple("numerics.reduce_mean_axis", {3, 2, 4},
         [](Tape& t, const Tensor& a) { return t.reduce_mean_axis(a, 0); });
  simple("numerics.reduce_max_axis", {3, 2, 4},
         [](Tape& t, const Tensor& a) { return t.reduce_max_axis(a, 0); });
  simple("numerics.tile_leading", {2, 3},
         [](Tape& t, const Tensor& a) { return t.tile_leading(a, 4); });
  simple("numerics.sum", {3, 3}, [](Tape& t, const Tensor& a) { return t.sum(a); });
  simple("numerics.embed_rows", {6, 4}, [](Tape& t, const Tensor& a) {
    return t.embed_rows(a, {0, 3, 3, 5});
  });

  results.push_back(detail::repeat_check(
      "numerics.matmul", instances_per_op, rng,
      [](Rng& r) { return std::vector<Tensor>{rand_t({3, 4}, r), rand_t({4, 2}, r)}; },
      [](Rng& r, const std::vector<Tensor>&) -> ScalarFn {
        auto seed = r.next_u64();
        return [seed](Tape& t, const std::vector<Tensor>& leaves) {
          Tensor y = t.matmul(leaves[0], leaves[1]);
          Rng wr(seed);
          return weighted_sum(t, y, rand_t(y.shape, wr));
        };
      }));

  for (const char* opname : {"add", "sub", "mul"}) {
    const std::string label = std::string("numerics.") + opname + "_broadcast";
    results.push_back(detail::repeat_check(
        label, instances_per_op, rng,
        [](Rng& r) { return std::vector<Tensor>{rand_t({3, 2, 4}, r), rand_t({4}, r)}; },
        [opname](Rng& r, const std::vector<Tensor>&) -> ScalarFn {
          auto seed = r.next_u64();
          std::string op = opname;
          return [seed, op](Tape& t, const std::vector<Tensor>& leaves) {
            Tensor y = op == "add"   ? t.add(leaves[0], leaves[1])
                       : op == "sub" ? t.sub(leaves[0], leaves[1])
                                     : t.mul(leaves[0], leaves[1]);
            Rng wr(seed);
            return weighted_sum(t, y, rand_t(y.shape, wr));
          };
        }));
  }

  results.push_back(detail::repeat_check(
      "numerics.concat_axis", instances_per_op, rng,
      [](Rng& r) { return std::vector<Tensor>{rand_t({2, 3}, r), rand_t({2, 2}, r)}; },
      [](Rng& r, const std::vector<Tensor>&) -> ScalarFn {
        auto seed = r.next_u64();
        return [seed](Tape& t, const std::vector<Tensor>& leaves) {
          Tensor y = t.concat_axis({leaves[0], leaves[1]}, 1);
          Rng wr(seed);
          return weighted_sum(t, y, rand_t(y.shape, wr));
        };
      }));

  results.push_back(detail::repeat_check(
      "numerics.stack_rows", instances_per_op, rng,
      [](Rng& r) { return std::vector<Tensor>{rand_t({5}, r), rand_t({5}, r)}; },
      [](Rng& r, const std::vector<Tensor>&) -> ScalarFn {
        auto seed = r.next_u64();
        return [seed](Tape& t, const std::vector<Tensor>& leaves) {
          Tensor y = t.stack_rows(leaves);
          Rng wr(seed);
          return weighted_sum(t, y, rand_t(y.shape, wr));
        };
      }));

  results.push_back(detail::repeat_check(
      "numerics.layer_norm", instances_per_op, rng,
      [](Rng& r) {
        return std::vector<Tensor>{rand_t({3, 6}, r), rand_t({6}, r), rand_t({6}, r)};
      },
      [](Rng& r, const std::vector<Tensor>&) -> ScalarFn {
        auto seed = r.next_u64();
        return [seed](Tape& t, const std::vector<Tensor>& leaves) {
          Tensor y = t.layer_norm(leaves[0], leaves[1], leaves[2]);
          Rng wr(seed);
          return weighted_sum(t, y, rand_t(y.shape, wr));
        };
      }));

  results.push_back(detail::repeat_check(
      "numerics.cross_entropy_with_logits", instances_per_op, rng,
      [](Rng& r) { return std::vector<Tensor>{rand_t({4, 5}, r)}; },
      [](Rng& r, const std::vector<Tensor>&) -> ScalarFn {
        std::vector<std::size_t> labels(4);
        for (auto& l : labels) l = r.below(5);
        return [labels](Tape& t, const std::vector<Tensor>& leaves) {
          return t.cross_entropy_with_logits(leaves[0], labels);
        };
      }));

  // ---- fusion ------------------------------------------------------------

  for (FusionMode mode : {FusionMode::Avg, FusionMode::Max, FusionMode::First}) {
    results.push_back(detail::repeat_check(
        "fuse_batch." + to_string(mode), instances_per_op, rng,
        [](Rng& r) { return std::vector<Tensor>{rand_t({3, 2, 4}, r), rand_t({5, 2, 3}, r)}; },
        [mode](Rng& r, const std::vector<Tensor>&) -> ScalarFn {
          auto seed = r.next_u64();
          return [mode, seed](Tape& t, const std::vector<Tensor>& leaves) {
            auto [ft, fv] = fuse_batch(t, leaves[0], leaves[1], mode);
            Rng wr(seed);
            Tensor a = weighted_sum(t, ft, rand_t(ft.shape, wr));
            Tensor b = weighted_sum(t, fv, rand_t(fv.shape, wr));
            return t.add(a, b);
          };
        }));
  }

  // ---- cross-modal prompt step ---------------------------------------------

  {
    PromptConfig cfg;
    cfg.length = 3;
    cfg.depth = 2;
    cfg.d_attn = 8;
    cfg.n_heads = 2;
    cfg.residual = true;
    Rng init_rng(0x777ULL);
    const CmpaParams block = init_cmpa_block(5, 7, cfg.d_attn, init_rng);

    results.push_back(detail::repeat_check(
        "cmpa.step_inputs", instances_per_op, rng,
        [](Rng& r) { return std::vector<Tensor>{rand_t({3, 5}, r), rand_t({3, 7}, r)}; },
        [cfg, block](Rng& r, const std::vector<Tensor>&) -> ScalarFn {
          auto seed = r.next_u64();
          return [cfg, block, seed](Tape& t, const std::vector<Tensor>& leaves) {
            auto [pt, pv] = cmpa_step(t, leaves[0], leaves[1], &block, cfg);
            Rng wr(seed);
            Tensor a = weighted_sum(t, pt, rand_t(pt.shape, wr));
            Tensor b = weighted_sum(t, pv, rand_t(pv.shape, wr));
            return t.add(a, b);
          };
        }));

    // Parameters: the lifted leaves replace the block projections.
    results.push_back(detail::repeat_check(
        "cmpa.step_params", 3, rng,
        [](Rng& r) {
          return std::vector<Tensor>{rand_t({7, 8}, r), rand_t({5, 8}, r), rand_t({5, 8}, r),
                                     rand_t({8, 5}, r), rand_t({5, 8}, r), rand_t({7, 8}, r),
                                     rand_t({7, 8}, r), rand_t({8, 7}, r)};
        },
        [cfg](Rng& r, const std::vector<Tensor>&) -> ScalarFn {
          auto seed = r.next_u64();
          auto pt_vals = rand_t({3, 5}, r);
          auto pv_vals = rand_t({3, 7}, r);
          return [cfg, seed, pt_vals, pv_vals](Tape& t, const std::vector<Tensor>& leaves) {
            CmpaParams blk;
            blk.wq_text = leaves[0];
            blk.wk_text = leaves[1];
            blk.wv_text = leaves[2];
            blk.wo_text = leaves[3];
            blk.wq_vision = leaves[4];
            blk.wk_vision = leaves[5];
            blk.wv_vision = leaves[6];
            blk.wo_vision = leaves[7];
            auto [pt, pv] = cmpa_step(t, t.constant(pt_vals), t.constant(pv_vals), &blk, cfg);
            Rng wr(seed);
            Tensor a = weighted_sum(t, pt, rand_t(pt.shape, wr));
            Tensor b = weighted_sum(t, pv, rand_t(pv.shape, wr));
            return t.add(a, b);
          };
        }));
  }

  // ---- encoders ------------------------------------------------------------

  EncoderConfig text_cfg;
  text_cfg.n_layers = 2;
  text_cfg.model_dim = 8;
  text_cfg.n_heads = 2;
  text_cfg.ffn_dim = 16;
  text_cfg.max_seq = 16;
  text_cfg.embed_dim = 6;
  text_cfg.vocab_size = 16;
  EncoderConfig vision_cfg = text_cfg;
  vision_cfg.vocab_size = 0;
  vision_cfg.patch_dim = 5;

  const EncoderParams text_enc = init_encoder(text_cfg, 11);
  const EncoderParams vision_enc = init_encoder(vision_cfg, 12);

  results.push_back(detail::repeat_check(
      "encoders.encode_text_prompt_grads", 3, rng,
      [](Rng& r) { return std::vector<Tensor>{rand_t({2, 8}, r, 0.1), rand_t({2, 8}, r, 0.1)}; },
      [&text_enc](Rng& r, const std::vector<Tensor>&) -> ScalarFn {
        auto seed = r.next_u64();
        return [&text_enc, seed](Tape& t, const std::vector<Tensor>& leaves) {
          EncoderParams enc = register_on_tape(t, text_enc, false);
          Tensor y = encode_text(t, enc, {4, 7, 3}, {leaves[0], leaves[1]});
          Rng wr(seed);
          return weighted_sum(t, y, rand_t(y.shape, wr));
        };
      }));

  results.push_back(detail::repeat_check(
      "encoders.encode_image_prompt_grads", 3, rng,
      [](Rng& r) { return std::vector<Tensor>{rand_t({2, 8}, r, 0.1), rand_t({2, 8}, r, 0.1)}; },
      [&vision_enc](Rng& r, const std::vector<Tensor>&) -> ScalarFn {
        auto seed = r.next_u64();
        auto patches = rand_t({4, 5}, r);
        return [&vision_enc, seed, patches](Tape& t, const std::vector<Tensor>& leaves) {
          EncoderParams enc = register_on_tape(t, vision_enc, false);
          Tensor y = encode_image(t, enc, t.constant(patches), {leaves[0], leaves[1]});
          Rng wr(seed);
          return weighted_sum(t, y, rand_t(y.shape, wr));
        };
      }));

  // Weight gradients, probed along random directions per tensor (covers the
  // contrastive warm-up path, where every encoder weight trains).
  {
    auto run_directional = [&](const std::string& name, const EncoderParams& enc, bool text) {
      std::vector<Tensor> leaves;
      for_each_param(enc, [&](const std::string&, const Tensor& t) {
        leaves.push_back(t.detached());
      });
      Rng dir_rng(0xd1a5ULL);
      Tensor patches = rand_t({4, 5}, dir_rng);
      const std::uint64_t wseed = 0x3331ULL;
      EncoderConfig cfg = enc.config;
      ScalarFn fn = [cfg, text, patches, wseed](Tape& t, const std::vector<Tensor>& lifted) {
        EncoderParams rebuilt;
        rebuilt.config = cfg;
        rebuilt.layers.resize(cfg.n_layers);
        std::size_t i = 0;
        for_each_param(rebuilt, [&](const std::string&, Tensor& slot) { slot = lifted[i++]; });
        Tensor y = text ? encode_text(t, rebuilt, {4, 7, 3}, {})
                        : encode_image(t, rebuilt, t.constant(patches), {});
        Rng wr(wseed);
        return detail::weighted_sum(t, y, rand_t(y.shape, wr));
      };
      results.push_back(fd_check_directional(name, leaves, fn, dir_rng, 2));
    };
    run_directional("encoders.text_weight_grads", text_enc, true);
    run_directional("encoders.vision_weight_grads", vision_enc, false);
  }

  // ---- end-to-end deep prompting loss (2 classes, 4 samples) -----------------

  {
    PromptConfig pcfg;
    pcfg.length = 2;
    pcfg.depth = 2;
    pcfg.d_attn = 8;
    pcfg.n_heads = 2;
    pcfg.share_params = true;
    const PromptBank bank =
        init_prompt_bank(pcfg, text_enc.token_table, {4, 5}, vision_cfg.model_dim, 99);

    std::vector<Tensor> leaves;
    for_each_param(bank, [&](const std::string&, const Tensor& t) {
      leaves.push_back(t.detached());
    });

    Rng data_rng(0xfeedULL);
    FewShotBatch batch;
    for (std::size_t i = 0; i < 4; ++i) {
      batch.patch_grids.push_back(rand_t({4, 5}, data_rng));
      batch.labels.push_back(i % 2);
    }
    const std::vector<std::vector<std::size_t>> class_ids{{6, 9}, {10, 12}};
    PromptBank skeleton = bank;

    ScalarFn fn = [&text_enc, &vision_enc, skeleton, batch, class_ids](
                      Tape& t, const std::vector<Tensor>& lifted) {
      PromptBank rebuilt = skeleton;
      std::size_t i = 0;
      for_each_param(rebuilt, [&](const std::string&, Tensor& slot) { slot = lifted[i++]; });
      EncoderParams text = register_on_tape(t, text_enc, false);
      EncoderParams vision = register_on_tape(t, vision_enc, false);
      return few_shot_loss(t, batch, class_ids, rebuilt, text, vision, Temperature{0.07});
    };
    results.push_back(fd_check("end_to_end.dcp_loss", leaves, fn));
  }

  return results;
}

inline bool audit_passed(const std::vector<FdCheckResult>& results,
                         double tol = kAuditTolerance) {
  for (const FdCheckResult& r : results)
    if (!r.pass(tol)) return false;
  return true;
}

inline std::string render_audit_report(const std::vector<FdCheckResult>& results,
                                       double tol = kAuditTolerance) {
  ReportDoc doc("gradient audit");
  doc.kv("tolerance", fmt_double(tol));
  doc.kv("step", fmt_double(1e-5));
  doc.begin_table("checks", {"op", "max_rel_error", "comparisons", "status"});
  for (const FdCheckResult& r : results)
    doc.row({r.name, fmt_double(r.max_rel_error), std::to_string(r.comparisons),
             r.pass(tol) ? "pass" : "FAIL"});
  doc.machine_line(std::string("RESULT command=gradcheck status=") +
                   (audit_passed(results, tol) ? "pass" : "fail"));
  return doc.render();
}

}  // namespace dcp
