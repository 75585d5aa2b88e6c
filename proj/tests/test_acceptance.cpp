// Acceptance gate. Each test case checks one release criterion and prints a
// single pass/fail line; run the binary directly (or via ctest) to see them.

#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dcp/audit.hpp"
#include "dcp/harness.hpp"
#include "dcp/serialize.hpp"
#include "dcp/synthdata.hpp"
#include "oracles.hpp"

using dcp::Dataset;
using dcp::DatasetSpec;
using dcp::KeyValueConfig;
using dcp::Method;
using dcp::RunConfig;

namespace {

void report(const std::string& name, bool pass, const std::string& detail = "") {
  std::printf("ACCEPTANCE %-24s %s%s%s\n", name.c_str(), pass ? "PASS" : "FAIL",
              detail.empty() ? "" : "  -- ", detail.c_str());
  std::fflush(stdout);
}

struct Stopwatch {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

std::filesystem::path temp_dir(const char* tag) {
  auto dir = std::filesystem::temp_directory_path() / (std::string("dcp_accept_") + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

// The default synthetic task of the learning-signal experiment, shared by
// several criteria below.
const Dataset& default_dataset() {
  static Dataset ds = dcp::generate_dataset(DatasetSpec{}, 0);
  return ds;
}

int run_cli(const std::filesystem::path& cwd, const std::string& args) {
  const std::string cmd = "cd " + cwd.string() + " && " + DCP_CLI_PATH + " " + args +
                          " >/dev/null 2>&1";
  return std::system(cmd.c_str());
}

}  // namespace

TEST_CASE("criterion: gradient audit") {
  Stopwatch timer;
  const auto results = dcp::gradcheck_suite(10);
  const double elapsed = timer.seconds();

  double worst = 0.0;
  for (const auto& r : results) worst = std::max(worst, r.max_rel_error);
  const bool pass = dcp::audit_passed(results) && elapsed < 60.0;
  report("gradient-audit", pass,
         "max_rel=" + fmt(worst) + " checks=" + std::to_string(results.size()) +
             " runtime=" + fmt(elapsed) + "s");
  CHECK(dcp::audit_passed(results));
  CHECK(elapsed < 60.0);
}

TEST_CASE("criterion: oracle equivalence") {
  dcp::Rng rng(99);
  double worst = 0.0;
  auto fold = [&](double diff) { worst = std::max(worst, diff); };

  // matmul
  for (int i = 0; i < 5; ++i) {
    std::vector<double> a(4 * 6), b(6 * 3);
    for (double& x : a) x = rng.normal();
    for (double& x : b) x = rng.normal();
    dcp::Tape t;
    auto out = t.matmul(t.constant(dcp::Tensor({4, 6}, a)), t.constant(dcp::Tensor({6, 3}, b)));
    fold(oracle::max_abs_diff(out.values(), oracle::matmul_ref(a, b, 4, 6, 3)));
  }
  // softmax + layer norm
  for (int i = 0; i < 5; ++i) {
    std::vector<double> x(3 * 7), g(7), b(7);
    for (double& v : x) v = 3.0 * rng.normal();
    for (double& v : g) v = rng.normal();
    for (double& v : b) v = rng.normal();
    dcp::Tape t;
    fold(oracle::max_abs_diff(t.softmax_rows(t.constant(dcp::Tensor({3, 7}, x))).values(),
                              oracle::softmax_rows_ref(x, 3, 7)));
    auto ln = t.layer_norm(t.constant(dcp::Tensor({3, 7}, x)),
                           t.constant(dcp::Tensor({7}, g)), t.constant(dcp::Tensor({7}, b)));
    fold(oracle::max_abs_diff(ln.values(), oracle::layer_norm_ref(x, g, b, 3, 7, 1e-5)));
  }
  // single-head attention (production path via one-head layer internals)
  for (int i = 0; i < 5; ++i) {
    std::vector<double> q(5 * 4), k(5 * 4), v(5 * 4);
    for (double& x : q) x = rng.normal();
    for (double& x : k) x = rng.normal();
    for (double& x : v) x = rng.normal();
    dcp::Tape t;
    auto qt = t.constant(dcp::Tensor({5, 4}, q));
    auto kt = t.constant(dcp::Tensor({5, 4}, k));
    auto vt = t.constant(dcp::Tensor({5, 4}, v));
    auto attn = t.matmul(t.softmax_rows(t.scale(t.matmul(qt, t.transpose(kt)), 0.5)), vt);
    fold(oracle::max_abs_diff(attn.values(),
                              oracle::single_head_attention_ref(q, k, v, 5, 4, nullptr)));
  }
  // two-layer encoder forwards
  {
    dcp::EncoderConfig tc;
    tc.n_layers = 2;
    tc.model_dim = 8;
    tc.n_heads = 2;
    tc.ffn_dim = 16;
    tc.max_seq = 16;
    tc.embed_dim = 6;
    tc.vocab_size = 16;
    dcp::EncoderConfig vc = tc;
    vc.vocab_size = 0;
    vc.patch_dim = 5;
    dcp::EncoderParams text = dcp::init_encoder(tc, 5);
    dcp::EncoderParams vision = dcp::init_encoder(vc, 6);

    std::vector<double> patches(4 * 5);
    for (double& x : patches) x = rng.normal();
    std::vector<std::vector<double>> prompts(2, std::vector<double>(2 * 8));
    for (auto& p : prompts)
      for (double& x : p) x = 0.1 * rng.normal();

    dcp::Tape t;
    dcp::EncoderParams rv = dcp::register_on_tape(t, vision, false);
    std::vector<dcp::Tensor> pv{dcp::Tensor({2, 8}, prompts[0]), dcp::Tensor({2, 8}, prompts[1])};
    auto img = dcp::encode_image(t, rv, t.constant(dcp::Tensor({4, 5}, patches)), pv);
    fold(oracle::max_abs_diff(img.values(),
                              oracle::encode_image_ref(vision, patches, 4, prompts, 2)));

    dcp::EncoderParams rt = dcp::register_on_tape(t, text, false);
    std::vector<dcp::Tensor> pt{dcp::Tensor({2, 8}, prompts[0]), dcp::Tensor({2, 8}, prompts[1])};
    auto txt = dcp::encode_text(t, rt, {4, 9, 2}, pt);
    fold(oracle::max_abs_diff(txt.values(), oracle::encode_text_ref(text, {4, 9, 2}, prompts, 2)));
  }

  report("oracle-equivalence", worst <= 1e-10, "max_abs_diff=" + std::to_string(worst));
  CHECK(worst <= 1e-10);
}

TEST_CASE("criterion: bare cross-modal update contract") {
  dcp::Rng rng(7);
  dcp::PromptConfig cfg;
  cfg.length = 4;
  cfg.depth = 2;
  cfg.d_attn = 8;
  cfg.n_heads = 2;
  cfg.literal = true;

  double worst = 0.0;
  double worst_rowsum = 0.0;
  for (int i = 0; i < 10; ++i) {
    std::vector<double> ptv(4 * 8), pvv(4 * 8);
    for (double& x : ptv) x = rng.normal();
    for (double& x : pvv) x = rng.normal();
    dcp::Tape t;
    auto [nt, nv] = dcp::cmpa_step(t, t.constant(dcp::Tensor({4, 8}, ptv)),
                                   t.constant(dcp::Tensor({4, 8}, pvv)), nullptr, cfg);
    worst = std::max(worst, oracle::max_abs_diff(nt.values(),
                                                 oracle::cmpa_bare_ref(pvv, ptv, 4, 8, 2)));
    worst = std::max(worst, oracle::max_abs_diff(nv.values(),
                                                 oracle::cmpa_bare_ref(ptv, pvv, 4, 8, 2)));

    // Attention rows recomputed from the definition must satisfy the
    // softmax law for every head of both updates.
    for (int update = 0; update < 2; ++update) {
      const auto& q = update == 0 ? pvv : ptv;
      const auto& kv = update == 0 ? ptv : pvv;
      for (std::size_t h = 0; h < 2; ++h) {
        std::vector<double> scores(16);
        for (std::size_t r = 0; r < 4; ++r)
          for (std::size_t c = 0; c < 4; ++c) {
            double acc = 0.0;
            for (std::size_t d = 0; d < 4; ++d)
              acc += q[r * 8 + h * 4 + d] * kv[c * 8 + h * 4 + d];
            scores[r * 4 + c] = acc / 2.0;
          }
        const auto attn = oracle::softmax_rows_ref(scores, 4, 4);
        for (std::size_t r = 0; r < 4; ++r) {
          double sum = 0.0;
          for (std::size_t c = 0; c < 4; ++c) sum += attn[r * 4 + c];
          worst_rowsum = std::max(worst_rowsum, std::abs(sum - 1.0));
        }
      }
    }
  }
  const bool pass = worst <= 1e-10 && worst_rowsum <= 1e-9;
  report("bare-update-contract", pass,
         "max_abs_diff=" + std::to_string(worst) + " rowsum_err=" + std::to_string(worst_rowsum));
  CHECK(worst <= 1e-10);
  CHECK(worst_rowsum <= 1e-9);
}

TEST_CASE("criterion: parameter sharing ledger") {
  struct Case {
    std::size_t m, n, d_attn, heads, d_text, d_vision;
  };
  const Case grid[] = {{16, 9, 64, 4, 48, 64}, {16, 6, 64, 4, 48, 64}, {8, 3, 32, 2, 24, 32},
                       {4, 5, 16, 4, 16, 16},  {2, 2, 8, 2, 8, 8},     {12, 4, 48, 3, 36, 40}};
  bool pass = true;
  dcp::Rng table_rng(1);
  for (const Case& c : grid) {
    dcp::Tensor table = dcp::random_normal({16, c.d_text}, 1.0, table_rng);
    for (bool share : {true, false}) {
      dcp::PromptConfig cfg;
      cfg.length = c.m;
      cfg.depth = c.n;
      cfg.d_attn = c.d_attn;
      cfg.n_heads = c.heads;
      cfg.share_params = share;
      dcp::PromptBank bank = dcp::init_prompt_bank(cfg, table, {2, 3}, c.d_vision, 1);
      std::size_t enumerated = 0;
      dcp::for_each_param(
          bank, [&](const std::string&, const dcp::Tensor& t) { enumerated += t.size(); });
      if (enumerated != dcp::trainable_count(cfg, c.d_text, c.d_vision)) pass = false;
    }
    if (c.n >= 3) {
      dcp::PromptConfig with;
      with.length = c.m;
      with.depth = c.n;
      with.d_attn = c.d_attn;
      with.n_heads = c.heads;
      with.share_params = true;
      dcp::PromptConfig without = with;
      without.share_params = false;
      if (!(dcp::trainable_count(with, c.d_text, c.d_vision) <
            dcp::trainable_count(without, c.d_text, c.d_vision)))
        pass = false;
    }
  }
  report("parameter-sharing-ledger", pass, "6 configs x 2 variants");
  CHECK(pass);
}

TEST_CASE("criterion: learning signal") {
  Stopwatch timer;
  const Dataset& ds = default_dataset();

  KeyValueConfig kv;  // paper defaults: M=16, depth capped at L, batch 4, lr 0.0035, 20 epochs
  RunConfig rc = dcp::resolve_run_config(kv);
  dcp::EncoderProvider provider(ds, rc.text_encoder, rc.vision_encoder, rc.pretrain, rc.tau);

  RunConfig zs = rc;
  zs.method = Method::ZeroShot;
  const double zero_shot = dcp::train_shot(zs, ds, provider, 1).mean_accuracy;

  std::map<std::size_t, double> dcp_acc;
  for (std::size_t shot : {1, 2, 4, 8, 16})
    dcp_acc[shot] = dcp::train_shot(rc, ds, provider, shot).mean_accuracy;
  const double elapsed = timer.seconds();

  bool above_zero_shot = true;
  for (const auto& [shot, acc] : dcp_acc)
    if (acc < zero_shot) above_zero_shot = false;
  bool monotone = true;
  const std::size_t ladder[] = {1, 2, 4, 8, 16};
  for (int i = 0; i + 1 < 5; ++i)
    if (dcp_acc[ladder[i + 1]] < dcp_acc[ladder[i]] - 0.03) monotone = false;
  const bool sixteen = dcp_acc[16] >= 0.90;
  const bool in_time = elapsed < 15 * 60.0;

  const bool pass = sixteen && above_zero_shot && monotone && in_time;
  report("learning-signal", pass,
         "zero_shot=" + fmt(zero_shot) + " dcp={" + fmt(dcp_acc[1]) + "," + fmt(dcp_acc[2]) +
             "," + fmt(dcp_acc[4]) + "," + fmt(dcp_acc[8]) + "," + fmt(dcp_acc[16]) +
             "} runtime=" + fmt(elapsed) + "s");
  CHECK(sixteen);
  CHECK(above_zero_shot);
  CHECK(monotone);
  CHECK(in_time);
}

TEST_CASE("criterion: ablation machinery") {
  const auto dir = temp_dir("ablate");
  const Dataset& ds = default_dataset();

  // Full 5-shot tables; the comparison machinery is exercised end to end at
  // reduced depth (one seed, two epochs) to keep the gate affordable.
  KeyValueConfig kv;
  kv.set("seeds", "0");
  kv.set("epochs", "2");
  RunConfig rc = dcp::resolve_run_config(kv);

  auto fusion_once = [&]() {
    dcp::EncoderProvider provider(ds, rc.text_encoder, rc.vision_encoder, rc.pretrain, rc.tau);
    return dcp::ablate_fusion(rc, ds, provider);
  };
  auto ps_once = [&]() {
    dcp::EncoderProvider provider(ds, rc.text_encoder, rc.vision_encoder, rc.pretrain, rc.tau);
    return dcp::ablate_param_sharing(rc, ds, provider);
  };

  const std::string fusion = fusion_once();
  const std::string ps = ps_once();
  const bool fusion_reproducible = fusion == fusion_once();
  const bool ps_reproducible = ps == ps_once();

  std::size_t fusion_rows = 0;
  for (const std::string& mode : {"avg", "max", "first"})
    for (std::size_t shot : {1, 2, 4, 8, 16})
      if (fusion.find("\n" + mode + "\t" + std::to_string(shot) + "\t") != std::string::npos)
        ++fusion_rows;
  std::size_t ps_rows = 0;
  for (const std::string& variant : {"with_sharing", "without_sharing"})
    for (std::size_t shot : {1, 2, 4, 8, 16})
      if (ps.find("\n" + variant + "\t" + std::to_string(shot) + "\t") != std::string::npos)
        ++ps_rows;

  const bool pass = fusion_rows == 15 && ps_rows == 10 && fusion_reproducible && ps_reproducible;
  report("ablation-machinery", pass,
         "fusion_rows=" + std::to_string(fusion_rows) + "/15 ps_rows=" + std::to_string(ps_rows) +
             "/10 reproducible=" + (fusion_reproducible && ps_reproducible ? "yes" : "no"));
  CHECK(fusion_rows == 15);
  CHECK(ps_rows == 10);
  CHECK(fusion_reproducible);
  CHECK(ps_reproducible);
}

TEST_CASE("criterion: shift harness") {
  const Dataset& ds = default_dataset();
  KeyValueConfig kv;
  kv.set("prompt.length", "8");  // cross-domain protocol: shorter prompts, 5 epochs
  kv.set("epochs", "5");
  kv.set("seeds", "0,1,2");
  RunConfig rc = dcp::resolve_run_config(kv);
  dcp::EncoderProvider provider(ds, rc.text_encoder, rc.vision_encoder, rc.pretrain, rc.tau);

  const std::string rep = dcp::domain_shift_eval(
      rc, ds, provider, 16, {{0.0, 1.0}, {5.0, 1.0}, {15.0, 1.0}, {30.0, 1.0}, {45.0, 1.0}});

  const bool has_ood = rep.find("ood_average") != std::string::npos;

  // Exact identity: the zero-shift row must repeat the source accuracy.
  const std::size_t src = rep.find("source_mean_accuracy");
  REQUIRE(src != std::string::npos);
  const std::size_t val_start = rep.find('\t', src) + 1;
  const std::string source_acc = rep.substr(val_start, rep.find('\n', val_start) - val_start);
  const bool identity = rep.find("\n0\t1\t" + source_acc + "\t") != std::string::npos;

  std::size_t rows = 0;
  for (const char* angle : {"\n0\t", "\n5\t", "\n15\t", "\n30\t", "\n45\t"})
    if (rep.find(angle) != std::string::npos) ++rows;

  const bool pass = has_ood && identity && rows == 5;
  report("shift-harness", pass,
         std::string("identity=") + (identity ? "exact" : "BROKEN") +
             " rows=" + std::to_string(rows) + "/5 source_acc=" + source_acc);
  CHECK(has_ood);
  CHECK(identity);
  CHECK(rows == 5);
}

TEST_CASE("criterion: determinism of commands") {
  const auto dir = temp_dir("determinism");
  dcp::write_dataset(default_dataset(), dir / "data");

  const std::string common =
      "--set dataset=data/default --set shots=1 --set seeds=0,1 --set epochs=2 "
      "--set pretrain.steps=10";
  REQUIRE(run_cli(dir, "train --out-dir run_a " + common) == 0);
  REQUIRE(run_cli(dir, "train --out-dir run_b " + common) == 0);
  const bool train_same = dcp::read_file(dir / "run_a" / "train_dcp_s1.txt") ==
                          dcp::read_file(dir / "run_b" / "train_dcp_s1.txt");

  REQUIRE(run_cli(dir, "gradcheck --out-dir g_a --set gradcheck.instances=2") == 0);
  REQUIRE(run_cli(dir, "gradcheck --out-dir g_b --set gradcheck.instances=2") == 0);
  const bool grad_same =
      dcp::read_file(dir / "g_a" / "gradcheck.txt") == dcp::read_file(dir / "g_b" / "gradcheck.txt");

  REQUIRE(run_cli(dir, "generate --out d_a --set dataset.classes=4") == 0);
  REQUIRE(run_cli(dir, "generate --out d_b --set dataset.classes=4") == 0);
  const bool data_same = dcp::read_file(dir / "d_a" / "default" / "train.jsonl") ==
                         dcp::read_file(dir / "d_b" / "default" / "train.jsonl");

  const bool pass = train_same && grad_same && data_same;
  report("determinism", pass,
         std::string("train=") + (train_same ? "ok" : "DIFFERS") +
             " gradcheck=" + (grad_same ? "ok" : "DIFFERS") +
             " generate=" + (data_same ? "ok" : "DIFFERS"));
  CHECK(train_same);
  CHECK(grad_same);
  CHECK(data_same);
}
