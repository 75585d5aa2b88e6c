// Command-line front end: dataset generation, training, evaluation, the two
// ablations, domain-shift evaluation, and the gradient audit.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical audit failure,
// 1 anything else.

#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dcp/audit.hpp"
#include "dcp/config.hpp"
#include "dcp/errors.hpp"
#include "dcp/harness.hpp"
#include "dcp/serialize.hpp"
#include "dcp/synthdata.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  std::string seed_list;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("-c,--config", args.config_path, "key = value configuration file");
  cmd->add_option("--set", args.overrides, "override a config key (key=value, repeatable)");
  cmd->add_option("--out-dir", args.out_dir, "directory for report files");
  cmd->add_option("--seed-list", args.seed_list, "comma-separated seeds (overrides config)");
}

dcp::KeyValueConfig load_config(const CommonArgs& args) {
  dcp::KeyValueConfig kv;
  if (!args.config_path.empty()) kv = dcp::KeyValueConfig::from_file(args.config_path);
  for (const std::string& o : args.overrides) kv.set_from_override(o);
  if (!args.seed_list.empty()) kv.set("seeds", args.seed_list);
  return kv;
}

dcp::Dataset load_dataset_for(const dcp::RunConfig& rc) {
  if (rc.dataset_dir.empty())
    throw dcp::ConfigError("no dataset configured (set 'dataset = <dir>')");
  dcp::Dataset ds = dcp::load_dataset(rc.dataset_dir);
  if (ds.spec.vocab_size != rc.text_encoder.vocab_size)
    throw dcp::ConfigError("text.vocab does not match the dataset vocabulary");
  if (ds.spec.patch_dim != rc.vision_encoder.patch_dim)
    throw dcp::ConfigError("vision.patch_dim does not match the dataset patches");
  return ds;
}

struct Stopwatch {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

int cmd_generate(const CommonArgs& args, const std::string& out_root) {
  dcp::KeyValueConfig kv = load_config(args);
  dcp::DatasetSpec spec;
  spec.name = kv.get_string("dataset.name", spec.name);
  spec.classes = kv.get_u64("dataset.classes", spec.classes);
  spec.train_per_class = kv.get_u64("dataset.train_per_class", spec.train_per_class);
  spec.test_per_class = kv.get_u64("dataset.test_per_class", spec.test_per_class);
  spec.name_tokens = kv.get_u64("dataset.name_tokens", spec.name_tokens);
  spec.latent_dim = kv.get_u64("dataset.latent_dim", spec.latent_dim);
  spec.patches = kv.get_u64("dataset.patches", spec.patches);
  spec.patch_dim = kv.get_u64("dataset.patch_dim", spec.patch_dim);
  spec.vocab_size = kv.get_u64("dataset.vocab", spec.vocab_size);
  spec.noise_std = kv.get_double("dataset.noise_std", spec.noise_std);
  spec.shift.angle_deg = kv.get_double("dataset.shift_angle", 0.0);
  spec.shift.noise_mult = kv.get_double("dataset.shift_noise_mult", 1.0);
  const std::uint64_t seed = kv.get_u64("dataset.seed", 0);
  kv.ensure_all_consumed();

  dcp::Dataset ds = dcp::generate_dataset(spec, seed);
  dcp::write_dataset(ds, out_root);
  std::cout << "wrote dataset to " << (std::filesystem::path(out_root) / spec.name).string()
            << " (" << ds.train.size() << " train / " << ds.test.size() << " test records)\n";
  return 0;
}

int cmd_train(const CommonArgs& args) {
  Stopwatch timer;
  dcp::KeyValueConfig kv = load_config(args);
  dcp::RunConfig rc = dcp::resolve_run_config(kv);
  kv.ensure_all_consumed();
  dcp::Dataset ds = load_dataset_for(rc);
  dcp::EncoderProvider provider(ds, rc.text_encoder, rc.vision_encoder, rc.pretrain, rc.tau);
  const auto results = dcp::train(rc, ds, provider, args.out_dir);
  for (const dcp::ShotResult& sr : results)
    std::cout << "method=" << dcp::to_string(rc.method) << " shot=" << sr.shot
              << " mean_acc=" << dcp::fmt_fixed(sr.mean_accuracy)
              << " std_acc=" << dcp::fmt_fixed(sr.std_accuracy)
              << " params=" << sr.trainable_params << "\n";
  std::cerr << "wall_clock_seconds=" << dcp::fmt_fixed(timer.seconds()) << "\n";
  return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& weights_path,
                 const std::string& split_name) {
  dcp::KeyValueConfig kv = load_config(args);
  dcp::RunConfig rc = dcp::resolve_run_config(kv);
  kv.ensure_all_consumed();
  dcp::Dataset ds = load_dataset_for(rc);

  dcp::EncoderPair encoders;
  dcp::MethodBank bank;
  bank.prompt_cfg = rc.prompt;
  bank.method = dcp::Method::ZeroShot;
  bool have_text = false, have_vision = false;
  for (const dcp::WeightSection& s : dcp::load_weight_container(weights_path)) {
    if (s.tag == "encoder.text") {
      encoders.text = dcp::encoder_from_section(s);
      have_text = true;
    } else if (s.tag == "encoder.vision") {
      encoders.vision = dcp::encoder_from_section(s);
      have_vision = true;
    } else if (s.tag == "prompt_bank") {
      bank.dcp = dcp::bank_from_section(s);
      bank.prompt_cfg = bank.dcp.config;
      bank.method = dcp::Method::Dcp;
    } else {
      throw dcp::IoError("unknown weight section '" + s.tag + "' in " + weights_path);
    }
  }
  if (!have_text || !have_vision)
    throw dcp::IoError(weights_path + " does not hold both encoder sections");

  const auto& split = split_name == "train" ? ds.train : ds.test;
  const double acc = dcp::evaluate_split(bank, encoders, ds, split, rc.tau);

  dcp::ReportDoc doc("evaluation");
  for (const auto& [key, value] : rc.echo) doc.kv(key, value);
  doc.kv("weights", weights_path);
  doc.kv("split", split_name);
  doc.begin_table("summary", {"key", "value"});
  doc.row({"accuracy", dcp::fmt_double(acc)});
  doc.row({"samples", std::to_string(split.size())});
  doc.machine_line("RESULT command=evaluate method=" + dcp::to_string(bank.method) +
                   " split=" + split_name + " accuracy=" + dcp::fmt_fixed(acc));
  dcp::atomic_write_file(std::filesystem::path(args.out_dir) / "evaluate.txt", doc.render());
  std::cout << "accuracy=" << dcp::fmt_fixed(acc) << " (" << split.size() << " samples)\n";
  return 0;
}

int cmd_ablate(const CommonArgs& args, bool fusion) {
  Stopwatch timer;
  dcp::KeyValueConfig kv = load_config(args);
  dcp::RunConfig rc = dcp::resolve_run_config(kv);
  kv.ensure_all_consumed();
  dcp::Dataset ds = load_dataset_for(rc);
  dcp::EncoderProvider provider(ds, rc.text_encoder, rc.vision_encoder, rc.pretrain, rc.tau);
  const std::string report = fusion ? dcp::ablate_fusion(rc, ds, provider)
                                    : dcp::ablate_param_sharing(rc, ds, provider);
  const std::string name = fusion ? "ablate_fusion.txt" : "ablate_param_sharing.txt";
  dcp::atomic_write_file(std::filesystem::path(args.out_dir) / name, report);
  std::cout << "wrote " << (std::filesystem::path(args.out_dir) / name).string() << "\n";
  std::cerr << "wall_clock_seconds=" << dcp::fmt_fixed(timer.seconds()) << "\n";
  return 0;
}

int cmd_shift_eval(const CommonArgs& args) {
  Stopwatch timer;
  dcp::KeyValueConfig kv = load_config(args);
  // Cross-domain defaults: shorter prompts, fewer epochs, single 16-shot run.
  if (!kv.has("prompt.length")) kv.set("prompt.length", "8");
  if (!kv.has("epochs")) kv.set("epochs", "5");
  dcp::RunConfig rc = dcp::resolve_run_config(kv);
  const std::size_t shot = kv.get_u64("shift.shot", 16);
  const std::vector<double> angles = kv.get_double_list("shift.angles", {0, 5, 15, 30, 45});
  std::vector<double> mults =
      kv.get_double_list("shift.noise_mults", std::vector<double>(angles.size(), 1.0));
  kv.ensure_all_consumed();
  if (mults.size() == 1) mults.assign(angles.size(), mults[0]);
  if (mults.size() != angles.size())
    throw dcp::ConfigError("shift.noise_mults must match shift.angles in length");

  std::vector<dcp::ShiftLevel> levels;
  for (std::size_t i = 0; i < angles.size(); ++i)
    levels.push_back({angles[i], mults[i]});

  dcp::Dataset ds = load_dataset_for(rc);
  dcp::EncoderProvider provider(ds, rc.text_encoder, rc.vision_encoder, rc.pretrain, rc.tau);
  const std::string report = dcp::domain_shift_eval(rc, ds, provider, shot, levels);
  dcp::atomic_write_file(std::filesystem::path(args.out_dir) / "shift_eval.txt", report);
  std::cout << "wrote " << (std::filesystem::path(args.out_dir) / "shift_eval.txt").string()
            << "\n";
  std::cerr << "wall_clock_seconds=" << dcp::fmt_fixed(timer.seconds()) << "\n";
  return 0;
}

int cmd_gradcheck(const CommonArgs& args) {
  Stopwatch timer;
  dcp::KeyValueConfig kv = load_config(args);
  const std::size_t instances = kv.get_u64("gradcheck.instances", 10);
  kv.ensure_all_consumed();
  const auto results = dcp::gradcheck_suite(instances);
  dcp::atomic_write_file(std::filesystem::path(args.out_dir) / "gradcheck.txt",
                         dcp::render_audit_report(results));
  for (const dcp::FdCheckResult& r : results)
    std::cout << (r.pass(dcp::kAuditTolerance) ? "pass " : "FAIL ") << r.name
              << " max_rel_error=" << dcp::fmt_double(r.max_rel_error) << "\n";
  std::cerr << "wall_clock_seconds=" << dcp::fmt_fixed(timer.seconds()) << "\n";
  if (!dcp::audit_passed(results)) {
    std::cerr << "gradient audit FAILED\n";
    return 3;
  }
  std::cout << "gradient audit passed (" << results.size() << " checks)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale cross-modal prompt learning lab"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string out_root = "data";
  std::string weights_path;
  std::string split_name = "test";

  CLI::App* generate = app.add_subcommand("generate", "generate a synthetic dataset");
  add_common(generate, args);
  generate->add_option("--out", out_root, "dataset root directory");

  CLI::App* train = app.add_subcommand("train", "train a method over the configured shots");
  add_common(train, args);

  CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate saved weights on a split");
  add_common(evaluate, args);
  evaluate->add_option("--weights", weights_path, "DCPW weight container")->required();
  evaluate->add_option("--split", split_name, "train or test")
      ->check(CLI::IsMember({"train", "test"}));

  CLI::App* ablate_fusion = app.add_subcommand("ablate-fusion", "compare fusion modes");
  add_common(ablate_fusion, args);

  CLI::App* ablate_ps = app.add_subcommand("ablate-ps", "compare parameter sharing variants");
  add_common(ablate_ps, args);

  CLI::App* shift_eval =
      app.add_subcommand("shift-eval", "train on source, evaluate across a shift ladder");
  add_common(shift_eval, args);

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  add_common(gradcheck, args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (generate->parsed()) return cmd_generate(args, out_root);
    if (train->parsed()) return cmd_train(args);
    if (evaluate->parsed()) return cmd_evaluate(args, weights_path, split_name);
    if (ablate_fusion->parsed()) return cmd_ablate(args, true);
    if (ablate_ps->parsed()) return cmd_ablate(args, false);
    if (shift_eval->parsed()) return cmd_shift_eval(args);
    if (gradcheck->parsed()) return cmd_gradcheck(args);
  } catch (const dcp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
