#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcp/encoder.hpp"
#include "dcp/errors.hpp"
#include "dcp/rng.hpp"
#include "dcp/serialize.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

/// Rotation of the latent class prototypes (in the plane of the first two
/// latent coordinates) plus a noise rescale. The identity shift is
/// angle 0 / multiplier 1 and regenerates the source dataset byte for byte.
struct ShiftSpec {
  double angle_deg = 0.0;
  double noise_mult = 1.0;
  bool is_identity() const { return angle_deg == 0.0 && noise_mult == 1.0; }
};

struct DatasetSpec {
  std::string name = "default";
  std::size_t classes = 8;
  std::size_t train_per_class = 32;
  std::size_t test_per_class = 32;
  std::size_t name_tokens = 4;  // class-name token length
  std::size_t latent_dim = 8;
  std::size_t patches = 16;
  std::size_t patch_dim = 12;
  std::size_t vocab_size = 64;
  double noise_std = 0.1;
  ShiftSpec shift;

  void validate() const {
    if (classes < 2) throw ConfigError("dataset spec: need at least 2 classes");
    if (train_per_class == 0 || test_per_class == 0)
      throw ConfigError("dataset spec: per-class sample counts must be positive");
    if (name_tokens == 0) throw ConfigError("dataset spec: name_tokens must be positive");
    if (latent_dim < 2) throw ConfigError("dataset spec: latent_dim must be at least 2");
    if (patches == 0 || patch_dim == 0)
      throw ConfigError("dataset spec: patch extents must be positive");
    if (vocab_size <= kFirstWordToken + 1)
      throw ConfigError("dataset spec: vocab too small for class names");
    if (noise_std < 0.0) throw ConfigError("dataset spec: noise_std must be non-negative");
    if (!(shift.noise_mult >= 0.0) || !std::isfinite(shift.angle_deg))
      throw ConfigError("dataset spec: shift parameters must be finite");
    if (name.empty() || name.find('/') != std::string::npos)
      throw ConfigError("dataset spec: name must be a plain directory name");
  }
};

struct Sample {
  std::size_t label = 0;
  Tensor patches;  // patches x patch_dim
};

struct Dataset {
  DatasetSpec spec;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> class_token_ids;  // classes x name_tokens
  std::vector<Sample> train;  // class-major order
  std::vector<Sample> test;
};

/// Deterministic class name: base-(vocab - reserved) digits of the class
/// index, offset past the sentinel ids.
inline std::vector<std::size_t> class_name_ids(std::size_t k, std::size_t name_tokens,
                                               std::size_t vocab_size) {
  const std::size_t base = vocab_size - kFirstWordToken;
  std::vector<std::size_t> ids(name_tokens);
  std::size_t rest = k;
  for (std::size_t j = 0; j < name_tokens; ++j) {
    ids[j] = kFirstWordToken + rest % base;
    rest /= base;
  }
  return ids;
}

/// The fixed discrete prompt prefix ("a photo of a" analogue): four reserved
/// word ids that every zero-shot text sequence starts with.
inline std::vector<std::size_t> template_token_ids(std::size_t vocab_size) {
  if (vocab_size < kFirstWordToken + 4) throw ConfigError("vocab too small for the template");
  return {kFirstWordToken, kFirstWordToken + 1, kFirstWordToken + 2, kFirstWordToken + 3};
}

/// Procedural paired dataset: each class owns a latent prototype; images are
/// fixed random per-patch projections of the (shifted) prototype plus
/// Gaussian noise, and the class name is a deterministic token string.
inline Dataset generate_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;

  Rng root(mix_seed(seed, 0xda7aULL));
  Rng proto_rng = root.derive(1);
  Rng map_rng = root.derive(2);
  Rng noise_rng = root.derive(3);

  // Latent prototypes, one per class; drawn before the shift is applied so
  // that shifted variants consume the identical random stream.
  std::vector<double> prototypes(spec.classes * spec.latent_dim);
  for (double& v : prototypes) v = proto_rng.normal();
  const double angle = spec.shift.angle_deg * (3.14159265358979323846 / 180.0);
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    double* z = prototypes.data() + k * spec.latent_dim;
    const double z0 = z[0], z1 = z[1];
    z[0] = c * z0 - s * z1;
    z[1] = s * z0 + c * z1;
  }

  // Per-patch linear maps from latent space to patch features, shared by all
  // classes.
  const double map_std = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
  std::vector<double> patch_maps(spec.patches * spec.patch_dim * spec.latent_dim);
  for (double& v : patch_maps) v = map_rng.normal(0.0, map_std);

  for (std::size_t k = 0; k < spec.classes; ++k)
    ds.class_token_ids.push_back(class_name_ids(k, spec.name_tokens, spec.vocab_size));

  const double sigma = spec.noise_std * spec.shift.noise_mult;
  auto draw_sample = [&](std::size_t k) {
    const double* z = prototypes.data() + k * spec.latent_dim;
    std::vector<double> grid(spec.patches * spec.patch_dim);
    for (std::size_t p = 0; p < spec.patches; ++p) {
      for (std::size_t f = 0; f < spec.patch_dim; ++f) {
        const double* row = patch_maps.data() + (p * spec.patch_dim + f) * spec.latent_dim;
        double acc = 0.0;
        for (std::size_t l = 0; l < spec.latent_dim; ++l) acc += row[l] * z[l];
        grid[p * spec.patch_dim + f] = acc + sigma * noise_rng.normal();
      }
    }
    return Sample{k, Tensor({spec.patches, spec.patch_dim}, std::move(grid))};
  };

  ds.train.reserve(spec.classes * spec.train_per_class);
  for (std::size_t k = 0; k < spec.classes; ++k)
    for (std::size_t i = 0; i < spec.train_per_class; ++i) ds.train.push_back(draw_sample(k));
  ds.test.reserve(spec.classes * spec.test_per_class);
  for (std::size_t k = 0; k < spec.classes; ++k)
    for (std::size_t i = 0; i < spec.test_per_class; ++i) ds.test.push_back(draw_sample(k));
  return ds;
}

/// Same classes and names, prototypes rotated and noise rescaled. Replaces
/// any shift already present in the source spec.
inline Dataset apply_shift(const Dataset& source, ShiftSpec shift) {
  DatasetSpec spec = source.spec;
  spec.shift = shift;
  return generate_dataset(spec, source.seed);
}

// ---- on-disk format ----------------------------------------------------------
//
// <root>/<name>/meta.json        dataset spec, seed, class name table
// <root>/<name>/train.jsonl      one record per line
// <root>/<name>/test.jsonl
//
// Record: {"class": k, "split": "train", "tokens": [...], "rows": P,
//          "cols": F, "patches_b64": "<little-endian f64>"}

namespace detail {

inline nlohmann::json spec_to_json(const DatasetSpec& spec) {
  return {{"name", spec.name},
          {"classes", spec.classes},
          {"train_per_class", spec.train_per_class},
          {"test_per_class", spec.test_per_class},
          {"name_tokens", spec.name_tokens},
          {"latent_dim", spec.latent_dim},
          {"patches", spec.patches},
          {"patch_dim", spec.patch_dim},
          {"vocab_size", spec.vocab_size},
          {"noise_std", spec.noise_std},
          {"shift_angle_deg", spec.shift.angle_deg},
          {"shift_noise_mult", spec.shift.noise_mult}};
}

inline DatasetSpec spec_from_json(const nlohmann::json& j) {
  DatasetSpec spec;
  spec.name = j.at("name").get<std::string>();
  spec.classes = j.at("classes").get<std::size_t>();
  spec.train_per_class = j.at("train_per_class").get<std::size_t>();
  spec.test_per_class = j.at("test_per_class").get<std::size_t>();
  spec.name_tokens = j.at("name_tokens").get<std::size_t>();
  spec.latent_dim = j.at("latent_dim").get<std::size_t>();
  spec.patches = j.at("patches").get<std::size_t>();
  spec.patch_dim = j.at("patch_dim").get<std::size_t>();
  spec.vocab_size = j.at("vocab_size").get<std::size_t>();
  spec.noise_std = j.at("noise_std").get<double>();
  spec.shift.angle_deg = j.at("shift_angle_deg").get<double>();
  spec.shift.noise_mult = j.at("shift_noise_mult").get<double>();
  return spec;
}

inline std::string split_to_jsonl(const Dataset& ds, const std::vector<Sample>& samples,
                                  const char* split) {
  std::string out;
  for (const Sample& sample : samples) {
    nlohmann::json rec = {{"class", sample.label},
                          {"split", split},
                          {"tokens", ds.class_token_ids[sample.label]},
                          {"rows", sample.patches.shape[0]},
                          {"cols", sample.patches.shape[1]},
                          {"patches_b64", doubles_to_base64(sample.patches.values())}};
    out += rec.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<Sample> split_from_jsonl(const std::string& text,
                                            const std::filesystem::path& origin) {
  std::vector<Sample> samples;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(origin.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    const std::size_t rows = rec.at("rows").get<std::size_t>();
    const std::size_t cols = rec.at("cols").get<std::size_t>();
    std::vector<double> values =
        doubles_from_base64(rec.at("patches_b64").get<std::string>(), rows * cols);
    samples.push_back(
        Sample{rec.at("class").get<std::size_t>(), Tensor({rows, cols}, std::move(values))});
  }
  return samples;
}

}  // namespace detail

inline std::filesystem::path dataset_dir(const std::filesystem::path& root,
                                         const std::string& name) {
  return root / name;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& root) {
  const std::filesystem::path dir = dataset_dir(root, ds.spec.name);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  nlohmann::json meta = {{"format", 1},
                         {"seed", ds.seed},
                         {"spec", detail::spec_to_json(ds.spec)},
                         {"class_token_ids", ds.class_token_ids}};
  atomic_write_file(dir / "meta.json", meta.dump(2) + "\n");
  atomic_write_file(dir / "train.jsonl", detail::split_to_jsonl(ds, ds.train, "train"));
  atomic_write_file(dir / "test.jsonl", detail::split_to_jsonl(ds, ds.test, "test"));
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(dir / "meta.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError((dir / "meta.json").string() + ": " + e.what());
  }
  ds.spec = detail::spec_from_json(meta.at("spec"));
  ds.seed = meta.at("seed").get<std::uint64_t>();
  ds.class_token_ids =
      meta.at("class_token_ids").get<std::vector<std::vector<std::size_t>>>();
  ds.train = detail::split_from_jsonl(read_file(dir / "train.jsonl"), dir / "train.jsonl");
  ds.test = detail::split_from_jsonl(read_file(dir / "test.jsonl"), dir / "test.jsonl");
  const std::size_t expect_train = ds.spec.classes * ds.spec.train_per_class;
  const std::size_t expect_test = ds.spec.classes * ds.spec.test_per_class;
  if (ds.train.size() != expect_train || ds.test.size() != expect_test)
    throw IoError(dir.string() + ": record counts disagree with meta.json");
  return ds;
}

/// One few-shot episode: s train indices per class, chosen uniformly without
/// replacement; the test split is always used in full.
struct FewShotTask {
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> train_indices;  // into Dataset::train, class-major
};

inline FewShotTask sample_few_shot(const Dataset& ds, std::size_t shots, std::uint64_t seed) {
  if (shots == 0) throw ContractError("sample_few_shot: shots must be positive");
  if (shots > ds.spec.train_per_class)
    throw ContractError("sample_few_shot: " + std::to_string(shots) +
                        " shots exceed the per-class pool of " +
                        std::to_string(ds.spec.train_per_class));
  FewShotTask task;
  task.shots = shots;
  task.seed = seed;
  Rng rng(mix_seed(seed, 0x54a9ULL));
  for (std::size_t k = 0; k < ds.spec.classes; ++k) {
    Rng class_rng = rng.derive(k + 1);
    std::vector<std::size_t> picked =
        class_rng.sample_without_replacement(ds.spec.train_per_class, shots);
    std::sort(picked.begin(), picked.end());
    for (std::size_t idx : picked)
      task.train_indices.push_back(k * ds.spec.train_per_class + idx);
  }
  return task;
}

}  // namespace dcp
