#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <vector>

#include "dcp/encoder.hpp"
#include "dcp/prompts.hpp"
#include "dcp/serialize.hpp"

namespace {

std::filesystem::path temp_file(const char* tag) {
  auto dir = std::filesystem::temp_directory_path() / "dcp_serialize";
  std::filesystem::create_directories(dir);
  return dir / tag;
}

dcp::EncoderConfig toy_text() {
  dcp::EncoderConfig c;
  c.n_layers = 2;
  c.model_dim = 8;
  c.n_heads = 2;
  c.ffn_dim = 16;
  c.max_seq = 12;
  c.embed_dim = 6;
  c.vocab_size = 16;
  return c;
}

}  // namespace

TEST_CASE("base64 round-trips arbitrary byte strings") {
  dcp::Rng rng(1);
  for (std::size_t len : {0u, 1u, 2u, 3u, 4u, 17u, 100u}) {
    std::vector<unsigned char> bytes(len);
    for (auto& b : bytes) b = static_cast<unsigned char>(rng.below(256));
    const std::string text = dcp::base64_encode(bytes.data(), bytes.size());
    CHECK(dcp::base64_decode(text) == bytes);
  }
  CHECK_THROWS_AS(dcp::base64_decode("abc"), dcp::IoError);
  CHECK_THROWS_AS(dcp::base64_decode("ab!%"), dcp::IoError);
}

TEST_CASE("f64 payloads survive base64 bit-exactly") {
  std::vector<double> values{0.0, -0.0, 1.0, -1.5, 1e-308, 1e308, 0.1, 3.14159265358979};
  const std::string text = dcp::doubles_to_base64(values);
  const std::vector<double> back = dcp::doubles_from_base64(text, values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    CHECK(std::bit_cast<std::uint64_t>(back[i]) == std::bit_cast<std::uint64_t>(values[i]));
  }
  CHECK_THROWS_AS(dcp::doubles_from_base64(text, values.size() + 1), dcp::IoError);
}

TEST_CASE("weight container round-trips encoders and prompt banks bit-exactly") {
  dcp::EncoderConfig tc = toy_text();
  dcp::EncoderConfig vc = tc;
  vc.vocab_size = 0;
  vc.patch_dim = 5;

  dcp::EncoderParams text = dcp::init_encoder(tc, 3);
  dcp::EncoderParams vision = dcp::init_encoder(vc, 4);

  dcp::PromptConfig pc;
  pc.length = 2;
  pc.depth = 2;
  pc.d_attn = 8;
  pc.n_heads = 2;
  pc.share_params = true;
  pc.fusion = dcp::FusionMode::Max;
  dcp::PromptBank bank = dcp::init_prompt_bank(pc, text.token_table, {4, 5}, vc.model_dim, 5);

  const auto path = temp_file("roundtrip.dcpw");
  dcp::save_weight_container(path, {dcp::encoder_section("encoder.text", text),
                                    dcp::encoder_section("encoder.vision", vision),
                                    dcp::bank_section(bank, tc.model_dim, vc.model_dim)});

  const auto sections = dcp::load_weight_container(path);
  REQUIRE(sections.size() == 3);
  dcp::EncoderParams text2 = dcp::encoder_from_section(sections[0]);
  dcp::EncoderParams vision2 = dcp::encoder_from_section(sections[1]);
  dcp::PromptBank bank2 = dcp::bank_from_section(sections[2]);

  CHECK(dcp::checksum(text2) == dcp::checksum(text));
  CHECK(dcp::checksum(vision2) == dcp::checksum(vision));
  CHECK(dcp::checksum(bank2) == dcp::checksum(bank));
  CHECK(bank2.config.fusion == dcp::FusionMode::Max);
  CHECK(bank2.config.share_params);
  CHECK(text2.config.vocab_size == tc.vocab_size);

  // Saving again writes identical bytes.
  const auto path2 = temp_file("roundtrip2.dcpw");
  dcp::save_weight_container(path2, {dcp::encoder_section("encoder.text", text2),
                                     dcp::encoder_section("encoder.vision", vision2),
                                     dcp::bank_section(bank2, tc.model_dim, vc.model_dim)});
  CHECK(dcp::read_file(path) == dcp::read_file(path2));
}

TEST_CASE("weight container rejects bad magic, version, and truncation") {
  dcp::EncoderParams text = dcp::init_encoder(toy_text(), 3);
  const auto path = temp_file("bad.dcpw");
  dcp::save_weight_container(path, {dcp::encoder_section("encoder.text", text)});
  std::string bytes = dcp::read_file(path);

  std::string wrong_magic = bytes;
  wrong_magic[0] = 'X';
  dcp::atomic_write_file(path, wrong_magic);
  CHECK_THROWS_MATCHES(dcp::load_weight_container(path), dcp::IoError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("magic")));

  std::string wrong_version = bytes;
  wrong_version[4] = 9;
  dcp::atomic_write_file(path, wrong_version);
  CHECK_THROWS_AS(dcp::load_weight_container(path), dcp::IoError);

  dcp::atomic_write_file(path, bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(dcp::load_weight_container(path), dcp::IoError);

  dcp::atomic_write_file(path, bytes + "x");
  CHECK_THROWS_AS(dcp::load_weight_container(path), dcp::IoError);
}

TEST_CASE("loader rejects sections with missing or misshapen arrays") {
  dcp::EncoderParams text = dcp::init_encoder(toy_text(), 3);
  dcp::WeightSection section = dcp::encoder_section("encoder.text", text);

  dcp::WeightSection missing = section;
  missing.arrays.pop_back();
  CHECK_THROWS_AS(dcp::encoder_from_section(missing), dcp::IoError);

  dcp::WeightSection misshapen = section;
  misshapen.arrays[0].second = dcp::zeros({2, 2});
  CHECK_THROWS_AS(dcp::encoder_from_section(misshapen), dcp::IoError);

  dcp::WeightSection extra = section;
  extra.arrays.emplace_back("mystery", dcp::zeros({1}));
  CHECK_THROWS_AS(dcp::encoder_from_section(extra), dcp::IoError);
}

TEST_CASE("atomic writes land complete and leave no temp files") {
  const auto path = temp_file("atomic.txt");
  dcp::atomic_write_file(path, "hello");
  CHECK(dcp::read_file(path) == "hello");
  dcp::atomic_write_file(path, "replaced");
  CHECK(dcp::read_file(path) == "replaced");
  CHECK(!std::filesystem::exists(path.string() + ".tmp"));
}
