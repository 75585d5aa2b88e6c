#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dcp/encoder.hpp"
#include "dcp/errors.hpp"
#include "dcp/prompts.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

// ---- small file helpers -----------------------------------------------------

/// Write-temp-then-rename so concurrent readers never observe partial files.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + tmp.string() + " -> " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return content;
}

// ---- base64 -----------------------------------------------------------------

inline std::string base64_encode(const unsigned char* data, std::size_t n) {
  static const char* alphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (std::size_t i = 0; i < n; i += 3) {
    std::uint32_t chunk = static_cast<std::uint32_t>(data[i]) << 16;
    if (i + 1 < n) chunk |= static_cast<std::uint32_t>(data[i + 1]) << 8;
    if (i + 2 < n) chunk |= static_cast<std::uint32_t>(data[i + 2]);
    out.push_back(alphabet[(chunk >> 18) & 63]);
    out.push_back(alphabet[(chunk >> 12) & 63]);
    out.push_back(i + 1 < n ? alphabet[(chunk >> 6) & 63] : '=');
    out.push_back(i + 2 < n ? alphabet[chunk & 63] : '=');
  }
  return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& text) {
  auto value_of = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    if (c == '=') return -1;
    throw IoError(std::string("base64: invalid character '") + c + "'");
  };
  if (text.size() % 4 != 0) throw IoError("base64: length not a multiple of 4");
  std::vector<unsigned char> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    for (int j = 0; j < 4; ++j) v[j] = value_of(text[i + j]);
    const std::uint32_t chunk = (static_cast<std::uint32_t>(v[0]) << 18) |
                                (static_cast<std::uint32_t>(v[1]) << 12) |
                                (v[2] < 0 ? 0u : static_cast<std::uint32_t>(v[2]) << 6) |
                                (v[3] < 0 ? 0u : static_cast<std::uint32_t>(v[3]));
    out.push_back(static_cast<unsigned char>((chunk >> 16) & 0xff));
    if (v[2] >= 0) out.push_back(static_cast<unsigned char>((chunk >> 8) & 0xff));
    if (v[3] >= 0) out.push_back(static_cast<unsigned char>(chunk & 0xff));
  }
  return out;
}

inline std::string doubles_to_base64(const std::vector<double>& values) {
  std::vector<unsigned char> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return base64_encode(bytes.data(), bytes.size());
}

inline std::vector<double> doubles_from_base64(const std::string& text, std::size_t expected) {
  const std::vector<unsigned char> bytes = base64_decode(text);
  if (bytes.size() != expected * 8)
    throw IoError("base64 payload holds " + std::to_string(bytes.size() / 8) +
                  " doubles, expected " + std::to_string(expected));
  std::vector<double> values(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
  return values;
}

// ---- DCPW weight container ----------------------------------------------------
//
// Flat little-endian binary layout:
//   magic "DCPW" | u32 version | u32 section count
//   section: str tag | u32 config count | (str key, f64 value)*
//            | u32 array count | (str name, u32 rank, u64 extents*, f64 data*)*
//   str: u32 length + bytes

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }
inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string origin)
      : data_(data), origin_(std::move(origin)) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + b])) << (8 * b);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + b])) << (8 * b);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw(char* dst, std::size_t n) {
    need(n);
    std::copy_n(data_.data() + pos_, n, dst);
    pos_ += n;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError("truncated weight container: " + origin_);
  }
  const std::string& data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace detail

struct WeightSection {
  std::string tag;
  std::map<std::string, double> config;
  std::vector<std::pair<std::string, Tensor>> arrays;
};

inline constexpr std::uint32_t kWeightFormatVersion = 1;

inline void save_weight_container(const std::filesystem::path& path,
                                  const std::vector<WeightSection>& sections) {
  std::string out;
  out.append("DCPW");
  detail::put_u32(out, kWeightFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(sections.size()));
  for (const WeightSection& section : sections) {
    detail::put_str(out, section.tag);
    detail::put_u32(out, static_cast<std::uint32_t>(section.config.size()));
    for (const auto& [key, value] : section.config) {
      detail::put_str(out, key);
      detail::put_f64(out, value);
    }
    detail::put_u32(out, static_cast<std::uint32_t>(section.arrays.size()));
    for (const auto& [name, tensor] : section.arrays) {
      detail::put_str(out, name);
      detail::put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
      for (std::size_t extent : tensor.shape) detail::put_u64(out, extent);
      for (double v : tensor.values()) detail::put_f64(out, v);
    }
  }
  atomic_write_file(path, out);
}

inline std::vector<WeightSection> load_weight_container(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  detail::ByteReader in(data, path.string());
  char magic[4];
  in.raw(magic, 4);
  if (std::string(magic, 4) != "DCPW") throw IoError("bad magic in " + path.string());
  const std::uint32_t version = in.u32();
  if (version != kWeightFormatVersion)
    throw IoError("unsupported container version " + std::to_string(version) + " in " +
                  path.string());
  std::vector<WeightSection> sections(in.u32());
  for (WeightSection& section : sections) {
    section.tag = in.str();
    const std::uint32_t n_config = in.u32();
    for (std::uint32_t i = 0; i < n_config; ++i) {
      std::string key = in.str();
      section.config[key] = in.f64();
    }
    const std::uint32_t n_arrays = in.u32();
    section.arrays.reserve(n_arrays);
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
      std::string name = in.str();
      Shape shape(in.u32());
      for (std::size_t& extent : shape) extent = in.u64();
      std::vector<double> values(numel(shape));
      for (double& v : values) v = in.f64();
      section.arrays.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
  }
  if (!in.done()) throw IoError("trailing bytes in " + path.string());
  return sections;
}

// ---- typed sections ---------------------------------------------------------

inline WeightSection encoder_section(const std::string& tag, const EncoderParams& p) {
  WeightSection s;
  s.tag = tag;
  const EncoderConfig& c = p.config;
  s.config = {{"n_layers", double(c.n_layers)},   {"model_dim", double(c.model_dim)},
              {"n_heads", double(c.n_heads)},     {"ffn_dim", double(c.ffn_dim)},
              {"max_seq", double(c.max_seq)},     {"embed_dim", double(c.embed_dim)},
              {"vocab_size", double(c.vocab_size)}, {"patch_dim", double(c.patch_dim)},
              {"ln_eps", c.ln_eps}};
  for_each_param(p, [&](const std::string& name, const Tensor& t) {
    s.arrays.emplace_back(name, t.detached());
  });
  return s;
}

/// Zero-valued parameter set with the shapes implied by the config.
inline EncoderParams empty_encoder(const EncoderConfig& c) {
  c.validate();
  EncoderParams p;
  p.config = c;
  const std::size_t d = c.model_dim;
  if (c.is_text()) {
    p.token_table = zeros({c.vocab_size, d});
  } else {
    p.patch_proj = zeros({c.patch_dim, d});
    p.patch_bias = zeros({d});
    p.class_token = zeros({1, d});
  }
  p.pos_embed = zeros({c.max_seq, d});
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    LayerParams lp;
    lp.ln1_gain = zeros({d});
    lp.ln1_bias = zeros({d});
    lp.attn.wq = zeros({d, d});
    lp.attn.bq = zeros({d});
    lp.attn.wk = zeros({d, d});
    lp.attn.bk = zeros({d});
    lp.attn.wv = zeros({d, d});
    lp.attn.bv = zeros({d});
    lp.attn.wo = zeros({d, d});
    lp.attn.bo = zeros({d});
    lp.ln2_gain = zeros({d});
    lp.ln2_bias = zeros({d});
    lp.ffn_w1 = zeros({d, c.ffn_dim});
    lp.ffn_b1 = zeros({c.ffn_dim});
    lp.ffn_w2 = zeros({c.ffn_dim, d});
    lp.ffn_b2 = zeros({d});
    p.layers.push_back(std::move(lp));
  }
  p.final_ln_gain = zeros({d});
  p.final_ln_bias = zeros({d});
  p.output_proj = zeros({d, c.embed_dim});
  return p;
}

namespace detail {

inline double cfg_at(const WeightSection& s, const std::string& key) {
  auto it = s.config.find(key);
  if (it == s.config.end()) throw IoError("weight section '" + s.tag + "' missing key " + key);
  return it->second;
}

template <typename Params>
void fill_params_from_section(Params& params, const WeightSection& section) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, tensor] : section.arrays) by_name[name] = &tensor;
  std::size_t used = 0;
  for_each_param(params, [&](const std::string& name, Tensor& t) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw IoError("weight section '" + section.tag + "' missing array " + name);
    if (it->second->shape != t.shape)
      throw IoError("weight section '" + section.tag + "' array " + name + " has shape " +
                    shape_str(it->second->shape) + ", expected " + shape_str(t.shape));
    t = it->second->detached();
    ++used;
  });
  if (used != section.arrays.size())
    throw IoError("weight section '" + section.tag + "' carries unexpected arrays");
}

}  // namespace detail

inline EncoderParams encoder_from_section(const WeightSection& s) {
  EncoderConfig c;
  c.n_layers = std::size_t(detail::cfg_at(s, "n_layers"));
  c.model_dim = std::size_t(detail::cfg_at(s, "model_dim"));
  c.n_heads = std::size_t(detail::cfg_at(s, "n_heads"));
  c.ffn_dim = std::size_t(detail::cfg_at(s, "ffn_dim"));
  c.max_seq = std::size_t(detail::cfg_at(s, "max_seq"));
  c.embed_dim = std::size_t(detail::cfg_at(s, "embed_dim"));
  c.vocab_size = std::size_t(detail::cfg_at(s, "vocab_size"));
  c.patch_dim = std::size_t(detail::cfg_at(s, "patch_dim"));
  c.ln_eps = detail::cfg_at(s, "ln_eps");
  EncoderParams p = empty_encoder(c);
  detail::fill_params_from_section(p, s);
  return p;
}

inline WeightSection bank_section(const PromptBank& bank, std::size_t d_text,
                                  std::size_t d_vision) {
  WeightSection s;
  s.tag = "prompt_bank";
  const PromptConfig& c = bank.config;
  s.config = {{"length", double(c.length)},
              {"depth", double(c.depth)},
              {"d_attn", double(c.d_attn)},
              {"n_heads", double(c.n_heads)},
              {"fusion", double(int(c.fusion))},
              {"share_params", c.share_params ? 1.0 : 0.0},
              {"residual", c.residual ? 1.0 : 0.0},
              {"use_layer_norm", c.use_layer_norm ? 1.0 : 0.0},
              {"literal", c.literal ? 1.0 : 0.0},
              {"d_text", double(d_text)},
              {"d_vision", double(d_vision)}};
  for_each_param(bank, [&](const std::string& name, const Tensor& t) {
    s.arrays.emplace_back(name, t.detached());
  });
  return s;
}

inline PromptBank empty_bank(const PromptConfig& c, std::size_t d_text, std::size_t d_vision) {
  c.validate();
  PromptBank bank;
  bank.config = c;
  bank.text_first = zeros({c.length, d_text});
  bank.vision_first = zeros({c.length, d_vision});
  if (!c.literal) {
    const std::size_t n_blocks = c.share_params ? 1 : c.depth - 1;
    for (std::size_t i = 0; i < n_blocks; ++i) {
      CmpaParams blk;
      blk.wq_text = zeros({d_vision, c.d_attn});
      blk.wk_text = zeros({d_text, c.d_attn});
      blk.wv_text = zeros({d_text, c.d_attn});
      blk.wo_text = zeros({c.d_attn, d_text});
      blk.wq_vision = zeros({d_text, c.d_attn});
      blk.wk_vision = zeros({d_vision, c.d_attn});
      blk.wv_vision = zeros({d_vision, c.d_attn});
      blk.wo_vision = zeros({c.d_attn, d_vision});
      bank.blocks.push_back(std::move(blk));
    }
  }
  return bank;
}

inline PromptBank bank_from_section(const WeightSection& s) {
  PromptConfig c;
  c.length = std::size_t(detail::cfg_at(s, "length"));
  c.depth = std::size_t(detail::cfg_at(s, "depth"));
  c.d_attn = std::size_t(detail::cfg_at(s, "d_attn"));
  c.n_heads = std::size_t(detail::cfg_at(s, "n_heads"));
  c.fusion = FusionMode(int(detail::cfg_at(s, "fusion")));
  c.share_params = detail::cfg_at(s, "share_params") != 0.0;
  c.residual = detail::cfg_at(s, "residual") != 0.0;
  c.use_layer_norm = detail::cfg_at(s, "use_layer_norm") != 0.0;
  c.literal = detail::cfg_at(s, "literal") != 0.0;
  PromptBank bank = empty_bank(c, std::size_t(detail::cfg_at(s, "d_text")),
                               std::size_t(detail::cfg_at(s, "d_vision")));
  detail::fill_params_from_section(bank, s);
  return bank;
}

}  // namespace dcp
