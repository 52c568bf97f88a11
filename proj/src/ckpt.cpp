#include "bagel/ckpt.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "json.hpp"

#include "bagel/errors.hpp"
#include "bagel/rng.hpp"

namespace bagel {

namespace {

constexpr char kMagic[4] = {'B', 'G', 'L', 'T'};
constexpr int kVersion = 1;

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return {{"layers", cfg.layers},
          {"d_model", cfg.d_model},
          {"heads", cfg.heads},
          {"head_dim", cfg.head_dim},
          {"ffn_hidden", cfg.ffn_hidden},
          {"vocab_size", cfg.vocab_size},
          {"latent_channels", cfg.latent_channels},
          {"patch", cfg.patch},
          {"vae_downsample", cfg.vae_downsample},
          {"vae_scale", cfg.vae_scale},
          {"vit_patch", cfg.vit_patch},
          {"vit_width", cfg.vit_width},
          {"temb_dim", cfg.temb_dim},
          {"norm_eps", cfg.norm_eps},
          {"rope_base", cfg.rope_base}};
}

ModelConfig config_from_json(const nlohmann::json& j, Variant variant) {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.layers = j.at("layers").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.head_dim = j.at("head_dim").get<int>();
  cfg.ffn_hidden = j.at("ffn_hidden").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.latent_channels = j.at("latent_channels").get<int>();
  cfg.patch = j.at("patch").get<int>();
  cfg.vae_downsample = j.at("vae_downsample").get<int>();
  cfg.vae_scale = j.at("vae_scale").get<double>();
  cfg.vit_patch = j.at("vit_patch").get<int>();
  cfg.vit_width = j.at("vit_width").get<int>();
  cfg.temb_dim = j.at("temb_dim").get<int>();
  cfg.norm_eps = j.at("norm_eps").get<double>();
  cfg.rope_base = j.at("rope_base").get<double>();
  return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, ModelParams& params, unsigned long long seed) {
  auto named = params.named_tensors();

  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : named) {
    tensors.push_back({{"name", name}, {"shape", t->shape}, {"offset", offset}});
    offset += t->numel() * sizeof(double);
  }
  nlohmann::json header{{"version", kVersion},
                        {"variant", variant_name(params.cfg.variant)},
                        {"seed", seed},
                        {"model", config_to_json(params.cfg)},
                        {"tensors", std::move(tensors)}};
  const std::string header_text = header.dump();
  if (header_text.size() > UINT32_MAX) throw ConfigError("checkpoint header too large");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 4);
  const uint32_t header_len = static_cast<uint32_t>(header_text.size());
  char len_bytes[4];
  for (int i = 0; i < 4; ++i) len_bytes[i] = static_cast<char>((header_len >> (8 * i)) & 0xff);
  out.write(len_bytes, 4);
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, t] : named)
    out.write(reinterpret_cast<const char*>(t->data->data()),
              static_cast<std::streamsize>(t->numel() * sizeof(double)));
  if (!out) throw ConfigError("checkpoint write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw ConfigError("not a checkpoint file: " + path);
  uint32_t header_len = 0;
  for (int i = 0; i < 4; ++i)
    header_len |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
  if (bytes.size() < 8ull + header_len)
    throw ConfigError("checkpoint truncated in header: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  ModelConfig cfg;
  unsigned long long seed = 0;
  std::vector<std::tuple<std::string, std::vector<int>, uint64_t>> entries;
  try {
    if (header.at("version").get<int>() != kVersion)
      throw ConfigError("unsupported checkpoint version");
    cfg = config_from_json(header.at("model"),
                           variant_from_name(header.at("variant").get<std::string>()));
    seed = header.at("seed").get<unsigned long long>();
    for (const auto& t : header.at("tensors"))
      entries.emplace_back(t.at("name").get<std::string>(),
                           t.at("shape").get<std::vector<int>>(), t.at("offset").get<uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint header missing fields: ") + e.what());
  }
  cfg.validate();

  Rng scratch(0);
  ModelParams params = init_params(cfg, scratch);
  auto named = params.named_tensors();
  if (named.size() != entries.size())
    throw ConfigError("checkpoint tensor count does not match the recorded variant");

  const char* payload = bytes.data() + 8 + header_len;
  const uint64_t payload_size = bytes.size() - 8 - header_len;
  size_t ix = 0;
  for (auto& [name, t] : named) {
    const auto& [stored_name, stored_shape, offset] = entries[ix++];
    if (stored_name != name)
      throw ConfigError("checkpoint tensor order mismatch: expected " + name + ", found " +
                        stored_name);
    if (stored_shape != t->shape) throw ConfigError("checkpoint shape mismatch for " + name);
    const uint64_t len = t->numel() * sizeof(double);
    if (offset + len > payload_size)
      throw ConfigError("checkpoint truncated in payload at " + name);
    std::memcpy(t->data->data(), payload + offset, len);
  }
  return {std::move(params), seed};
}

}  // namespace bagel
