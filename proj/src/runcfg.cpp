#include "bagel/runcfg.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "bagel/errors.hpp"

namespace bagel {

namespace {

int to_int(const std::string& v, const std::string& key) {
  size_t used = 0;
  int out = 0;
  try {
    out = std::stoi(v, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  if (used != v.size()) throw ConfigError("config: '" + key + "' wants an integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& v, const std::string& key) {
  size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  if (used != v.size()) throw ConfigError("config: '" + key + "' wants a number, got '" + v + "'");
  return out;
}

unsigned long long to_u64(const std::string& v, const std::string& key) {
  size_t used = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  if (used != v.size())
    throw ConfigError("config: '" + key + "' wants an unsigned integer, got '" + v + "'");
  return out;
}

Regime to_regime(const std::string& v, const std::string& key) {
  if (v == "interleaved" || v == "ig") return Regime::InterleavedGen;
  if (v == "diffusion-forcing" || v == "df") return Regime::DiffusionForcing;
  throw ConfigError("config: '" + key + "' wants 'interleaved' or 'diffusion-forcing', got '" +
                    v + "'");
}

// returns false when the key is not recognized in its section
bool set_field(RunConfig& cfg, const std::string& key, const std::string& v) {
  ModelConfig& m = cfg.model;
  TrainConfig& t = cfg.train;
  if (key == "model.layers") m.layers = to_int(v, key);
  else if (key == "model.d_model") m.d_model = to_int(v, key);
  else if (key == "model.heads") m.heads = to_int(v, key);
  else if (key == "model.head_dim") m.head_dim = to_int(v, key);
  else if (key == "model.ffn_hidden") m.ffn_hidden = to_int(v, key);
  else if (key == "model.vocab_size") m.vocab_size = to_int(v, key);
  else if (key == "model.variant") m.variant = variant_from_name(v);
  else if (key == "model.latent_channels") m.latent_channels = to_int(v, key);
  else if (key == "model.patch") m.patch = to_int(v, key);
  else if (key == "model.vae_downsample") m.vae_downsample = to_int(v, key);
  else if (key == "model.vae_scale") m.vae_scale = to_double(v, key);
  else if (key == "model.vit_patch") m.vit_patch = to_int(v, key);
  else if (key == "model.vit_width") m.vit_width = to_int(v, key);
  else if (key == "model.temb_dim") m.temb_dim = to_int(v, key);
  else if (key == "model.norm_eps") m.norm_eps = to_double(v, key);
  else if (key == "model.rope_base") m.rope_base = to_double(v, key);
  else if (key == "train.lr") t.lr = to_double(v, key);
  else if (key == "train.warmup_steps") t.warmup_steps = to_int(v, key);
  else if (key == "train.total_steps") t.total_steps = to_int(v, key);
  else if (key == "train.ce_weight") t.ce_weight = to_double(v, key);
  else if (key == "train.mse_weight") t.mse_weight = to_double(v, key);
  else if (key == "train.beta1") t.beta1 = to_double(v, key);
  else if (key == "train.beta2") t.beta2 = to_double(v, key);
  else if (key == "train.adam_eps") t.adam_eps = to_double(v, key);
  else if (key == "train.weight_decay") t.weight_decay = to_double(v, key);
  else if (key == "train.grad_clip") t.grad_clip = to_double(v, key);
  else if (key == "train.ema_decay") t.ema_decay = to_double(v, key);
  else if (key == "train.mixture_gen") t.mixture.gen = to_double(v, key);
  else if (key == "train.mixture_und") t.mixture.und = to_double(v, key);
  else if (key == "train.mixture_text") t.mixture.text = to_double(v, key);
  else if (key == "train.pack_min") t.pack_min = to_int(v, key);
  else if (key == "train.pack_max") t.pack_max = to_int(v, key);
  else if (key == "train.timestep_shift") t.timestep_shift = to_double(v, key);
  else if (key == "train.regime") t.regime = to_regime(v, key);
  else if (key == "train.grouping_prob") t.grouping_prob = to_double(v, key);
  else if (key == "train.drop_text") t.drop_text = to_double(v, key);
  else if (key == "train.drop_vit") t.drop_vit = to_double(v, key);
  else if (key == "train.drop_vae") t.drop_vae = to_double(v, key);
  else if (key == "train.seed") {
    t.seed = to_u64(v, key);
    cfg.seed_explicit = true;
  } else if (key == "run.out_dir") cfg.out_dir = v;
  else if (key == "run.ckpt_every") cfg.ckpt_every = to_int(v, key);
  else if (key == "run.sample_steps") cfg.sample_steps = to_int(v, key);
  else if (key == "run.cfg_text") cfg.cfg_text = to_double(v, key);
  else if (key == "run.cfg_image") cfg.cfg_image = to_double(v, key);
  else if (key == "run.temperature") cfg.temperature = to_double(v, key);
  else if (key == "run.schedule_shift") cfg.schedule_shift = to_double(v, key);
  else return false;
  return true;
}

std::string resolve_alias(const std::string& key, CommandKind command) {
  if (key == "steps")
    return command == CommandKind::Generate ? "run.sample_steps" : "train.total_steps";
  if (key == "variant") return "model.variant";
  if (key == "seed") return "train.seed";
  if (key == "lr") return "train.lr";
  if (key == "out") return "run.out_dir";
  if (key == "cfg-text") return "run.cfg_text";
  if (key == "cfg-image") return "run.cfg_image";
  if (key == "temperature") return "run.temperature";
  if (key == "regime") return "train.regime";
  return key;
}

}  // namespace

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value,
                    CommandKind command) {
  const std::string resolved = resolve_alias(key, command);
  if (!set_field(cfg, resolved, value))
    throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream stream(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + why);
    };
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = line.substr(1, line.size() - 2);
      if (section != "model" && section != "train" && section != "run")
        fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) fail("expected 'key = value'");
    if (section.empty()) fail("key '" + key + "' appears before any section");
    if (!set_field(cfg, section + "." + key, value))
      fail("unknown key '" + key + "' in section [" + section + "]");
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream out;
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  const ModelConfig& m = cfg.model;
  const TrainConfig& t = cfg.train;
  out << "[model]\n"
      << "layers = " << m.layers << "\n"
      << "d_model = " << m.d_model << "\n"
      << "heads = " << m.heads << "\n"
      << "head_dim = " << m.head_dim << "\n"
      << "ffn_hidden = " << m.ffn_hidden << "\n"
      << "vocab_size = " << m.vocab_size << "\n"
      << "variant = " << variant_name(m.variant) << "\n"
      << "latent_channels = " << m.latent_channels << "\n"
      << "patch = " << m.patch << "\n"
      << "vae_downsample = " << m.vae_downsample << "\n"
      << "vae_scale = " << num(m.vae_scale) << "\n"
      << "vit_patch = " << m.vit_patch << "\n"
      << "vit_width = " << m.vit_width << "\n"
      << "temb_dim = " << m.temb_dim << "\n"
      << "norm_eps = " << num(m.norm_eps) << "\n"
      << "rope_base = " << num(m.rope_base) << "\n\n";
  out << "[train]\n"
      << "lr = " << num(t.lr) << "\n"
      << "warmup_steps = " << t.warmup_steps << "\n"
      << "total_steps = " << t.total_steps << "\n"
      << "ce_weight = " << num(t.ce_weight) << "\n"
      << "mse_weight = " << num(t.mse_weight) << "\n"
      << "beta1 = " << num(t.beta1) << "\n"
      << "beta2 = " << num(t.beta2) << "\n"
      << "adam_eps = " << num(t.adam_eps) << "\n"
      << "weight_decay = " << num(t.weight_decay) << "\n"
      << "grad_clip = " << num(t.grad_clip) << "\n"
      << "ema_decay = " << num(t.ema_decay) << "\n"
      << "mixture_gen = " << num(t.mixture.gen) << "\n"
      << "mixture_und = " << num(t.mixture.und) << "\n"
      << "mixture_text = " << num(t.mixture.text) << "\n"
      << "pack_min = " << t.pack_min << "\n"
      << "pack_max = " << t.pack_max << "\n"
      << "timestep_shift = " << num(t.timestep_shift) << "\n"
      << "regime = "
      << (t.regime == Regime::InterleavedGen ? "interleaved" : "diffusion-forcing") << "\n"
      << "grouping_prob = " << num(t.grouping_prob) << "\n"
      << "drop_text = " << num(t.drop_text) << "\n"
      << "drop_vit = " << num(t.drop_vit) << "\n"
      << "drop_vae = " << num(t.drop_vae) << "\n"
      << "seed = " << t.seed << "\n\n";
  out << "[run]\n"
      << "out_dir = " << cfg.out_dir << "\n"
      << "ckpt_every = " << cfg.ckpt_every << "\n"
      << "sample_steps = " << cfg.sample_steps << "\n"
      << "cfg_text = " << num(cfg.cfg_text) << "\n"
      << "cfg_image = " << num(cfg.cfg_image) << "\n"
      << "temperature = " << num(cfg.temperature) << "\n"
      << "schedule_shift = " << num(cfg.schedule_shift) << "\n";
  return out.str();
}

void write_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config snapshot: " + path);
  out << serialize_run_config(cfg);
}

}  // namespace bagel
