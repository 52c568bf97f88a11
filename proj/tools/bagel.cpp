// Command line entry point: train, ablate, generate, mask-dump, flops.
// Configuration comes from an optional file plus repeated `--key value`
// overrides; the resolved state is snapshotted into the run directory
// before any work starts.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bagel/ckpt.hpp"
#include "bagel/errors.hpp"
#include "bagel/infer.hpp"
#include "bagel/layout.hpp"
#include "bagel/mask.hpp"
#include "bagel/model.hpp"
#include "bagel/runcfg.hpp"
#include "bagel/task.hpp"
#include "bagel/train.hpp"
#include "bagel/vision.hpp"

namespace {

using namespace bagel;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Unrecognized flags are config overrides: `--train.lr 2e-3 --variant moe`.
RunConfig make_config(const std::string& config_path, const std::vector<std::string>& extras,
                      CommandKind command) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = load_run_config(config_path);
  for (size_t i = 0; i < extras.size(); i += 2) {
    const std::string& key = extras[i];
    if (key.size() < 3 || key.compare(0, 2, "--") != 0)
      throw ConfigError("override must look like --key value, got '" + key + "'");
    if (i + 1 >= extras.size()) throw ConfigError("override '" + key + "' is missing its value");
    apply_override(cfg, key.substr(2), extras[i + 1], command);
  }
  if (!cfg.seed_explicit) {
    if (const char* env = std::getenv("BAGEL_TOY_SEED")) {
      apply_override(cfg, "seed", env, command);
      if (!cfg.seed_explicit) throw ConfigError("BAGEL_TOY_SEED did not resolve to a seed");
    }
  }
  return cfg;
}

void snapshot_config(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  write_run_config(cfg, cfg.out_dir + "/config.resolved");
}

Regime regime_from_name(const std::string& name) {
  if (name == "interleaved" || name == "ig") return Regime::InterleavedGen;
  if (name == "diffusion-forcing" || name == "df") return Regime::DiffusionForcing;
  throw ConfigError("unknown regime: " + name);
}

ArmResult summarize(const std::string& name, std::vector<StepMetrics> history, int tail) {
  ArmResult r;
  r.name = name;
  r.history = std::move(history);
  const int n = static_cast<int>(r.history.size());
  const int window = std::min(tail, n);
  for (int i = n - window; i < n; ++i) {
    r.final_ce += r.history[i].ce;
    r.final_mse += r.history[i].mse;
  }
  if (window > 0) {
    r.final_ce /= window;
    r.final_mse /= window;
  }
  return r;
}

int cmd_train(RunConfig cfg) {
  cfg.model.validate();
  cfg.train.validate();
  snapshot_config(cfg);

  ToyVae vae(cfg.model.latent_channels, cfg.model.vae_downsample, cfg.model.vae_scale);
  ToyVit vit = make_vit(cfg.model, cfg.train.seed);
  ToyTask task(vae);
  Trainer trainer(seeded_params(cfg.model, cfg.train.seed), cfg.train, task, vit);

  std::printf("training %s for %d steps into %s\n", variant_name(cfg.model.variant),
              cfg.train.total_steps, cfg.out_dir.c_str());
  std::vector<StepMetrics> history;
  history.reserve(cfg.train.total_steps);
  for (int step = 0; step < cfg.train.total_steps; ++step) {
    StepMetrics m = trainer.run_step();
    history.push_back(m);
    if (step % 50 == 0 || step + 1 == cfg.train.total_steps)
      std::printf("step %4d  ce %.4f  mse %.4f  lr %.2e  gnorm %.3f\n", m.step, m.ce, m.mse, m.lr,
                  m.grad_norm);
    if (cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0 &&
        step + 1 < cfg.train.total_steps) {
      char name[32];
      std::snprintf(name, sizeof name, "ema-%06d.ckpt", step + 1);
      ModelParams ema = trainer.ema_params();
      save_checkpoint(cfg.out_dir + "/" + name, ema, cfg.train.seed);
    }
  }

  save_checkpoint(cfg.out_dir + "/final.ckpt", trainer.params(), cfg.train.seed);
  ModelParams ema = trainer.ema_params();
  save_checkpoint(cfg.out_dir + "/ema.ckpt", ema, cfg.train.seed);

  const std::string jsonl = cfg.out_dir + "/metrics.jsonl";
  std::ofstream(jsonl, std::ios::trunc);
  append_metrics_jsonl(jsonl, "train", history);
  ArmResult result = summarize("train", std::move(history), 20);
  write_metrics_csv(cfg.out_dir + "/metrics.csv", {result});
  std::printf("done: trailing ce %.4f  mse %.4f\n", result.final_ce, result.final_mse);
  return 0;
}

int cmd_ablate(RunConfig cfg, const std::string& axis) {
  cfg.model.validate();
  cfg.train.validate();
  snapshot_config(cfg);

  std::vector<AblationArm> arms;
  if (axis == "arch")
    arms = arch_arms(cfg.model, cfg.train);
  else if (axis == "ratio")
    arms = ratio_arms(cfg.model, cfg.train);
  else if (axis == "lr")
    arms = lr_arms(cfg.model, cfg.train);
  else
    throw ConfigError("unknown ablation axis: " + axis + " (want arch, ratio, or lr)");

  ToyVae vae(cfg.model.latent_channels, cfg.model.vae_downsample, cfg.model.vae_scale);
  const std::string jsonl = cfg.out_dir + "/metrics.jsonl";
  std::ofstream(jsonl, std::ios::trunc);

  std::vector<ArmResult> results;
  for (const auto& arm : arms) {
    std::printf("arm %-8s  (%d steps)\n", arm.name.c_str(), arm.train.total_steps);
    ArmResult r = run_arm(arm, vae);
    std::printf("  final ce %.4f  mse %.4f\n", r.final_ce, r.final_mse);
    append_metrics_jsonl(jsonl, r.name, r.history);
    results.push_back(std::move(r));
  }
  write_metrics_csv(cfg.out_dir + "/metrics.csv", results);
  std::printf("wrote %s\n", (cfg.out_dir + "/metrics.csv").c_str());
  return 0;
}

int cmd_generate(RunConfig cfg, const std::string& ckpt_path, const std::string& script_path) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
  cfg.model = loaded.params.cfg;
  // the vision tower is frozen at training time; only the sampling rng may be
  // reseeded from the command line
  const unsigned long long engine_seed = cfg.seed_explicit ? cfg.train.seed : loaded.seed;
  ToyVit vit = make_vit(loaded.params.cfg, loaded.seed);
  ToyVae vae(cfg.model.latent_channels, cfg.model.vae_downsample, cfg.model.vae_scale);

  auto script = parse_decode_script(read_file(script_path));
  SamplingDefaults defaults;
  defaults.steps = cfg.sample_steps;
  defaults.cfg_text = cfg.cfg_text;
  defaults.cfg_image = cfg.cfg_image;
  defaults.temperature = cfg.temperature;
  defaults.schedule_shift = cfg.schedule_shift;

  snapshot_config(cfg);
  InferenceEngine engine(loaded.params, vit, vae, engine_seed);
  Transcript transcript = run_script(engine, script, cfg.out_dir, defaults);

  for (const auto& seg : transcript.segments) {
    switch (seg.kind) {
      case TranscriptSegment::Kind::Prompt:
      case TranscriptSegment::Kind::Text: {
        std::string words;
        for (int id : seg.tokens) {
          if (!words.empty()) words.push_back(' ');
          words += id >= 0 && id < ToyVocab::size ? ToyVocab::word(id) : "<unk>";
        }
        std::printf("%s: %s\n",
                    seg.kind == TranscriptSegment::Kind::Prompt ? "prompt" : "text",
                    words.c_str());
        break;
      }
      case TranscriptSegment::Kind::Image:
        std::printf("image: %s\n", (cfg.out_dir + "/" + seg.image_file).c_str());
        break;
    }
  }
  std::printf("transcript: %s\n", (cfg.out_dir + "/transcript.json").c_str());
  return 0;
}

// One packed layout from a sample script plus a noise draw; the draw fixes
// the diffusion-forcing groups the mask depends on.
PackedSequence packed_from_script(const std::string& script_path, Regime regime,
                                  double grouping_prob, unsigned long long seed) {
  auto items = parse_sample_script(read_file(script_path));
  SampleLayout layout = build_sample_layout(items, regime);
  Rng rng(seed);
  if (regime == Regime::DiffusionForcing)
    assign_noise_levels(layout, grouping_prob, 1.0, rng);
  else
    assign_independent_noise(layout, 1.0, rng);
  return pack_one(layout);
}

int cmd_mask_dump(const std::string& script_path, const std::string& regime_name,
                  double grouping_prob, unsigned long long seed, bool use_oracle) {
  PackedSequence packed =
      packed_from_script(script_path, regime_from_name(regime_name), grouping_prob, seed);
  MaskSpec mask = use_oracle ? oracle_mask(packed) : build_mask(packed);
  std::fputs(render_mask(mask).c_str(), stdout);

  long long permitted = 0;
  for (uint8_t b : mask.allow) permitted += b;
  auto intervals = mask_to_intervals(mask);
  std::printf("tokens %d  permitted %lld of %lld  intervals %zu\n", mask.rows, permitted,
              static_cast<long long>(mask.rows) * mask.cols, intervals.size());
  return 0;
}

int cmd_flops(RunConfig cfg, const std::string& script_path, const std::string& regime_name) {
  cfg.model.validate();
  PackedSequence packed =
      packed_from_script(script_path, regime_from_name(regime_name), cfg.train.grouping_prob,
                         cfg.train.seed);
  std::printf("variant %s  tokens %d  flops %lld\n", variant_name(cfg.model.variant),
              packed.total_tokens, count_flops(cfg.model, packed));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"toy unified multimodal transformer"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "run configuration file")->expected(1);

  auto* train = app.add_subcommand("train", "train one model and write checkpoints");
  train->allow_extras();

  auto* ablate = app.add_subcommand("ablate", "train comparable arms along one axis");
  std::string axis = "arch";
  ablate->add_option("--axis", axis, "arch, ratio, or lr");
  ablate->allow_extras();

  auto* generate = app.add_subcommand("generate", "run a decode script against a checkpoint");
  std::string ckpt_path, decode_script;
  generate->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  generate->add_option("--script", decode_script, "decode script file")->required();
  generate->allow_extras();

  auto* mask_dump = app.add_subcommand("mask-dump", "print the attention mask for a layout");
  std::string mask_script, regime_name = "interleaved";
  double grouping_prob = 0.5;
  unsigned long long mask_seed = 1;
  bool use_oracle = false;
  mask_dump->add_option("--script", mask_script, "sample script file")->required();
  mask_dump->add_option("--regime", regime_name, "interleaved or diffusion-forcing");
  mask_dump->add_option("--grouping-prob", grouping_prob, "diffusion-forcing group probability");
  mask_dump->add_option("--seed", mask_seed, "noise draw seed");
  mask_dump->add_flag("--oracle", use_oracle, "use the reference rule table");

  auto* flops = app.add_subcommand("flops", "count forward flops for a layout");
  std::string flops_script, flops_regime = "interleaved";
  flops->add_option("--script", flops_script, "sample script file")->required();
  flops->add_option("--regime", flops_regime, "interleaved or diffusion-forcing");
  flops->allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (train->parsed())
      return cmd_train(make_config(config_path, train->remaining(), CommandKind::Train));
    if (ablate->parsed())
      return cmd_ablate(make_config(config_path, ablate->remaining(), CommandKind::Train), axis);
    if (generate->parsed())
      return cmd_generate(make_config(config_path, generate->remaining(), CommandKind::Generate),
                          ckpt_path, decode_script);
    if (mask_dump->parsed())
      return cmd_mask_dump(mask_script, regime_name, grouping_prob, mask_seed, use_oracle);
    if (flops->parsed())
      return cmd_flops(make_config(config_path, flops->remaining(), CommandKind::Other),
                       flops_script, flops_regime);
  } catch (const bagel::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const bagel::LayoutError& e) {
    std::cerr << "layout error: " << e.what() << "\n";
    return 2;
  } catch (const bagel::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const bagel::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
