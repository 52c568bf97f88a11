#pragma once

// Run configuration: one flat text file with [model], [train] and [run]
// sections of `key = value` lines, '#' comments. Command lines may override
// any field with repeated `--<section>.<key> <value>` pairs or a short alias
// (--steps, --variant, --seed, ...). The fully resolved state is serialized
// into every run directory before work starts.

#include <string>

#include "bagel/model.hpp"
#include "bagel/train.hpp"

namespace bagel {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  std::string out_dir = "runs/run";
  int ckpt_every = 0;  // 0 keeps only the final checkpoints
  // sampling knobs used by the generate command
  int sample_steps = 50;
  double cfg_text = 1.0;
  double cfg_image = 1.0;
  double temperature = 0.0;
  double schedule_shift = 1.0;

  bool seed_explicit = false;  // true once a file or flag assigned train.seed
};

// which alias table applies: `--steps` means training steps for train/ablate
// but sampling steps for generate
enum class CommandKind { Train, Generate, Other };

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);  // read file, then parse

// key is either section-qualified ("train.lr") or a known alias ("lr");
// unknown keys and unparsable values raise ConfigError
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value,
                    CommandKind command);

std::string serialize_run_config(const RunConfig& cfg);
void write_run_config(const RunConfig& cfg, const std::string& path);

}  // namespace bagel
