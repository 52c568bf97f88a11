#pragma once

// Training loop: mixed cross-entropy + velocity-MSE objective, AdamW with a
// tiny epsilon, global-norm gradient clipping, EMA shadow weights, linear
// warmup into a constant learning rate, and the ablation studies (expert
// variant, data mixture ratio, learning rate).
//
// Determinism contract: the batch stream is a pure function of (seed, step),
// so two arms sharing a seed consume identical data no matter how their
// models differ.

#include <string>
#include <vector>

#include "bagel/layout.hpp"
#include "bagel/model.hpp"
#include "bagel/rng.hpp"
#include "bagel/task.hpp"
#include "bagel/vision.hpp"

namespace bagel {

struct MixtureRatios {
  double gen = 0.5;
  double und = 0.3;
  double text = 0.2;
};

struct TrainConfig {
  double lr = 1.5e-3;
  int warmup_steps = -1;  // -1 resolves to 1% of total_steps, at least 1
  int total_steps = 400;
  double ce_weight = 0.25;
  double mse_weight = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-15;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  double ema_decay = 0.9999;
  MixtureRatios mixture;
  int pack_min = 192;
  int pack_max = 240;
  double timestep_shift = 4.0;
  Regime regime = Regime::InterleavedGen;
  double grouping_prob = 0.5;  // DiffusionForcing noise grouping
  double drop_text = 0.1;
  double drop_vit = 0.5;
  double drop_vae = 0.1;
  unsigned long long seed = 1;

  int resolved_warmup() const;
  void validate() const;
};

struct StepMetrics {
  int step = 0;
  double ce = 0.0;
  double mse = 0.0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
};

// Next-token targets aligned row for row with ForwardResult.text_logits.
// Prediction never crosses a split boundary: the last token of every text
// split gets -1, which the loss ignores.
std::vector<int> next_token_targets(const PackedSequence& packed,
                                    const std::vector<SampleInputs>& inputs);

// CE averaged over predicted text transitions plus MSE averaged over all
// noised latent elements, combined with the given weights into one scalar
// that carries the graph. Either term vanishes when the batch has no rows
// feeding it.
struct BatchLoss {
  Tensor total;
  double ce = 0.0;
  double mse = 0.0;
  int ce_rows = 0;           // text transitions contributing to CE
  long long mse_elements = 0;
};

BatchLoss compute_batch_loss(const PackedSequence& packed, const std::vector<SampleInputs>& inputs,
                             const ModelParams& params, const ToyVit& vit, double ce_weight,
                             double mse_weight);

class Trainer {
 public:
  // task and vit must outlive the trainer
  Trainer(ModelParams params, const TrainConfig& cfg, const ToyTask& task, const ToyVit& vit);

  // the step's sample mix; pure in (cfg.seed, step) so arms stay comparable
  std::vector<TaskSample> draw_batch(int step) const;

  StepMetrics run_step();
  std::vector<StepMetrics> train();  // cfg.total_steps of run_step

  int step_count() const { return step_; }
  double lr_at(int step) const;
  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }
  ModelParams ema_params() const;  // fresh parameter set holding the shadow values

 private:
  double apply_update(double lr);  // clip + AdamW + EMA; returns the pre-clip norm

  ModelParams params_;
  TrainConfig cfg_;
  const ToyTask* task_;
  const ToyVit* vit_;
  std::vector<Tensor*> trainable_;
  std::vector<std::vector<double>> m_, v_, ema_;
  int step_ = 0;
};

// The frozen vision tower and the initial parameters both derive from the
// run seed through fixed substreams, so a checkpoint plus its recorded seed
// reproduces the exact system that was trained.
ToyVit make_vit(const ModelConfig& cfg, unsigned long long seed);
ModelParams seeded_params(const ModelConfig& cfg, unsigned long long seed);

// one configuration of an ablation study
struct AblationArm {
  std::string name;
  ModelConfig model;
  TrainConfig train;
};

struct ArmResult {
  std::string name;
  std::vector<StepMetrics> history;
  double final_ce = 0.0;  // means over the trailing window
  double final_mse = 0.0;
};

// trains one arm from scratch; vit weights and initial parameters derive from
// arm.train.seed so arms with one seed share them wherever shapes agree
ArmResult run_arm(const AblationArm& arm, const ToyVae& vae, int tail_steps = 20);

std::vector<AblationArm> arch_arms(const ModelConfig& base, const TrainConfig& train);
std::vector<AblationArm> ratio_arms(const ModelConfig& base, const TrainConfig& train);
std::vector<AblationArm> lr_arms(const ModelConfig& base, const TrainConfig& train);

void append_metrics_jsonl(const std::string& path, const std::string& arm,
                          const std::vector<StepMetrics>& history);
void write_metrics_csv(const std::string& path, const std::vector<ArmResult>& arms);

}  // namespace bagel
