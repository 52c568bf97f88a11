#include "bagel/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <utility>

#include "json.hpp"

#include "bagel/errors.hpp"
#include "bagel/mask.hpp"

namespace bagel {

namespace {

// fork streams off the run seed; data gets a fresh stream per step
constexpr unsigned long long kVitStream = 1;
constexpr unsigned long long kParamStream = 2;
constexpr unsigned long long kDataStreamBase = 1000;

PackedSequence pack_directly(std::vector<SampleLayout> samples) {
  PackedSequence packed;
  packed.samples = std::move(samples);
  for (const auto& s : packed.samples) {
    packed.sample_offsets.push_back(packed.total_tokens);
    packed.total_tokens += s.total_tokens();
  }
  return packed;
}

}  // namespace

int TrainConfig::resolved_warmup() const {
  if (warmup_steps >= 0) return warmup_steps;
  return std::max(1, total_steps / 100);
}

void TrainConfig::validate() const {
  if (lr <= 0.0) throw ConfigError("train config: lr must be positive");
  if (total_steps <= 0) throw ConfigError("train config: total_steps must be positive");
  if (ce_weight <= 0.0 || mse_weight <= 0.0)
    throw ConfigError("train config: loss weights must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ConfigError("train config: betas must lie in [0, 1)");
  if (adam_eps <= 0.0) throw ConfigError("train config: adam_eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be non-negative");
  if (grad_clip <= 0.0) throw ConfigError("train config: grad_clip must be positive");
  if (ema_decay < 0.0 || ema_decay > 1.0)
    throw ConfigError("train config: ema_decay must lie in [0, 1]");
  if (mixture.gen < 0.0 || mixture.und < 0.0 || mixture.text < 0.0)
    throw ConfigError("train config: mixture ratios must be non-negative");
  if (std::abs(mixture.gen + mixture.und + mixture.text - 1.0) > 1e-6)
    throw ConfigError("train config: mixture ratios must sum to 1");
  if (pack_min <= 0 || pack_max < pack_min)
    throw ConfigError("train config: pack range must satisfy 0 < min <= max");
  if (timestep_shift < 1.0) throw ConfigError("train config: timestep_shift must be >= 1");
  if (grouping_prob < 0.0 || grouping_prob > 1.0)
    throw ConfigError("train config: grouping_prob must lie in [0, 1]");
  for (double p : {drop_text, drop_vit, drop_vae})
    if (p < 0.0 || p > 1.0) throw ConfigError("train config: drop probabilities must lie in [0, 1]");
}

std::vector<int> next_token_targets(const PackedSequence& packed,
                                    const std::vector<SampleInputs>& inputs) {
  std::vector<int> targets;
  for (size_t s = 0; s < packed.samples.size(); ++s) {
    size_t text_ix = 0;
    for (const auto& split : packed.samples[s].splits) {
      if (split.kind != ModalityKind::Text) continue;
      const auto& ids = inputs[s].text.at(text_ix++);
      for (size_t i = 0; i < ids.size(); ++i)
        targets.push_back(i + 1 < ids.size() ? ids[i + 1] : -1);
    }
  }
  return targets;
}

BatchLoss compute_batch_loss(const PackedSequence& packed, const std::vector<SampleInputs>& inputs,
                             const ModelParams& params, const ToyVit& vit, double ce_weight,
                             double mse_weight) {
  MaskSpec mask = build_mask(packed);
  ForwardResult out = forward_model(packed, mask, inputs, params, vit);

  BatchLoss result;
  Tensor total;
  bool have_total = false;

  if (out.text_logits.numel() > 0) {
    std::vector<int> targets = next_token_targets(packed, inputs);
    for (int t : targets) result.ce_rows += t >= 0 ? 1 : 0;
    if (result.ce_rows > 0) {
      Tensor ce = cross_entropy_mean(out.text_logits, targets);
      result.ce = scalar_value(ce);
      total = scale(ce, ce_weight);
      have_total = true;
    }
  }

  if (!out.velocities.empty()) {
    Tensor sq_sum;
    long long elements = 0;
    for (const auto& vel : out.velocities) {
      const auto& in = inputs[static_cast<size_t>(vel.sample)];
      const Tensor& x0 = in.clean.at(static_cast<size_t>(vel.image_id));
      const Tensor& eps = in.eps.at(static_cast<size_t>(vel.image_id));
      Tensor target = sub(eps, x0);  // the rectified-flow velocity
      Tensor sq = sum_sq_diff(vel.v, target);
      sq_sum = elements == 0 ? sq : add(sq_sum, sq);
      elements += vel.v.numel();
    }
    Tensor mse = scale(sq_sum, 1.0 / static_cast<double>(elements));
    result.mse = scalar_value(mse);
    result.mse_elements = elements;
    Tensor weighted = scale(mse, mse_weight);
    total = have_total ? add(total, weighted) : weighted;
    have_total = true;
  }

  if (!have_total) throw LayoutError("batch loss: batch feeds neither loss term");
  result.total = total;
  return result;
}

Trainer::Trainer(ModelParams params, const TrainConfig& cfg, const ToyTask& task,
                 const ToyVit& vit)
    : params_(std::move(params)), cfg_(cfg), task_(&task), vit_(&vit) {
  cfg_.validate();
  trainable_ = params_.trainable();
  m_.resize(trainable_.size());
  v_.resize(trainable_.size());
  ema_.resize(trainable_.size());
  for (size_t i = 0; i < trainable_.size(); ++i) {
    const size_t n = trainable_[i]->numel();
    m_[i].assign(n, 0.0);
    v_[i].assign(n, 0.0);
    ema_[i] = *trainable_[i]->data;  // shadow starts at the initial weights
  }
}

double Trainer::lr_at(int step) const {
  const int warmup = cfg_.resolved_warmup();
  if (warmup > 0 && step < warmup) return cfg_.lr * (step + 1) / warmup;
  return cfg_.lr;
}

std::vector<TaskSample> Trainer::draw_batch(int step) const {
  Rng base(cfg_.seed);
  Rng rng = base.fork(kDataStreamBase + static_cast<unsigned long long>(step));

  std::vector<TaskSample> batch;
  int total = 0;
  for (;;) {
    const double u = rng.uniform();
    TaskSample s;
    if (u < cfg_.mixture.gen) {
      s = task_->make_generation_sample(task_->draw_train_attributes(rng), cfg_.timestep_shift,
                                        rng, cfg_.regime, cfg_.grouping_prob);
      apply_cfg_dropout(s.layout, rng, cfg_.drop_text, cfg_.drop_vit, cfg_.drop_vae);
    } else if (u < cfg_.mixture.gen + cfg_.mixture.und) {
      s = task_->make_understanding_sample(task_->draw_train_attributes(rng));
    } else {
      s = task_->make_text_sample(task_->draw_train_attributes(rng));
    }
    const int len = s.layout.total_tokens();
    if (total + len > cfg_.pack_max) {
      if (batch.empty())
        throw ConfigError("draw_batch: pack_max smaller than a single sample");
      break;
    }
    total += len;
    batch.push_back(std::move(s));
    if (total >= cfg_.pack_min) break;
  }
  return batch;
}

StepMetrics Trainer::run_step() {
  std::vector<TaskSample> batch = draw_batch(step_);
  std::vector<SampleLayout> layouts;
  std::vector<SampleInputs> inputs;
  layouts.reserve(batch.size());
  inputs.reserve(batch.size());
  for (auto& s : batch) {
    layouts.push_back(std::move(s.layout));
    inputs.push_back(std::move(s.inputs));
  }
  PackedSequence packed = pack_directly(std::move(layouts));

  for (Tensor* t : trainable_) t->zero_grad();
  BatchLoss loss = compute_batch_loss(packed, inputs, params_, *vit_, cfg_.ce_weight,
                                      cfg_.mse_weight);
  const double loss_val = scalar_value(loss.total);
  if (!std::isfinite(loss_val)) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "train step %d: non-finite loss (ce=%g mse=%g, %d samples, %d tokens)", step_,
                  loss.ce, loss.mse, static_cast<int>(packed.samples.size()), packed.total_tokens);
    throw NumericError(buf);
  }
  backward(loss.total);

  StepMetrics metrics;
  metrics.step = step_;
  metrics.ce = loss.ce;
  metrics.mse = loss.mse;
  metrics.loss = loss_val;
  metrics.lr = lr_at(step_);
  metrics.grad_norm = apply_update(metrics.lr);
  if (!std::isfinite(metrics.grad_norm)) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "train step %d: non-finite gradient norm", step_);
    throw NumericError(buf);
  }
  ++step_;
  return metrics;
}

double Trainer::apply_update(double lr) {
  double sq = 0.0;
  for (Tensor* t : trainable_) {
    if (!t->grad) continue;
    for (double g : *t->grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double scale = norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;

  const int t_step = step_ + 1;  // bias correction is 1-indexed
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_step);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_step);

  for (size_t i = 0; i < trainable_.size(); ++i) {
    Tensor* t = trainable_[i];
    auto& data = *t->data;
    auto& m = m_[i];
    auto& v = v_[i];
    auto& ema = ema_[i];
    for (size_t j = 0; j < data.size(); ++j) {
      const double g = (t->grad ? (*t->grad)[j] : 0.0) * scale;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      data[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.adam_eps) + cfg_.weight_decay * data[j]);
      ema[j] = cfg_.ema_decay * ema[j] + (1.0 - cfg_.ema_decay) * data[j];
    }
  }
  return norm;
}

std::vector<StepMetrics> Trainer::train() {
  std::vector<StepMetrics> history;
  history.reserve(static_cast<size_t>(cfg_.total_steps));
  while (step_ < cfg_.total_steps) history.push_back(run_step());
  return history;
}

ModelParams Trainer::ema_params() const {
  // rebuild a parameter set with the variant's aliasing intact, then drop the
  // shadow values in; trainable() orders tensors identically for equal configs
  Rng scratch(0);
  ModelParams out = init_params(params_.cfg, scratch);
  std::vector<Tensor*> slots = out.trainable();
  if (slots.size() != ema_.size())
    throw ConfigError("ema_params: parameter set shape drifted");
  for (size_t i = 0; i < slots.size(); ++i) *slots[i]->data = ema_[i];
  return out;
}

ToyVit make_vit(const ModelConfig& cfg, unsigned long long seed) {
  Rng base(seed);
  Rng vit_rng = base.fork(kVitStream);
  return ToyVit(cfg.vit_patch, cfg.vit_width, vit_rng);
}

ModelParams seeded_params(const ModelConfig& cfg, unsigned long long seed) {
  Rng base(seed);
  Rng param_rng = base.fork(kParamStream);
  return init_params(cfg, param_rng);
}

ArmResult run_arm(const AblationArm& arm, const ToyVae& vae, int tail_steps) {
  arm.model.validate();
  arm.train.validate();

  ToyVit vit = make_vit(arm.model, arm.train.seed);
  ModelParams params = seeded_params(arm.model, arm.train.seed);
  ToyTask task(vae);

  Trainer trainer(std::move(params), arm.train, task, vit);
  ArmResult result;
  result.name = arm.name;
  result.history = trainer.train();

  const int tail = std::min<int>(tail_steps, static_cast<int>(result.history.size()));
  if (tail > 0) {
    for (size_t i = result.history.size() - static_cast<size_t>(tail); i < result.history.size();
         ++i) {
      result.final_ce += result.history[i].ce;
      result.final_mse += result.history[i].mse;
    }
    result.final_ce /= tail;
    result.final_mse /= tail;
  }
  return result;
}

std::vector<AblationArm> arch_arms(const ModelConfig& base, const TrainConfig& train) {
  std::vector<AblationArm> arms;
  for (Variant v : {Variant::Dense, Variant::MoE, Variant::MoT}) {
    AblationArm arm{variant_name(v), base, train};
    arm.model.variant = v;
    arms.push_back(std::move(arm));
  }
  return arms;
}

std::vector<AblationArm> ratio_arms(const ModelConfig& base, const TrainConfig& train) {
  // generation:understanding sampling ratios from the mixture study
  const struct {
    const char* name;
    double gen, und;
  } ratios[] = {{"1g1u", 0.5, 0.5}, {"2g1u", 2.0 / 3.0, 1.0 / 3.0}, {"4g1u", 0.8, 0.2}};
  std::vector<AblationArm> arms;
  for (const auto& r : ratios) {
    AblationArm arm{r.name, base, train};
    arm.train.mixture = {r.gen, r.und, 0.0};
    arms.push_back(std::move(arm));
  }
  return arms;
}

std::vector<AblationArm> lr_arms(const ModelConfig& base, const TrainConfig& train) {
  std::vector<AblationArm> arms;
  for (double factor : {1.0, 4.0}) {
    char name[40];
    std::snprintf(name, sizeof name, "lr-%g", train.lr * factor);
    AblationArm arm{name, base, train};
    arm.train.lr = train.lr * factor;
    arms.push_back(std::move(arm));
  }
  return arms;
}

void append_metrics_jsonl(const std::string& path, const std::string& arm,
                          const std::vector<StepMetrics>& history) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw ConfigError("cannot open metrics file: " + path);
  for (const auto& m : history) {
    nlohmann::json j{{"step", m.step}, {"arm", arm},          {"ce", m.ce},
                     {"mse", m.mse},   {"lr", m.lr},          {"grad_norm", m.grad_norm}};
    out << j.dump() << "\n";
  }
}

void write_metrics_csv(const std::string& path, const std::vector<ArmResult>& arms) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open csv file: " + path);
  out << "step,arm,ce,mse,lr,grad_norm\n";
  for (const auto& arm : arms)
    for (const auto& m : arm.history)
      out << m.step << ',' << arm.name << ',' << m.ce << ',' << m.mse << ',' << m.lr << ','
          << m.grad_norm << "\n";
}

}  // namespace bagel
