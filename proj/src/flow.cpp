#include "bagel/flow.hpp"

#include <cmath>
#include <string>

#include "bagel/errors.hpp"

namespace bagel {

double sample_timestep(double shift, Rng& rng) {
  if (shift < 1.0) throw ConfigError("sample_timestep: shift must be >= 1");
  const double u = rng.uniform();
  return shift * u / (1.0 + (shift - 1.0) * u);
}

Tensor noise_latents(const Tensor& x0, const Tensor& eps, double t) {
  if (x0.shape != eps.shape) throw ShapeError("noise_latents: shape mismatch");
  if (t < 0.0 || t > 1.0) throw ConfigError("noise_latents: t outside [0,1]");
  Tensor out = Tensor::zeros(x0.shape, false);
  for (size_t i = 0; i < x0.numel(); ++i) out.at(i) = (1.0 - t) * x0.at(i) + t * eps.at(i);
  return out;
}

Tensor flow_loss(const Tensor& v_pred, const Tensor& x0, const Tensor& eps,
                 const std::vector<uint8_t>& element_mask) {
  if (x0.shape != eps.shape || v_pred.shape != x0.shape)
    throw ShapeError("flow_loss: shape mismatch");
  Tensor target = Tensor::zeros(x0.shape, false);
  for (size_t i = 0; i < x0.numel(); ++i) target.at(i) = eps.at(i) - x0.at(i);
  return masked_mse_mean(v_pred, target, element_mask);
}

std::vector<double> make_t_schedule(int steps) {
  if (steps < 1) throw ConfigError("make_t_schedule: need at least one step");
  std::vector<double> sched(static_cast<size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i)
    sched[static_cast<size_t>(i)] = 1.0 - static_cast<double>(i) / steps;
  sched.back() = 0.0;
  return sched;
}

Tensor euler_sample(const std::function<Tensor(const Tensor&, double)>& velocity, Tensor x_start,
                    const std::vector<double>& t_schedule) {
  if (t_schedule.size() < 2) throw ConfigError("euler_sample: schedule needs >= 2 points");
  for (size_t i = 1; i < t_schedule.size(); ++i)
    if (!(t_schedule[i] < t_schedule[i - 1]))
      throw ConfigError("euler_sample: schedule must be strictly decreasing");

  Tensor x = Tensor::zeros(x_start.shape, false);
  std::copy(x_start.data->begin(), x_start.data->end(), x.data->begin());
  for (size_t k = 0; k + 1 < t_schedule.size(); ++k) {
    const double t = t_schedule[k];
    const double dt = t_schedule[k + 1] - t;  // negative: integrating toward t=0
    Tensor v = velocity(x, t);
    if (v.shape != x.shape) throw ShapeError("euler_sample: velocity shape mismatch");
    for (size_t i = 0; i < x.numel(); ++i) {
      x.at(i) += dt * v.at(i);
      if (!std::isfinite(x.at(i)))
        throw NumericError("euler_sample: non-finite latent at step " + std::to_string(k));
    }
  }
  return x;
}

Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double w) {
  if (v_cond.shape != v_uncond.shape) throw ShapeError("cfg_combine: shape mismatch");
  if (w < 0.0) throw ConfigError("cfg_combine: weight must be non-negative");
  Tensor out = Tensor::zeros(v_cond.shape, false);
  for (size_t i = 0; i < out.numel(); ++i)
    out.at(i) = v_uncond.at(i) + w * (v_cond.at(i) - v_uncond.at(i));
  return out;
}

}  // namespace bagel
