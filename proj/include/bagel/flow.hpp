#pragma once

// Rectified-flow primitives: shifted timestep sampling, linear noising,
// velocity-matching loss, Euler ODE sampling, classifier-free guidance.
//
// Conventions: x_t = (1 - t) * x0 + t * eps, so t = 1 is pure noise; the
// regression target is v = eps - x0, constant along the straight path.

#include <functional>
#include <vector>

#include "bagel/rng.hpp"
#include "bagel/tensor.hpp"

namespace bagel {

// u ~ Uniform(0,1) mapped through t = s*u / (1 + (s-1)*u); s = 1 is identity,
// larger s biases draws toward high noise
double sample_timestep(double shift, Rng& rng);

Tensor noise_latents(const Tensor& x0, const Tensor& eps, double t);

// MSE between v_pred and eps - x0 over the masked elements (empty mask = all)
Tensor flow_loss(const Tensor& v_pred, const Tensor& x0, const Tensor& eps,
                 const std::vector<uint8_t>& element_mask);

// n Euler steps from t=1 to t=0: schedule has n+1 strictly decreasing entries
std::vector<double> make_t_schedule(int steps);

// integrates x' = v(x, t) along the schedule; velocity is evaluated at the
// left endpoint of each interval
Tensor euler_sample(const std::function<Tensor(const Tensor&, double)>& velocity, Tensor x_start,
                    const std::vector<double>& t_schedule);

Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double w);

}  // namespace bagel
