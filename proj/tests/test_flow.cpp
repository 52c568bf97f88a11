#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <vector>

#include "bagel/flow.hpp"
#include "doctest.h"

using namespace bagel;

TEST_CASE("noising is the straight path between sample and noise") {
  Rng rng(1);
  Tensor x0 = Tensor::randn({2, 3}, rng);
  Tensor eps = Tensor::randn({2, 3}, rng);

  Tensor at0 = noise_latents(x0, eps, 0.0);
  Tensor at1 = noise_latents(x0, eps, 1.0);
  Tensor mid = noise_latents(x0, eps, 0.3);
  for (size_t i = 0; i < x0.numel(); ++i) {
    CHECK(at0.at(i) == x0.at(i));
    CHECK(at1.at(i) == eps.at(i));
    CHECK(mid.at(i) == doctest::Approx(0.7 * x0.at(i) + 0.3 * eps.at(i)).epsilon(1e-12));
  }
}

TEST_CASE("timestep draws follow the shifted distribution") {
  // t = s u / (1 + (s-1) u) has cdf F(t) = t / (s - (s-1) t)
  for (double s : {1.0, 4.0}) {
    Rng rng(17);
    const int n = 100000;
    std::vector<double> draws(n);
    for (auto& d : draws) {
      d = sample_timestep(s, rng);
      CHECK(d > 0.0);
      CHECK(d < 1.0);
    }
    std::sort(draws.begin(), draws.end());
    double ks = 0.0;
    for (int i = 0; i < n; ++i) {
      const double t = draws[static_cast<size_t>(i)];
      const double cdf = t / (s - (s - 1.0) * t);
      ks = std::max(ks, std::fabs(cdf - (i + 1.0) / n));
      ks = std::max(ks, std::fabs(cdf - static_cast<double>(i) / n));
    }
    CHECK(ks < 0.01);
  }

  // the shift pushes mass toward high noise
  Rng a(3), b(3);
  double plain = 0, shifted = 0;
  for (int i = 0; i < 20000; ++i) {
    plain += sample_timestep(1.0, a);
    shifted += sample_timestep(4.0, b);
  }
  CHECK(shifted / 20000 > plain / 20000 + 0.15);
}

TEST_CASE("schedules run from pure noise to data") {
  for (int steps : {1, 3, 50}) {
    auto sched = make_t_schedule(steps);
    REQUIRE(static_cast<int>(sched.size()) == steps + 1);
    CHECK(sched.front() == 1.0);
    CHECK(sched.back() == 0.0);
    for (size_t i = 1; i < sched.size(); ++i) CHECK(sched[i] < sched[i - 1]);
  }
  CHECK_THROWS_AS(make_t_schedule(0), ConfigError);
}

TEST_CASE("euler integration is exact for the rectified target field") {
  Rng rng(5);
  Tensor x0 = Tensor::randn({3, 4}, rng);
  Tensor eps = Tensor::randn({3, 4}, rng);
  Tensor v = sub(eps, x0);  // constant along the path, so any step count lands

  for (int steps : {1, 3, 50}) {
    Tensor got = euler_sample([&](const Tensor&, double) { return v; }, eps,
                              make_t_schedule(steps));
    for (size_t i = 0; i < x0.numel(); ++i)
      CHECK(got.at(i) == doctest::Approx(x0.at(i)).epsilon(1e-12));
  }
}

TEST_CASE("euler converges on a state-dependent field") {
  // x' = -x integrated from t=1 to 0 grows by e; compare step counts
  Tensor x1 = Tensor::from_values({1}, {1.0});
  auto field = [](const Tensor& x, double) { return scale(x, -1.0); };
  Tensor coarse = euler_sample(field, x1, make_t_schedule(8));
  Tensor fine = euler_sample(field, x1, make_t_schedule(4096));
  const double target = std::exp(1.0);
  CHECK(std::fabs(fine.at(size_t{0}) - target) < 1e-3);
  CHECK(std::fabs(fine.at(size_t{0}) - target) < std::fabs(coarse.at(size_t{0}) - target));
}

TEST_CASE("guidance weights interpolate and extrapolate") {
  Rng rng(6);
  Tensor cond = Tensor::randn({2, 2}, rng);
  Tensor uncond = Tensor::randn({2, 2}, rng);

  Tensor at1 = cfg_combine(cond, uncond, 1.0);
  Tensor at0 = cfg_combine(cond, uncond, 0.0);
  Tensor at2 = cfg_combine(cond, uncond, 2.0);
  for (size_t i = 0; i < cond.numel(); ++i) {
    CHECK(at1.at(i) == doctest::Approx(cond.at(i)).epsilon(1e-12));
    CHECK(at0.at(i) == doctest::Approx(uncond.at(i)).epsilon(1e-12));
    CHECK(at2.at(i) ==
          doctest::Approx(2.0 * cond.at(i) - uncond.at(i)).epsilon(1e-12));
  }
}

TEST_CASE("flow loss measures only the masked elements") {
  Rng rng(7);
  Tensor x0 = Tensor::randn({2, 3}, rng);
  Tensor eps = Tensor::randn({2, 3}, rng);

  Tensor perfect = sub(eps, x0);
  CHECK(scalar_value(flow_loss(perfect, x0, eps, {})) == doctest::Approx(0.0).epsilon(1e-12));

  Tensor pred = Tensor::randn({2, 3}, rng);
  std::vector<uint8_t> mask = {1, 0, 1, 0, 0, 1};
  double want = 0.0;
  for (size_t i = 0; i < 6; ++i) {
    if (!mask[i]) continue;
    const double d = pred.at(i) - (eps.at(i) - x0.at(i));
    want += d * d;
  }
  want /= 3.0;
  CHECK(scalar_value(flow_loss(pred, x0, eps, mask)) == doctest::Approx(want).epsilon(1e-12));

  // elements outside the mask cannot move the loss
  Tensor poked = Tensor::from_values(pred.shape, *pred.data);
  poked.at(1) += 100.0;
  CHECK(scalar_value(flow_loss(poked, x0, eps, mask)) == doctest::Approx(want).epsilon(1e-12));
}
