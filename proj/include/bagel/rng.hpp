#pragma once

#include <cmath>
#include <cstdint>

namespace bagel {

// splitmix64 generator. Deterministic across platforms and cheap to fork
// into independent streams, which is all the training loop needs.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal, Box-Muller; second draw of each pair is cached
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  uint64_t below(uint64_t n) { return next_u64() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  // child stream independent of future draws from this one
  Rng fork(uint64_t stream) const {
    Rng child(state_ ^ (0xda942042e4dd58b5ull * (stream + 1)));
    child.next_u64();
    return child;
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace bagel
