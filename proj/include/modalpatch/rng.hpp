#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace modalpatch {

// splitmix64 step; used to derive independent sub-stream seeds.
uint64_t splitmix64(uint64_t& state);

// Collapses (seed, tag, tag, ...) into one sub-stream seed.
uint64_t mix_seed(std::initializer_list<uint64_t> parts);

// Deterministic RNG. mt19937_64 output is fixed by the standard and the
// distributions here are hand-rolled, so streams are stable across
// platforms and standard-library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n);

  // Box-Muller with one cached value.
  double normal();
  double normal(double mu, double sd) { return mu + sd * normal(); }

 private:
  std::mt19937_64 eng_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace modalpatch
