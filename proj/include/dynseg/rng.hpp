#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace dynseg {

// Seeded generator with distribution code written out explicitly, so draws are
// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform in (0, 1); safe for log().
  double uniform_open() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

// Mixes a base seed with a stream tag into an independent seed (splitmix64).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace dynseg
