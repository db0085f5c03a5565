#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace rlqfs::nd {

// Seeded, splittable generator. Every stochastic operation takes one of
// these explicitly; nothing reads global randomness.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on the open interval (0, 1).
  double uniform();
  double normal(double mean = 0.0, double stddev = 1.0);
  double gumbel();
  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  // Independent child stream; advances this generator.
  Rng split();

  std::string save_state() const;
  void load_state(const std::string& state);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace rlqfs::nd
