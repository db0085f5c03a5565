#include "rlqfs/ndgrad/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "rlqfs/errors.hpp"

namespace rlqfs::nd {

Rng::Rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  engine_.seed(seq);
}

double Rng::uniform() {
  // 53 random bits, shifted half a step off zero.
  return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal(double mean, double stddev) {
  const double u1 = uniform();
  const double u2 = uniform();
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::gumbel() { return -std::log(-std::log(uniform())); }

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw ContractError("uniform_int: empty range");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

Rng Rng::split() {
  const std::uint64_t a = engine_();
  const std::uint64_t b = engine_();
  Rng child;
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  child.engine_.seed(seq);
  return child;
}

std::string Rng::save_state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::load_state(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  if (!is) throw FormatError("invalid rng state", 0);
}

}  // namespace rlqfs::nd
