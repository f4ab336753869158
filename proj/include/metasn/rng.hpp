#pragma once

// Deterministic named random streams. All draws go through explicit
// conversions (no std:: distributions), so a given seed produces the same
// sequence on every platform. Substreams are derived by hashing a stream
// name into the base seed, letting the samplers keep class-choice,
// instance-choice and init randomness independent.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace metasn {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  RngStream derive(std::string_view name) const {
    return RngStream(seed_ ^ (fnv1a64(name) | 1ull));
  }

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // unbiased integer in [0, n)
  std::size_t uniform_below(std::size_t n) {
    if (n == 0) throw std::invalid_argument("uniform_below: n must be positive");
    const std::uint64_t span = (UINT64_MAX / n) * n;
    std::uint64_t x = next_u64();
    while (x >= span) x = next_u64();
    return static_cast<std::size_t>(x % n);
  }

  // standard normal via Box-Muller
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_below(i)]);
    }
  }

  // draw from a normalized probability vector; zero-probability entries are
  // never selected
  std::size_t categorical(const std::vector<double>& probs) {
    const double u = uniform();
    double cum = 0.0;
    std::size_t last_positive = probs.size();
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] <= 0.0) continue;
      last_positive = i;
      cum += probs[i];
      if (u < cum) return i;
    }
    if (last_positive == probs.size()) {
      throw std::invalid_argument("categorical: no positive probabilities");
    }
    return last_positive;  // rounding left cum slightly below 1
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace metasn
