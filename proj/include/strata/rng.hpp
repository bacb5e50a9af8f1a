#pragma once

#include <cstdint>
#include <cmath>

#include "strata/common.hpp"

namespace strata {

// Counter-based random numbers: every draw is a pure function of (seed, key path, counter).
// All stochastic choices in the engine route through keys derived from the run seed plus
// structural indices (loop, epoch, frame, person, ray, ...), so a paused-and-resumed run
// consumes exactly the same stream as an uninterrupted one.

namespace detail {
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}
}  // namespace detail

//! Mixes an arbitrary list of 64-bit keys into one well-distributed state.
inline uint64_t rng_key(std::initializer_list<uint64_t> keys) {
  uint64_t h = 0x8000000000001B3Dull;
  for (uint64_t k : keys) h = detail::splitmix64(h ^ k);
  return h;
}

//! Deterministic stream of draws for a fixed key; cheap to construct per use site.
class KeyedRng {
 public:
  explicit KeyedRng(uint64_t key) : state_(detail::splitmix64(key)) {}
  KeyedRng(uint64_t seed, std::initializer_list<uint64_t> keys)
      : KeyedRng(rng_key({seed, rng_key(keys)})) {}

  uint64_t next_u64() {
    state_ = detail::splitmix64(state_);
    return state_;
  }

  //! Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  //! Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  //! Standard normal via Box-Muller (consumes two uniforms per pair, caches the spare).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * kPi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  Vec3 normal3() {
    double a = normal(), b = normal(), c = normal();
    return Vec3(a, b, c);
  }

  Vec3 uniform_in_box(const Aabb& box) {
    return Vec3(uniform(box.lo.x(), box.hi.x()), uniform(box.lo.y(), box.hi.y()),
                uniform(box.lo.z(), box.hi.z()));
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace strata
