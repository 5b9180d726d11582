#pragma once

#include <cmath>
#include <cstdint>

namespace rsir {

// Splittable, seedable PRNG (splitmix64). The whole state is one u64, so it
// serializes into checkpoints trivially and produces identical streams on
// every platform. Callers own the state; nothing in the library touches a
// global generator.
class RngState {
 public:
  explicit RngState(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  template <class T>
  T uniform() {
    return static_cast<T>(next_double());
  }

  // Standard normal via Box-Muller. No cached spare: keeps the state a
  // single u64 at the cost of one wasted draw.
  double next_normal() {
    double u1 = 1.0 - next_double();  // (0, 1], keeps log finite
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925286766559 * u2);
  }

  // Normal truncated to two standard deviations, the usual transformer
  // weight-init distribution.
  double next_trunc_normal(double stddev) {
    double z = next_normal();
    while (std::fabs(z) > 2.0) z = next_normal();
    return z * stddev;
  }

  // Derives an independent stream. Advances this state by one draw.
  RngState split() { return RngState(next_u64() ^ 0xC2B2AE3D27D4EB4Full); }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

// Stateless derivation of a stream from (seed, stream id, epoch). Used for
// per-epoch data order and evaluation sampling so the training stream is
// never perturbed.
inline RngState derive_rng(std::uint64_t seed, std::uint64_t stream_id,
                           std::uint64_t epoch) {
  RngState r(seed);
  RngState s(r.next_u64() ^ (stream_id * 0x9E3779B97F4A7C15ull) ^
             (epoch * 0xD6E8FEB86659FD93ull));
  return s;
}

}  // namespace rsir
