#pragma once

// Counter-mode random streams. A stream is identified by (root seed, stream
// id); outputs are a pure function of (seed, id, counter), so distinct
// streams never share state and the same stream replays identically on any
// platform. Experiments derive one stream per trial from structured ids,
// which is what makes parallel and serial runs byte-identical.

#include <cstdint>
#include <span>
#include <vector>

#include "cotlab/common.hpp"

namespace cotlab {

namespace detail {

// Finalizer from splitmix64: a well-mixed 64->64 bijection.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// Combine structured fields (experiment kind, grid point, trial index, ...)
// into a single stream id.
inline std::uint64_t derive_stream_id(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t h = detail::mix64(a);
  h = detail::mix64(h ^ (b + 0x9E3779B97F4A7C15ULL));
  h = detail::mix64(h ^ (c + 0xD1B54A32D192ED03ULL));
  return h;
}

// FNV-1a over a short label; used to tag experiment kinds.
inline std::uint64_t hash_label(const char* s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (; *s; ++s) h = (h ^ static_cast<unsigned char>(*s)) * 1099511628211ULL;
  return h;
}

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : key_(detail::mix64(detail::mix64(seed) ^ stream_id)) {}

  std::uint64_t next_u64() { return detail::mix64(key_ + (++counter_) * 0x9E3779B97F4A7C15ULL); }

  // Uniform double in [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller (fresh pair each call, one value kept —
  // keeps the call deterministic regardless of caller interleaving).
  double next_normal() {
    double u1, u2;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    u2 = next_double();
    const double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  // Sample an index from a probability vector by CDF inversion. Rounding in
  // the partial sums is absorbed by returning the last positive-mass index
  // when u lands past the accumulated total.
  int sample_discrete(std::span<const double> probs) {
    double u = next_double();
    double acc = 0.0;
    int last_positive = -1;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] > 0.0) last_positive = static_cast<int>(i);
      acc += probs[i];
      if (u < acc) {
        return probs[i] > 0.0 ? static_cast<int>(i) : last_positive;
      }
    }
    if (last_positive < 0) throw UsageError("sample_discrete: all-zero probability vector");
    return last_positive;
  }

  int sample_discrete(const std::vector<double>& probs) {
    return sample_discrete(std::span<const double>(probs));
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace cotlab
