#pragma once

// Shared numeric helpers and error taxonomy for the simulation laboratory.
// Everything downstream assumes: probabilities live in linear space only for
// short products, accumulation across demonstrations happens in log space,
// and the brute-force reference path uses compensated linear-space sums.

#include <cassert>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cotlab {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kPosInf = std::numeric_limits<double>::infinity();

// Tolerances fixed by contract: construction-time stochasticity checks use
// 1e-12, derived quantities 1e-10.
inline constexpr double kRowSumTol = 1e-12;
inline constexpr double kDerivedTol = 1e-10;

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these to exit codes: validation/usage -> 2,
// capacity -> 3.
// ---------------------------------------------------------------------------

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when an exact enumeration would exceed the configured state cap.
struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a prompt has zero probability under every task in the family.
// Deliberately an error, never a uniform fallback.
struct ImpossiblePromptError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Exact enumeration refuses above this many states.
inline constexpr std::int64_t kEnumerationCap = 10'000'000;

// ---------------------------------------------------------------------------
// Log-space arithmetic
// ---------------------------------------------------------------------------

// log(sum_i exp(x_i)) with the usual max shift; returns -inf for an empty or
// all-(-inf) input.
inline double log_sum_exp(std::span<const double> xs) {
  double m = kNegInf;
  for (double x : xs) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

inline double log_sum_exp(const std::vector<double>& xs) {
  return log_sum_exp(std::span<const double>(xs));
}

// ---------------------------------------------------------------------------
// Compensated linear-space summation (Neumaier variant). Used by the oracle
// module so its arithmetic shares nothing with the log-space inference path.
// ---------------------------------------------------------------------------

class CompensatedSum {
 public:
  void add(double x) {
    double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

// ---------------------------------------------------------------------------
// Misc numeric plumbing
// ---------------------------------------------------------------------------

// ipow with overflow guard; throws CapacityError past the enumeration cap.
inline std::int64_t checked_ipow(std::int64_t base, int exp, std::int64_t cap = kEnumerationCap) {
  std::int64_t r = 1;
  for (int i = 0; i < exp; ++i) {
    r *= base;
    if (r > cap) {
      throw CapacityError("state count " + std::to_string(base) + "^" + std::to_string(exp) +
                          " exceeds enumeration cap " + std::to_string(cap));
    }
  }
  return r;
}

// Shortest round-trip decimal rendering of a double (deterministic across
// runs; the CSV byte-identity contract rests on this).
inline std::string format_double(double x) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  (void)ec;
  return std::string(buf, ptr);
}

inline double median_of_sorted(std::span<const double> xs) {
  assert(!xs.empty());
  std::size_t n = xs.size();
  if (n % 2 == 1) return xs[n / 2];
  return 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Quantile of a sorted sample via the nearest-rank-with-interpolation rule
// used throughout the harness (deterministic, no library variation).
inline double quantile_of_sorted(std::span<const double> xs, double q) {
  assert(!xs.empty());
  if (xs.size() == 1) return xs[0];
  double pos = q * static_cast<double>(xs.size() - 1);
  std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= xs.size()) return xs[xs.size() - 1];
  double frac = pos - static_cast<double>(lo);
  return xs[lo] * (1.0 - frac) + xs[lo + 1] * frac;
}

// Least-squares slope of y against x.
inline double ls_slope(std::span<const double> x, std::span<const double> y) {
  assert(x.size() == y.size() && x.size() >= 2);
  double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace cotlab
