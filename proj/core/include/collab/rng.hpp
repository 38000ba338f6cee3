#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace collab {

namespace detail {
__extension__ using u128 = unsigned __int128;
}  // namespace detail

/// Counter-based generator: the n-th draw of a stream is a pure function of
/// (key, n), so independent streams can be derived from a seed plus labels
/// without any shared state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc908ULL)) {}

  /// Child stream keyed by this stream's key and a label/index tuple.
  Rng derive(std::string_view label, std::uint64_t a = 0,
             std::uint64_t b = 0) const {
    std::uint64_t h = key_;
    for (char c : label) {
      h = mix(h ^ static_cast<unsigned char>(c));
    }
    h = mix(h ^ mix(a + 0x9e3779b97f4a7c15ULL));
    h = mix(h ^ mix(b + 0xbf58476d1ce4e5b9ULL));
    return Rng(Raw{}, h);
  }

  std::uint64_t next_u64() { return mix(key_ + counter_++ * 0x9e3779b97f4a7c15ULL); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n); n must be positive.
  std::uint64_t uniform_index(std::uint64_t n) {
    // Lemire's multiply-shift with rejection.
    detail::u128 m = static_cast<detail::u128>(next_u64()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<detail::u128>(next_u64()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (consumes two draws).
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  struct Raw {};
  Rng(Raw, std::uint64_t key) : key_(key) {}

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace collab
