#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "mhvae/tensor.hpp"

namespace mhvae {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// One stream of randomness. Normal draws use Box-Muller with no cached spare,
// so the engine state alone determines everything that follows.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  // Uniform in (0, 1]; never returns 0 so log() is always safe.
  double uniform() {
    return (static_cast<double>(eng_() >> 11) + 1.0) * (1.0 / 9007199254740992.0);
  }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform integer in [0, n).
  std::int64_t below(std::int64_t n) {
    return static_cast<std::int64_t>(eng_() % static_cast<std::uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() <= p; }

  template <class T>
  Tensor<T> normal_tensor(Shape shape) {
    Tensor<T> t(std::move(shape));
    T* d = t.mutable_data();
    for (std::int64_t i = 0; i < t.size(); ++i) d[i] = static_cast<T>(normal());
    return t;
  }

  template <class T>
  Tensor<T> uniform_tensor(Shape shape, T lo, T hi) {
    Tensor<T> t(std::move(shape));
    T* d = t.mutable_data();
    for (std::int64_t i = 0; i < t.size(); ++i)
      d[i] = lo + static_cast<T>(uniform()) * (hi - lo);
    return t;
  }

  void shuffle(std::vector<int>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i)
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(below(i + 1))]);
  }

 private:
  std::mt19937_64 eng_;
};

// Named substream derivation: consumers draw from independent streams keyed by
// (seed, purpose, a, b), so adding or removing one consumer never shifts the
// draws seen by another.
inline RngStream substream(std::uint64_t seed, std::string_view purpose, std::uint64_t a = 0,
                           std::uint64_t b = 0) {
  std::uint64_t h = detail::splitmix64(seed ^ detail::fnv1a(purpose));
  h = detail::splitmix64(h ^ detail::splitmix64(a));
  h = detail::splitmix64(h ^ detail::splitmix64(b + 0x51ed270b7a3fca32ULL));
  return RngStream(h);
}

}  // namespace mhvae
