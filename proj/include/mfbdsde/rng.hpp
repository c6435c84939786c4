#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mfbdsde {

struct Seed {
  std::uint64_t root = 0;
  // perturbs W-side streams only; B stays fixed
  std::uint64_t salt = 0;
};

enum class Role : std::uint64_t {
  law_w = 1,
  pilot_w = 2,
  aux_w = 3,
  b = 4,
  xi = 5,
  probe = 6,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t stream_key(Seed s, Role role, std::uint64_t particle, std::uint64_t step,
                                   std::uint64_t coord) {
  std::uint64_t root = s.root;
  if (role != Role::b) root ^= splitmix64(s.salt + 0x5bd1e995ULL);
  std::uint64_t h = splitmix64(root);
  h = splitmix64(h ^ static_cast<std::uint64_t>(role));
  h = splitmix64(h ^ particle);
  h = splitmix64(h ^ step);
  return splitmix64(h ^ coord);
}

// (0,1), never 0
inline double to_unit(std::uint64_t h) {
  return (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
}

inline double uniform(Seed s, Role role, std::uint64_t i, std::uint64_t k, std::uint64_t j) {
  return to_unit(stream_key(s, role, i, k, j));
}

inline double normal(Seed s, Role role, std::uint64_t i, std::uint64_t k, std::uint64_t j) {
  const std::uint64_t h = stream_key(s, role, i, k, j);
  const double u1 = to_unit(h);
  const double u2 = to_unit(splitmix64(h ^ 0xd6e8feb86659fd93ULL));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace mfbdsde
