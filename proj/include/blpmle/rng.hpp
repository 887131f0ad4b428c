#pragma once

// Seed derivation. Every random stream is a std::mt19937_64 seeded from a path of
// integers hashed with SplitMix64, e.g. (scenario seed, market, variable), so the
// draws for one market do not depend on how many markets precede it.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace blpmle {

using Engine = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(seed);
  for (auto p : path) h = splitmix64(h ^ splitmix64(p + 0x632BE59BD9B4E019ULL));
  return h;
}

inline Engine substream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  return Engine(derive_seed(seed, path));
}

/// Replication seed: hash64(master_seed, scenario name, index).
constexpr std::uint64_t replication_seed(std::uint64_t master_seed, std::string_view scenario, std::uint64_t index) {
  return derive_seed(master_seed, {fnv1a(scenario), index});
}

}  // namespace blpmle
