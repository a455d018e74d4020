#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace unlearn {

using Rng = std::mt19937_64;

/// Engine seeded from a base seed and any number of stream tags, e.g.
/// make_rng(run_seed, epoch) for per-epoch shuffles.
inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> streams = {}) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * streams.size());
  auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  for (auto s : streams) push(s);
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

}  // namespace unlearn
