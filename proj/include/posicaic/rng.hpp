#pragma once

#include <cstdint>
#include <random>

namespace posicaic {

// Independent generator for (seed, stream); the same pair always yields the same sequence.
inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x9e3779b9u};
  return std::mt19937_64(seq);
}

// Stream ids for nested uses of one seed.
inline std::uint64_t substream(std::uint64_t a, std::uint64_t b) { return (a << 24) ^ (b * 0x9e3779b97f4a7c15ull); }

}  // namespace posicaic
