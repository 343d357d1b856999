#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace est {

// Stream tags used when deriving independent generators from one seed.
enum class Stream : std::uint64_t {
  kInit = 1,
  kSynth = 2,
  kPermutationTable = 3,
  kSnippets = 4,
  kShuffle = 5,
  kEpochOrder = 6,
  kEval = 7,
  kGradcheck = 8,
};

// Seedable generator. Bounded integers and normals are computed here rather
// than through <random> distributions so streams are identical across
// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Independent stream derived from a seed and a tuple of keys, e.g.
  // (seed, Stream::kSnippets, video id, epoch).
  static Rng derive(std::uint64_t seed, Stream stream, std::initializer_list<std::uint64_t> keys = {});

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, n). n must be positive.
  std::size_t uniform_index(std::size_t n);
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal (Box-Muller).
  double normal();

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace est
