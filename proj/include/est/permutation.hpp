#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "est/video.hpp"

namespace est {

using Permutation = std::vector<std::size_t>;

// Fixed set of distinct, non-identity snippet orders. Entry i is SSOP class i.
// perm[p] is the natural-order index of the snippet placed at position p.
struct PermutationTable {
  std::vector<Permutation> permutations;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return permutations.size(); }
  const Permutation& operator[](std::size_t i) const { return permutations.at(i); }
};

// Deterministic in seed. Throws CapacityError when count > n! - 1.
PermutationTable generate_permutation_table(std::size_t n = 7, std::size_t count = 10, std::uint64_t seed = 0);

bool is_permutation_of_iota(std::span<const std::size_t> perm);
Permutation inverse(std::span<const std::size_t> perm);

// out[p] = items[perm[p]]
template <typename T>
std::vector<T> apply_order(const std::vector<T>& items, std::span<const std::size_t> perm);

// Reorders a natural-order set by table[perm_index] and records the class.
// Throws StateError if the set is already shuffled.
SnippetSet shuffle_snippets(const SnippetSet& set, std::size_t perm_index, const PermutationTable& table);

}  // namespace est

#include "est/errors.hpp"

template <typename T>
std::vector<T> est::apply_order(const std::vector<T>& items, std::span<const std::size_t> perm) {
  if (perm.size() != items.size() || !is_permutation_of_iota(perm)) {
    throw ValidationError("apply_order: not a permutation of " + std::to_string(items.size()) + " items");
  }
  std::vector<T> out;
  out.reserve(items.size());
  for (auto p : perm) out.push_back(items[p]);
  return out;
}
