#include "est/permutation.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <string>

#include "est/errors.hpp"
#include "est/rng.hpp"

namespace est {

namespace {

// n! - 1, saturating.
std::size_t non_identity_count(std::size_t n) {
  std::size_t f = 1;
  for (std::size_t i = 2; i <= n; ++i) {
    if (f > SIZE_MAX / i) return SIZE_MAX;
    f *= i;
  }
  return f - 1;
}

bool is_identity(const Permutation& p) {
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] != i) return false;
  return true;
}

}  // namespace

PermutationTable generate_permutation_table(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (n == 0) throw ValidationError("permutation table needs at least one element");
  const std::size_t capacity = non_identity_count(n);
  if (count > capacity) {
    throw CapacityError("cannot draw " + std::to_string(count) + " distinct non-identity orders of " +
                        std::to_string(n) + " snippets (at most " + std::to_string(capacity) + ")");
  }
  PermutationTable table;
  table.seed = seed;
  Rng rng = Rng::derive(seed, Stream::kPermutationTable, {n, count});

  if (n <= 8) {
    // Small n: enumerate every non-identity order and take a seeded sample.
    std::vector<Permutation> all;
    Permutation p(n);
    std::iota(p.begin(), p.end(), 0);
    while (std::next_permutation(p.begin(), p.end())) all.push_back(p);
    for (std::size_t i = 0; i < count; ++i) std::swap(all[i], all[i + rng.uniform_index(all.size() - i)]);
    all.resize(count);
    table.permutations = std::move(all);
    return table;
  }

  std::set<Permutation> seen;
  while (table.permutations.size() < count) {
    Permutation p(n);
    std::iota(p.begin(), p.end(), 0);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(p[i], p[rng.uniform_index(i + 1)]);
    if (is_identity(p) || !seen.insert(p).second) continue;
    table.permutations.push_back(std::move(p));
  }
  return table;
}

bool is_permutation_of_iota(std::span<const std::size_t> perm) {
  std::vector<bool> hit(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || hit[p]) return false;
    hit[p] = true;
  }
  return true;
}

Permutation inverse(std::span<const std::size_t> perm) {
  if (!is_permutation_of_iota(perm)) throw ValidationError("inverse: input is not a permutation");
  Permutation inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

SnippetSet shuffle_snippets(const SnippetSet& set, std::size_t perm_index, const PermutationTable& table) {
  if (set.order_label) throw StateError("snippet set is already shuffled");
  if (perm_index >= table.size()) {
    throw ValidationError("permutation index " + std::to_string(perm_index) + " out of range for table of " +
                          std::to_string(table.size()));
  }
  const Permutation& perm = table[perm_index];
  if (perm.size() != set.snippets.size()) {
    throw ValidationError("permutation over " + std::to_string(perm.size()) + " snippets applied to a set of " +
                          std::to_string(set.snippets.size()));
  }
  SnippetSet out;
  out.video_id = set.video_id;
  out.label = set.label;
  out.snippets = apply_order(set.snippets, perm);
  out.order_label = perm_index;
  return out;
}

}  // namespace est
