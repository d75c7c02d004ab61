#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "udah/graph.hpp"
#include "udah/model.hpp"

namespace udah {

// Maps every node of a graph to its code.
using CodeFn = std::function<std::vector<HashCode>(const Graph&)>;

enum class ResampleMode {
  Down,  // each class keeps min(n_source, n_target) pairs
  Up,    // the smaller side is resampled with replacement up to the larger
};

/// Source/target node pairs that share a class, hence a ground-truth code.
struct AlignedInstance {
  std::vector<NodeId> source_nodes;
  std::vector<NodeId> target_nodes;
  std::vector<int> classes;      // per pair
  std::vector<HashCode> truth;   // per pair: v_i
  std::vector<int> dropped;      // classes present in only one domain
};

/// Class-balanced pairing of the two domains. Reads both domains' labels.
/// The truth code of a class is the per-bit majority over that class's source
/// codes, ties to 0. Both sides of a class are shuffled with the same seeded
/// permutation, so identical graphs pair every node with itself.
AlignedInstance make_aligned(const DomainPair& pair, const CodeFn& codes_fn, std::uint64_t seed,
                             ResampleMode mode = ResampleMode::Down);

struct BoundReport {
  std::size_t pairs = 0;
  std::size_t l_src = 0;  // sum H(v_i, F(x_i^s))
  std::size_t l_tgt = 0;  // sum H(v_i, F(x_i^t))
  std::size_t bound = 0;  // sum H(F(x_i^t), F(x_i^s))
  bool holds = true;      // l_tgt - l_src <= bound, in exact integers

  std::string to_json() const;
};

BoundReport check_bound(const AlignedInstance& inst, std::span<const HashCode> source_codes,
                        std::span<const HashCode> target_codes);
BoundReport check_bound(const AlignedInstance& inst, const DomainPair& pair, const CodeFn& codes_fn);

}  // namespace udah
