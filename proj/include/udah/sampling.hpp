#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "udah/graph.hpp"

namespace udah {

/// Anchors with their full neighbor group and a sampled non-neighbor group.
struct ContrastBatch {
  std::vector<NodeId> anchors;
  std::vector<std::vector<NodeId>> positives;
  std::vector<std::vector<NodeId>> negatives;
  // Requested anchors dropped because they have no neighbors.
  std::vector<NodeId> skipped;

  std::size_t size() const { return anchors.size(); }
};

inline constexpr std::size_t kNegativesPerPositive = 10;

// P+(i) is every neighbor of i; P-(i) draws min(10 |P+(i)|, #non-neighbors)
// nodes uniformly without replacement from the non-neighbors of i.
// Throws ConfigError when the graph has no edges.
ContrastBatch sample_contrast_batch(const Graph& g, std::span<const NodeId> anchors, std::uint64_t seed);

/// Shuffled epochs over both domains. Each epoch yields ceil(max(Ns, Nt) / B)
/// steps; the domain with fewer batches cycles through its own. The last batch
/// of a domain may be short.
class MinibatchStream {
 public:
  using Step = std::pair<std::vector<NodeId>, std::vector<NodeId>>;

  // Throws ConfigError unless batch_size > num_classes.
  MinibatchStream(const DomainPair& pair, std::size_t batch_size, std::uint64_t seed);
  MinibatchStream(std::size_t source_nodes, std::size_t target_nodes, std::size_t num_classes, std::size_t batch_size,
                  std::uint64_t seed);

  std::vector<Step> next_epoch();

 private:
  std::size_t source_nodes_;
  std::size_t target_nodes_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
};

// Splits a shuffled permutation of [0, n) into chunks of batch_size.
std::vector<std::vector<NodeId>> shuffled_batches(std::size_t n, std::size_t batch_size, std::mt19937_64& rng);

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t nodes_per_class = 50;
  std::size_t attr_dim = 32;
  double edge_prob_in = 0.1;
  double edge_prob_out = 0.01;
  // Norm of the per-class translation applied to target attribute means.
  double attr_shift = 0.0;
  // Std of the class-mean coordinates and of the per-node attribute noise.
  double mean_scale = 1.0;
  double attr_noise = 1.0;
  std::uint64_t seed = 42;
};

/// Two stochastic-block-model graphs over the same classes. Both domains draw
/// attributes as class mean + Gaussian noise; target class means are moved by
/// attr_shift along a random unit direction per class. Node ids are randomly
/// permuted so they carry no class information.
DomainPair gen_synthetic_pair(const SyntheticSpec& spec);

}  // namespace udah
