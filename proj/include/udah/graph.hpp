#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "udah/tensor.hpp"

namespace udah {

using NodeId = std::uint32_t;
using Edge = std::pair<NodeId, NodeId>;

struct SparseEntry {
  std::uint32_t index;
  double value;
  friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

using SparseVector = std::vector<SparseEntry>;

/// Undirected attributed graph. Immutable after construction.
///
/// Label reads go through label() / labels(), which bump a counter shared by
/// every copy of the graph; training code is checked against that counter to
/// prove it never looks at target labels.
class Graph {
 public:
  Graph() = default;
  // Edges are symmetrized and deduplicated. Throws DataError on self-loops,
  // out-of-range ids or attribute indices, and labels outside [0, num_classes).
  Graph(std::size_t num_nodes, std::size_t attr_dim, std::vector<Edge> edges, std::vector<SparseVector> attributes,
        std::optional<std::vector<int>> labels = std::nullopt, std::size_t num_classes = 0);

  std::size_t num_nodes() const { return num_nodes_; }
  std::size_t attr_dim() const { return attr_dim_; }
  std::size_t num_edges() const { return edges_.size(); }
  // Canonical edge list: u < v, sorted.
  std::span<const Edge> edges() const { return edges_; }
  std::span<const NodeId> neighbors(NodeId v) const;
  std::size_t degree(NodeId v) const { return neighbors(v).size(); }
  bool has_edge(NodeId u, NodeId v) const;

  const SparseVector& attributes(NodeId v) const { return attributes_.at(v); }
  // Rows of the given nodes densified into a (nodes.size(), attr_dim) matrix.
  Tensor dense_attributes(std::span<const NodeId> nodes) const;

  bool has_labels() const { return labels_.has_value(); }
  std::size_t num_classes() const { return num_classes_; }
  int label(NodeId v) const;
  std::span<const int> labels() const;
  std::uint64_t label_reads() const { return label_reads_->load(); }

  // Same nodes, attributes and labels with the given edges removed.
  Graph without_edges(std::span<const Edge> removed) const;
  // Same graph without labels (and a fresh read counter).
  Graph unlabeled() const;

 private:
  std::size_t num_nodes_ = 0;
  std::size_t attr_dim_ = 0;
  std::size_t num_classes_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::size_t> offsets_;
  std::vector<NodeId> adjacency_;
  std::vector<SparseVector> attributes_;
  std::optional<std::vector<int>> labels_;
  std::shared_ptr<std::atomic<std::uint64_t>> label_reads_ = std::make_shared<std::atomic<std::uint64_t>>(0);
};

/// Labeled source graph plus target graph whose labels, when present, exist
/// for evaluation only.
struct DomainPair {
  Graph source;
  Graph target;

  // Throws DataError if the pair violates the shared-dimension / shared-K rules.
  void validate() const;
};

// Reads the edge / attribute / label formats described in the README.
Graph load_graph(const std::filesystem::path& edge_path, const std::filesystem::path& attr_path,
                 const std::optional<std::filesystem::path>& label_path = std::nullopt);

// Canonical form: sorted edges with u < v, ascending sparse indices, shortest
// round-trip decimal values. Labels are written only when present and a path is given.
void write_graph(const Graph& g, const std::filesystem::path& edge_path, const std::filesystem::path& attr_path,
                 const std::optional<std::filesystem::path>& label_path = std::nullopt);

// Loads <prefix>.edges, <prefix>.attrs and, if it exists, <prefix>.labels.
Graph load_graph_prefix(const std::filesystem::path& prefix);
void write_graph_prefix(const Graph& g, const std::filesystem::path& prefix);

}  // namespace udah
