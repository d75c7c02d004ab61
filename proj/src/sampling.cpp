#include "udah/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "udah/errors.hpp"

namespace udah {

ContrastBatch sample_contrast_batch(const Graph& g, std::span<const NodeId> anchors, std::uint64_t seed) {
  if (g.num_edges() == 0) throw ConfigError("contrast batch: graph has no edges");
  std::mt19937_64 rng(seed);
  ContrastBatch batch;
  std::vector<NodeId> pool;
  for (NodeId a : anchors) {
    auto nb = g.neighbors(a);
    if (nb.empty()) {
      batch.skipped.push_back(a);
      continue;
    }
    pool.clear();
    for (NodeId v = 0; v < g.num_nodes(); ++v) {
      if (v != a && !std::binary_search(nb.begin(), nb.end(), v)) pool.push_back(v);
    }
    const std::size_t want = std::min(kNegativesPerPositive * nb.size(), pool.size());
    // Partial Fisher-Yates: the first `want` slots become a uniform sample.
    for (std::size_t i = 0; i < want; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    batch.anchors.push_back(a);
    batch.positives.emplace_back(nb.begin(), nb.end());
    batch.negatives.emplace_back(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(want));
  }
  return batch;
}

std::vector<std::vector<NodeId>> shuffled_batches(std::size_t n, std::size_t batch_size, std::mt19937_64& rng) {
  std::vector<NodeId> order(n);
  std::iota(order.begin(), order.end(), NodeId{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<NodeId>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

MinibatchStream::MinibatchStream(const DomainPair& pair, std::size_t batch_size, std::uint64_t seed)
    : MinibatchStream(pair.source.num_nodes(), pair.target.num_nodes(), pair.source.num_classes(), batch_size, seed) {}

MinibatchStream::MinibatchStream(std::size_t source_nodes, std::size_t target_nodes, std::size_t num_classes,
                                 std::size_t batch_size, std::uint64_t seed)
    : source_nodes_(source_nodes), target_nodes_(target_nodes), batch_size_(batch_size), rng_(seed) {
  if (batch_size <= num_classes) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " must exceed the number of classes (" +
                      std::to_string(num_classes) + ")");
  }
}

std::vector<MinibatchStream::Step> MinibatchStream::next_epoch() {
  auto src = shuffled_batches(source_nodes_, batch_size_, rng_);
  auto tgt = shuffled_batches(target_nodes_, batch_size_, rng_);
  std::vector<Step> steps;
  const std::size_t n = std::max(src.size(), tgt.size());
  for (std::size_t i = 0; i < n; ++i) {
    steps.emplace_back(src.empty() ? std::vector<NodeId>{} : src[i % src.size()],
                       tgt.empty() ? std::vector<NodeId>{} : tgt[i % tgt.size()]);
  }
  return steps;
}

namespace {

Graph sbm_graph(const SyntheticSpec& spec, const std::vector<std::vector<double>>& means, std::mt19937_64& rng) {
  const std::size_t n = spec.num_classes * spec.nodes_per_class;
  std::vector<NodeId> perm(n);
  std::iota(perm.begin(), perm.end(), NodeId{0});
  std::shuffle(perm.begin(), perm.end(), rng);

  // Slot s belongs to class s / nodes_per_class and becomes node perm[s].
  std::vector<int> labels(n);
  for (std::size_t s = 0; s < n; ++s) labels[perm[s]] = static_cast<int>(s / spec.nodes_per_class);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Edge> edges;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const bool same = a / spec.nodes_per_class == b / spec.nodes_per_class;
      if (unit(rng) < (same ? spec.edge_prob_in : spec.edge_prob_out)) edges.emplace_back(perm[a], perm[b]);
    }
  }

  std::normal_distribution<double> noise(0.0, spec.attr_noise);
  std::vector<SparseVector> attrs(n);
  for (std::size_t s = 0; s < n; ++s) {
    const auto& mu = means[s / spec.nodes_per_class];
    SparseVector row;
    row.reserve(spec.attr_dim);
    for (std::uint32_t j = 0; j < spec.attr_dim; ++j) row.push_back({j, mu[j] + noise(rng)});
    attrs[perm[s]] = std::move(row);
  }
  return Graph(n, spec.attr_dim, std::move(edges), std::move(attrs), std::move(labels), spec.num_classes);
}

}  // namespace

DomainPair gen_synthetic_pair(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic pair: need at least 2 classes");
  if (spec.nodes_per_class == 0 || spec.attr_dim == 0) throw ConfigError("synthetic pair: empty graph requested");
  auto is_prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!is_prob(spec.edge_prob_in) || !is_prob(spec.edge_prob_out) || !(spec.edge_prob_in > spec.edge_prob_out)) {
    throw ConfigError("synthetic pair: need 0 <= edge_prob_out < edge_prob_in <= 1");
  }
  if (!(spec.attr_shift >= 0.0) || !(spec.mean_scale >= 0.0) || !(spec.attr_noise >= 0.0)) {
    throw ConfigError("synthetic pair: shift, mean scale and noise must be non-negative");
  }

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> source_means(spec.num_classes, std::vector<double>(spec.attr_dim));
  for (auto& mu : source_means) {
    for (double& m : mu) m = spec.mean_scale * gauss(rng);
  }
  auto target_means = source_means;
  for (auto& mu : target_means) {
    std::vector<double> dir(spec.attr_dim);
    double norm = 0.0;
    for (double& x : dir) {
      x = gauss(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < spec.attr_dim; ++j) mu[j] += spec.attr_shift * dir[j] / norm;
  }

  // Independent streams per domain so the source draw does not depend on the shift.
  std::mt19937_64 source_rng(spec.seed ^ 0x5bd1e995ULL);
  std::mt19937_64 target_rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  DomainPair pair{sbm_graph(spec, source_means, source_rng), sbm_graph(spec, target_means, target_rng)};
  pair.validate();
  return pair;
}

}  // namespace udah
