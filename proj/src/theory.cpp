#include "udah/theory.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <random>

#include "udah/errors.hpp"
#include "udah/eval.hpp"

namespace udah {

namespace {

std::vector<std::vector<NodeId>> members_by_class(std::span<const int> labels, std::size_t num_classes) {
  std::vector<std::vector<NodeId>> m(num_classes);
  for (std::size_t v = 0; v < labels.size(); ++v) m[static_cast<std::size_t>(labels[v])].push_back(static_cast<NodeId>(v));
  return m;
}

HashCode majority_code(std::span<const NodeId> nodes, std::span<const HashCode> codes) {
  const std::size_t l = codes[nodes.front()].size();
  std::vector<std::size_t> ones(l, 0);
  for (NodeId v : nodes) {
    for (std::size_t b = 0; b < l; ++b) ones[b] += codes[v][b];
  }
  std::vector<std::uint8_t> bits(l);
  for (std::size_t b = 0; b < l; ++b) bits[b] = 2 * ones[b] > nodes.size() ? 1 : 0;
  return HashCode(std::move(bits));
}

// The first min(count, n) nodes of a seeded shuffle, topped up with uniform
// draws with replacement.
std::vector<NodeId> draw(std::vector<NodeId> nodes, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(nodes.begin(), nodes.end(), rng);
  std::vector<NodeId> out(nodes.begin(), nodes.begin() + static_cast<std::ptrdiff_t>(std::min(count, nodes.size())));
  while (out.size() < count) {
    std::uniform_int_distribution<std::size_t> pick(0, nodes.size() - 1);
    out.push_back(nodes[pick(rng)]);
  }
  return out;
}

}  // namespace

AlignedInstance make_aligned(const DomainPair& pair, const CodeFn& codes_fn, std::uint64_t seed, ResampleMode mode) {
  pair.validate();
  if (!pair.source.has_labels() || !pair.target.has_labels()) {
    throw DataError("make_aligned: both domains need labels");
  }
  const std::size_t k = pair.source.num_classes();
  const auto source = members_by_class(pair.source.labels(), k);
  const auto target = members_by_class(pair.target.labels(), k);
  const std::vector<HashCode> source_codes = codes_fn(pair.source);
  if (source_codes.size() != pair.source.num_nodes()) throw ShapeError("make_aligned: one source code per node required");

  AlignedInstance inst;
  for (std::size_t c = 0; c < k; ++c) {
    if (source[c].empty() != target[c].empty()) {
      spdlog::warn("make_aligned: class {} appears in one domain only; dropped", c);
      inst.dropped.push_back(static_cast<int>(c));
    }
    if (source[c].empty() || target[c].empty()) continue;

    const std::size_t n = mode == ResampleMode::Down ? std::min(source[c].size(), target[c].size())
                                                     : std::max(source[c].size(), target[c].size());
    const std::uint64_t class_seed = seed + 0x9e3779b97f4a7c15ULL * (c + 1);
    const auto s = draw(source[c], n, class_seed);
    const auto t = draw(target[c], n, class_seed);
    const HashCode v = majority_code(source[c], source_codes);
    for (std::size_t i = 0; i < n; ++i) {
      inst.source_nodes.push_back(s[i]);
      inst.target_nodes.push_back(t[i]);
      inst.classes.push_back(static_cast<int>(c));
      inst.truth.push_back(v);
    }
  }
  return inst;
}

BoundReport check_bound(const AlignedInstance& inst, std::span<const HashCode> source_codes,
                        std::span<const HashCode> target_codes) {
  BoundReport r;
  r.pairs = inst.source_nodes.size();
  for (std::size_t i = 0; i < r.pairs; ++i) {
    if (inst.source_nodes[i] >= source_codes.size() || inst.target_nodes[i] >= target_codes.size()) {
      throw ShapeError("check_bound: pair " + std::to_string(i) + " refers to a node without a code");
    }
  }
  for (std::size_t i = 0; i < r.pairs; ++i) {
    const HashCode& fs = source_codes[inst.source_nodes[i]];
    const HashCode& ft = target_codes[inst.target_nodes[i]];
    r.l_src += hamming_distance(inst.truth[i], fs);
    r.l_tgt += hamming_distance(inst.truth[i], ft);
    r.bound += hamming_distance(ft, fs);
  }
  // l_tgt - l_src <= bound, rearranged to stay in unsigned arithmetic.
  r.holds = r.l_tgt <= r.l_src + r.bound;
  return r;
}

BoundReport check_bound(const AlignedInstance& inst, const DomainPair& pair, const CodeFn& codes_fn) {
  return check_bound(inst, codes_fn(pair.source), codes_fn(pair.target));
}

std::string BoundReport::to_json() const {
  nlohmann::ordered_json j;
  j["pairs"] = pairs;
  j["l_src"] = l_src;
  j["l_tgt"] = l_tgt;
  j["bound"] = bound;
  j["gap"] = static_cast<long long>(l_tgt) - static_cast<long long>(l_src);
  j["holds"] = holds;
  return j.dump(2) + "\n";
}

}  // namespace udah
