#include "udah/graph.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

#include "udah/errors.hpp"

namespace udah {

namespace fs = std::filesystem;

Graph::Graph(std::size_t num_nodes, std::size_t attr_dim, std::vector<Edge> edges, std::vector<SparseVector> attributes,
             std::optional<std::vector<int>> labels, std::size_t num_classes)
    : num_nodes_(num_nodes), attr_dim_(attr_dim), attributes_(std::move(attributes)), labels_(std::move(labels)) {
  if (attributes_.size() != num_nodes_) {
    throw DataError("graph: " + std::to_string(attributes_.size()) + " attribute rows for " +
                    std::to_string(num_nodes_) + " nodes");
  }
  for (NodeId v = 0; v < num_nodes_; ++v) {
    auto& row = attributes_[v];
    std::sort(row.begin(), row.end(), [](const SparseEntry& a, const SparseEntry& b) { return a.index < b.index; });
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (row[k].index >= attr_dim_) {
        throw DataError("graph: node " + std::to_string(v) + " has attribute index " + std::to_string(row[k].index) +
                        " >= d=" + std::to_string(attr_dim_));
      }
      if (k > 0 && row[k].index == row[k - 1].index) {
        throw DataError("graph: node " + std::to_string(v) + " repeats attribute index " +
                        std::to_string(row[k].index));
      }
    }
  }

  for (Edge& e : edges) {
    if (e.first == e.second) throw DataError("graph: self-loop at node " + std::to_string(e.first));
    if (e.first >= num_nodes_ || e.second >= num_nodes_) {
      throw DataError("graph: edge (" + std::to_string(e.first) + ", " + std::to_string(e.second) +
                      ") references a node >= " + std::to_string(num_nodes_));
    }
    if (e.first > e.second) std::swap(e.first, e.second);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  edges_ = std::move(edges);

  std::vector<std::size_t> deg(num_nodes_, 0);
  for (const auto& [u, v] : edges_) {
    ++deg[u];
    ++deg[v];
  }
  offsets_.assign(num_nodes_ + 1, 0);
  for (std::size_t v = 0; v < num_nodes_; ++v) offsets_[v + 1] = offsets_[v] + deg[v];
  adjacency_.resize(offsets_.back());
  std::vector<std::size_t> fill(offsets_.begin(), offsets_.end() - 1);
  for (const auto& [u, v] : edges_) {
    adjacency_[fill[u]++] = v;
    adjacency_[fill[v]++] = u;
  }
  for (std::size_t v = 0; v < num_nodes_; ++v) {
    std::sort(adjacency_.begin() + static_cast<std::ptrdiff_t>(offsets_[v]),
              adjacency_.begin() + static_cast<std::ptrdiff_t>(offsets_[v + 1]));
  }

  if (labels_) {
    if (labels_->size() != num_nodes_) {
      throw DataError("graph: " + std::to_string(labels_->size()) + " labels for " + std::to_string(num_nodes_) +
                      " nodes");
    }
    int max_label = -1;
    for (NodeId v = 0; v < num_nodes_; ++v) {
      const int y = (*labels_)[v];
      if (y < 0) throw DataError("graph: node " + std::to_string(v) + " has negative label");
      max_label = std::max(max_label, y);
    }
    if (num_classes == 0) num_classes = static_cast<std::size_t>(max_label + 1);
    if (static_cast<std::size_t>(max_label + 1) > num_classes) {
      throw DataError("graph: label " + std::to_string(max_label) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  num_classes_ = num_classes;
}

std::span<const NodeId> Graph::neighbors(NodeId v) const {
  if (v >= num_nodes_) throw DataError("graph: node " + std::to_string(v) + " out of range");
  return {adjacency_.data() + offsets_[v], offsets_[v + 1] - offsets_[v]};
}

bool Graph::has_edge(NodeId u, NodeId v) const {
  auto nb = neighbors(u);
  return std::binary_search(nb.begin(), nb.end(), v);
}

Tensor Graph::dense_attributes(std::span<const NodeId> nodes) const {
  Tensor x(Shape{nodes.size(), attr_dim_});
  for (std::size_t r = 0; r < nodes.size(); ++r) {
    for (const SparseEntry& e : attributes(nodes[r])) x.at(r, e.index) = e.value;
  }
  return x;
}

int Graph::label(NodeId v) const {
  if (!labels_) throw DataError("graph: labels requested from an unlabeled graph");
  label_reads_->fetch_add(1);
  return labels_->at(v);
}

std::span<const int> Graph::labels() const {
  if (!labels_) throw DataError("graph: labels requested from an unlabeled graph");
  label_reads_->fetch_add(1);
  return *labels_;
}

Graph Graph::without_edges(std::span<const Edge> removed) const {
  std::vector<Edge> drop(removed.begin(), removed.end());
  for (Edge& e : drop) {
    if (e.first > e.second) std::swap(e.first, e.second);
  }
  std::sort(drop.begin(), drop.end());
  std::vector<Edge> kept;
  kept.reserve(edges_.size());
  std::set_difference(edges_.begin(), edges_.end(), drop.begin(), drop.end(), std::back_inserter(kept));
  Graph out = *this;
  Graph rebuilt(num_nodes_, attr_dim_, std::move(kept), attributes_, std::nullopt, 0);
  out.edges_ = std::move(rebuilt.edges_);
  out.offsets_ = std::move(rebuilt.offsets_);
  out.adjacency_ = std::move(rebuilt.adjacency_);
  return out;
}

Graph Graph::unlabeled() const {
  Graph out = *this;
  out.labels_.reset();
  out.num_classes_ = num_classes_;
  out.label_reads_ = std::make_shared<std::atomic<std::uint64_t>>(0);
  return out;
}

void DomainPair::validate() const {
  if (!source.has_labels()) throw DataError("domain pair: source graph must be labeled");
  if (source.attr_dim() != target.attr_dim()) {
    throw DataError("domain pair: attribute dimensions differ (" + std::to_string(source.attr_dim()) + " vs " +
                    std::to_string(target.attr_dim()) + ")");
  }
  if (target.has_labels() && target.num_classes() != source.num_classes()) {
    throw DataError("domain pair: source has " + std::to_string(source.num_classes()) + " classes, target has " +
                    std::to_string(target.num_classes()));
  }
}

// ---- file formats --------------------------------------------------------

namespace {

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

[[noreturn]] void parse_fail(const fs::path& path, std::size_t line_no, const std::string& what) {
  throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + what);
}

bool skip_line(const std::string& line) {
  auto pos = line.find_first_not_of(" \t\r");
  return pos == std::string::npos || line[pos] == '#';
}

template <typename T>
T parse_number(std::string_view token, const fs::path& path, std::size_t line_no) {
  T value{};
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc() || ptr != token.data() + token.size()) {
    parse_fail(path, line_no, "malformed number '" + std::string(token) + "'");
  }
  return value;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) tokens.push_back(line.substr(i, j - i));
    i = j;
  }
  return tokens;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

Graph load_graph(const fs::path& edge_path, const fs::path& attr_path, const std::optional<fs::path>& label_path) {
  // Attributes first: they fix the node count and d.
  std::ifstream attr_in = open_in(attr_path);
  std::optional<std::size_t> dim;
  std::vector<std::pair<NodeId, SparseVector>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(attr_in, line)) {
    ++line_no;
    if (line.rfind("#d=", 0) == 0) {
      if (dim) parse_fail(attr_path, line_no, "duplicate #d= header");
      std::string_view header(line);
      header = header.substr(3, header.find_last_not_of(" \t\r") - 2);
      dim = parse_number<std::size_t>(header, attr_path, line_no);
      continue;
    }
    if (skip_line(line)) continue;
    auto tokens = split_ws(line);
    const auto node = parse_number<NodeId>(tokens[0], attr_path, line_no);
    SparseVector row;
    for (std::size_t k = 1; k < tokens.size(); ++k) {
      const auto colon = tokens[k].find(':');
      if (colon == std::string_view::npos) parse_fail(attr_path, line_no, "expected idx:val, got '" + std::string(tokens[k]) + "'");
      const auto idx = parse_number<std::uint32_t>(tokens[k].substr(0, colon), attr_path, line_no);
      const auto val = parse_number<double>(tokens[k].substr(colon + 1), attr_path, line_no);
      if (dim && idx >= *dim) {
        parse_fail(attr_path, line_no, "attribute index " + std::to_string(idx) + " conflicts with d=" + std::to_string(*dim));
      }
      if (!row.empty() && idx <= row.back().index) parse_fail(attr_path, line_no, "attribute indices must ascend");
      row.push_back({idx, val});
    }
    rows.emplace_back(node, std::move(row));
  }
  if (!dim) throw DataError(attr_path.string() + ": missing #d=<dim> header");

  std::size_t num_nodes = 0;
  for (const auto& [node, row] : rows) num_nodes = std::max<std::size_t>(num_nodes, node + 1);
  std::vector<SparseVector> attributes(num_nodes);
  std::vector<bool> seen(num_nodes, false);
  for (auto& [node, row] : rows) {
    if (seen[node]) throw DataError(attr_path.string() + ": node " + std::to_string(node) + " listed twice");
    seen[node] = true;
    attributes[node] = std::move(row);
  }

  std::ifstream edge_in = open_in(edge_path);
  std::vector<Edge> edges;
  line_no = 0;
  while (std::getline(edge_in, line)) {
    ++line_no;
    if (skip_line(line)) continue;
    auto tokens = split_ws(line);
    if (tokens.size() != 2) parse_fail(edge_path, line_no, "expected 'u<TAB>v'");
    const auto u = parse_number<NodeId>(tokens[0], edge_path, line_no);
    const auto v = parse_number<NodeId>(tokens[1], edge_path, line_no);
    if (u == v) parse_fail(edge_path, line_no, "self-loop at node " + std::to_string(u));
    if (u >= num_nodes || v >= num_nodes) {
      parse_fail(edge_path, line_no, "node id out of range (graph has " + std::to_string(num_nodes) + " nodes)");
    }
    edges.emplace_back(u, v);
  }

  std::optional<std::vector<int>> labels;
  if (label_path) {
    std::ifstream label_in = open_in(*label_path);
    std::vector<int> values(num_nodes, -1);
    line_no = 0;
    while (std::getline(label_in, line)) {
      ++line_no;
      if (skip_line(line)) continue;
      auto tokens = split_ws(line);
      if (tokens.size() != 2) parse_fail(*label_path, line_no, "expected 'node<TAB>label'");
      const auto node = parse_number<NodeId>(tokens[0], *label_path, line_no);
      const auto y = parse_number<int>(tokens[1], *label_path, line_no);
      if (node >= num_nodes) parse_fail(*label_path, line_no, "node id out of range");
      if (y < 0) parse_fail(*label_path, line_no, "negative label");
      values[node] = y;
    }
    for (std::size_t v = 0; v < num_nodes; ++v) {
      if (values[v] < 0) throw DataError(label_path->string() + ": node " + std::to_string(v) + " has no label");
    }
    labels = std::move(values);
  }
  return Graph(num_nodes, *dim, std::move(edges), std::move(attributes), std::move(labels));
}

void write_graph(const Graph& g, const fs::path& edge_path, const fs::path& attr_path,
                 const std::optional<fs::path>& label_path) {
  {
    std::ofstream out = open_out(edge_path);
    for (const auto& [u, v] : g.edges()) out << u << '\t' << v << '\n';
  }
  {
    std::ofstream out = open_out(attr_path);
    out << "#d=" << g.attr_dim() << '\n';
    for (NodeId v = 0; v < g.num_nodes(); ++v) {
      out << v;
      for (const SparseEntry& e : g.attributes(v)) out << ' ' << e.index << ':' << format_double(e.value);
      out << '\n';
    }
  }
  if (label_path && g.has_labels()) {
    std::ofstream out = open_out(*label_path);
    auto labels = g.labels();
    for (NodeId v = 0; v < g.num_nodes(); ++v) out << v << '\t' << labels[v] << '\n';
  }
}

Graph load_graph_prefix(const fs::path& prefix) {
  const fs::path labels = fs::path(prefix.string() + ".labels");
  return load_graph(prefix.string() + ".edges", prefix.string() + ".attrs",
                    fs::exists(labels) ? std::optional<fs::path>(labels) : std::nullopt);
}

void write_graph_prefix(const Graph& g, const fs::path& prefix) {
  write_graph(g, prefix.string() + ".edges", prefix.string() + ".attrs",
              g.has_labels() ? std::optional<fs::path>(prefix.string() + ".labels") : std::nullopt);
}

}  // namespace udah
