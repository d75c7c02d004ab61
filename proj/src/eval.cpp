#include "udah/eval.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "udah/errors.hpp"

namespace udah {

namespace {

constexpr std::size_t kLogisticSteps = 500;
constexpr double kLogisticRate = 0.1;

Edge canonical(NodeId u, NodeId v) { return u < v ? Edge{u, v} : Edge{v, u}; }

std::size_t common_length(std::span<const HashCode> codes) {
  if (codes.empty()) throw DataError("no codes given");
  const std::size_t l = codes.front().size();
  for (const HashCode& c : codes) {
    if (c.size() != l) throw ShapeError("codes have different lengths");
  }
  return l;
}

// Bits as -1/+1: same hypothesis class as 0/1 with a bias, but centered
// features let the fixed-budget gradient descent converge much faster.
Tensor codes_as_features(std::span<const HashCode> codes) {
  const std::size_t l = common_length(codes);
  Tensor x({codes.size(), l});
  for (std::size_t i = 0; i < codes.size(); ++i) {
    for (std::size_t b = 0; b < l; ++b) x.at(i, b) = codes[i][b] ? 1.0 : -1.0;
  }
  return x;
}

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix design_rows(const Tensor& features, std::span<const NodeId> rows) {
  const std::size_t d = features.cols();
  Matrix x(rows.size(), d + 1);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < d; ++c) x(r, c) = features.at(rows[r], c);
    x(r, d) = 1.0;
  }
  return x;
}

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace

// ---- Hamming search ------------------------------------------------------

std::size_t hamming_distance(const HashCode& a, const HashCode& b) {
  if (a.size() != b.size()) {
    throw ShapeError("hamming_distance: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  std::size_t d = 0;
  for (std::size_t start = 0; start < a.size(); start += 64) {
    std::uint64_t wa = 0, wb = 0;
    const std::size_t end = std::min(start + 64, a.size());
    for (std::size_t i = start; i < end; ++i) {
      wa |= std::uint64_t{a[i]} << (i - start);
      wb |= std::uint64_t{b[i]} << (i - start);
    }
    d += static_cast<std::size_t>(std::popcount(wa ^ wb));
  }
  return d;
}

HammingIndex::HammingIndex(std::span<const HashCode> codes, std::vector<NodeId> ids) : ids_(std::move(ids)) {
  if (!codes.empty()) bits_ = common_length(codes);
  words_ = (bits_ + 63) / 64;
  if (ids_.empty()) {
    ids_.resize(codes.size());
    std::iota(ids_.begin(), ids_.end(), NodeId{0});
  }
  if (ids_.size() != codes.size()) throw ShapeError("HammingIndex: ids and codes differ in count");
  packed_.reserve(codes.size() * words_);
  for (const HashCode& c : codes) {
    const auto w = pack(c);
    packed_.insert(packed_.end(), w.begin(), w.end());
  }
}

std::vector<std::uint64_t> HammingIndex::pack(const HashCode& code) const {
  if (code.size() != bits_) {
    throw ShapeError("HammingIndex: query length " + std::to_string(code.size()) + ", index holds " +
                     std::to_string(bits_));
  }
  std::vector<std::uint64_t> w(words_, 0);
  for (std::size_t i = 0; i < bits_; ++i) w[i / 64] |= std::uint64_t{code[i]} << (i % 64);
  return w;
}

std::size_t HammingIndex::distance(std::size_t row_a, std::size_t row_b) const {
  const std::uint64_t* a = packed_.data() + row_a * words_;
  const std::uint64_t* b = packed_.data() + row_b * words_;
  std::size_t d = 0;
  for (std::size_t k = 0; k < words_; ++k) d += static_cast<std::size_t>(std::popcount(a[k] ^ b[k]));
  return d;
}

std::vector<std::size_t> HammingIndex::distances(const HashCode& query) const {
  const auto q = pack(query);
  std::vector<std::size_t> out(size());
  for (std::size_t r = 0; r < size(); ++r) {
    const std::uint64_t* row = packed_.data() + r * words_;
    std::size_t d = 0;
    for (std::size_t k = 0; k < words_; ++k) d += static_cast<std::size_t>(std::popcount(row[k] ^ q[k]));
    out[r] = d;
  }
  return out;
}

std::vector<NodeId> HammingIndex::topk_query(const HashCode& query, std::size_t k) const {
  if (size() == 0) throw DataError("topk_query: empty index");
  if (k > size()) throw ConfigError("topk_query: k=" + std::to_string(k) + " exceeds index size " + std::to_string(size()));
  const auto dist = distances(query);
  std::vector<std::pair<std::size_t, NodeId>> order(size());
  for (std::size_t r = 0; r < size(); ++r) order[r] = {dist[r], ids_[r]};
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
  std::vector<NodeId> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = order[i].second;
  return out;
}

// ---- node classification -------------------------------------------------

std::pair<std::vector<NodeId>, std::vector<NodeId>> stratified_split(std::span<const int> labels,
                                                                     std::uint64_t split_seed) {
  int max_label = -1;
  for (int y : labels) {
    if (y < 0) throw DataError("stratified_split: negative label");
    max_label = std::max(max_label, y);
  }
  std::vector<std::vector<NodeId>> members(static_cast<std::size_t>(max_label + 1));
  for (std::size_t v = 0; v < labels.size(); ++v) members[static_cast<std::size_t>(labels[v])].push_back(static_cast<NodeId>(v));

  std::mt19937_64 rng(split_seed);
  std::vector<NodeId> train, test;
  for (auto& m : members) {
    std::shuffle(m.begin(), m.end(), rng);
    const std::size_t half = m.size() / 2;
    train.insert(train.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(half));
    test.insert(test.end(), m.begin() + static_cast<std::ptrdiff_t>(half), m.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

ClassificationScores eval_node_classification(std::span<const HashCode> codes, std::span<const int> labels,
                                              std::uint64_t split_seed) {
  return eval_node_classification(codes_as_features(codes), labels, split_seed);
}

ClassificationScores eval_node_classification(const Tensor& features, std::span<const int> labels,
                                              std::uint64_t split_seed) {
  if (features.rank() != 2 || features.rows() != labels.size()) {
    throw ShapeError("eval_node_classification: " + std::to_string(labels.size()) + " labels for features of shape " +
                     shape_string(features.shape()));
  }
  const auto [train, test] = stratified_split(labels, split_seed);
  const std::size_t k = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  std::vector<bool> in_train(k, false);
  for (NodeId v : train) in_train[static_cast<std::size_t>(labels[v])] = true;
  if (std::count(in_train.begin(), in_train.end(), true) < 2) {
    throw DataError("eval_node_classification: need at least two classes in the training half");
  }
  if (test.empty()) throw DataError("eval_node_classification: empty test split");

  const Matrix x = design_rows(features, train);
  Matrix y = Matrix::Zero(static_cast<Eigen::Index>(train.size()), static_cast<Eigen::Index>(k));
  for (std::size_t r = 0; r < train.size(); ++r) y(static_cast<Eigen::Index>(r), labels[train[r]]) = 1.0;

  Matrix w = Matrix::Zero(x.cols(), static_cast<Eigen::Index>(k));
  const double step = kLogisticRate / static_cast<double>(train.size());
  for (std::size_t it = 0; it < kLogisticSteps; ++it) {
    Matrix p = (x * w).unaryExpr([](double s) { return 1.0 / (1.0 + std::exp(-s)); });
    w.noalias() -= step * (x.transpose() * (p - y));
  }

  const Matrix scores = design_rows(features, test) * w;
  std::vector<std::size_t> tp(k, 0), fp(k, 0), fn(k, 0);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < test.size(); ++r) {
    Eigen::Index pred = 0;
    scores.row(static_cast<Eigen::Index>(r)).maxCoeff(&pred);  // first maximum wins ties
    const auto truth = static_cast<std::size_t>(labels[test[r]]);
    const auto p = static_cast<std::size_t>(pred);
    if (p == truth) {
      ++correct;
      ++tp[p];
    } else {
      ++fp[p];
      ++fn[truth];
    }
  }

  double macro = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    ++counted;
    if (!in_train[c]) {
      spdlog::warn("eval_node_classification: class {} has no training nodes; scored 0", c);
      continue;
    }
    macro += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
  }
  return {static_cast<double>(correct) / static_cast<double>(test.size()), macro / static_cast<double>(counted)};
}

// ---- link prediction -----------------------------------------------------

LinkSplit make_link_split(const Graph& g, std::uint64_t seed, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("make_link_split: fraction must lie in (0, 1)");
  std::vector<Edge> edges(g.edges().begin(), g.edges().end());
  const auto m = static_cast<std::size_t>(std::floor(static_cast<double>(edges.size()) * fraction));
  if (m == 0) throw DataError("make_link_split: too few edges to hold any out");

  std::mt19937_64 rng(seed);
  std::shuffle(edges.begin(), edges.end(), rng);
  std::vector<Edge> positives(edges.begin(), edges.begin() + static_cast<std::ptrdiff_t>(m));
  std::sort(positives.begin(), positives.end());

  const std::size_t n = g.num_nodes();
  const std::size_t non_edges = n * (n - 1) / 2 - g.num_edges();
  if (non_edges < m) throw DataError("make_link_split: not enough non-edges to match the held-out edges");
  std::uniform_int_distribution<NodeId> pick(0, static_cast<NodeId>(n - 1));
  std::set<Edge> negatives;
  while (negatives.size() < m) {
    const NodeId u = pick(rng), v = pick(rng);
    if (u == v || g.has_edge(u, v)) continue;
    negatives.insert(canonical(u, v));
  }
  return {g.without_edges(positives), std::move(positives), {negatives.begin(), negatives.end()}};
}

double auc(std::span<const double> positive_scores, std::span<const double> negative_scores) {
  if (positive_scores.empty() || negative_scores.empty()) throw DataError("auc: need both positive and negative scores");
  std::vector<std::pair<double, bool>> all;
  all.reserve(positive_scores.size() + negative_scores.size());
  for (double s : positive_scores) all.emplace_back(s, true);
  for (double s : negative_scores) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  // Sum of positive ranks with tied groups sharing their average rank.
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (all[t].second) rank_sum += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(positive_scores.size());
  const double nn = static_cast<double>(negative_scores.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double eval_link_prediction(std::span<const HashCode> codes, const LinkSplit& split) {
  auto score = [&](const Edge& e) { return -static_cast<double>(hamming_distance(codes[e.first], codes[e.second])); };
  std::vector<double> pos, neg;
  for (const Edge& e : split.positives) pos.push_back(score(e));
  for (const Edge& e : split.negatives) neg.push_back(score(e));
  return auc(pos, neg);
}

double eval_link_prediction(std::span<const HashCode> codes, const Graph& g, std::uint64_t seed) {
  if (codes.size() != g.num_nodes()) throw ShapeError("eval_link_prediction: one code per node required");
  return eval_link_prediction(codes, make_link_split(g, seed));
}

double eval_link_prediction(const Tensor& embeddings, const LinkSplit& split) {
  auto score = [&](const Edge& e) {
    double d = 0.0;
    for (std::size_t c = 0; c < embeddings.cols(); ++c) {
      const double diff = embeddings.at(e.first, c) - embeddings.at(e.second, c);
      d += diff * diff;
    }
    return -d;
  };
  std::vector<double> pos, neg;
  for (const Edge& e : split.positives) pos.push_back(score(e));
  for (const Edge& e : split.negatives) neg.push_back(score(e));
  return auc(pos, neg);
}

// ---- node recommendation -------------------------------------------------

RecommendationSplit make_recommendation_split(const Graph& g, std::uint64_t seed, double fraction,
                                              std::size_t min_degree) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("make_recommendation_split: fraction must lie in (0, 1)");
  std::mt19937_64 rng(seed);
  std::set<Edge> removed;
  for (NodeId v = 0; v < g.num_nodes(); ++v) {
    const std::size_t deg = g.degree(v);
    if (deg < min_degree || deg == 0) continue;
    std::vector<NodeId> remaining;
    for (NodeId u : g.neighbors(v)) {
      if (!removed.contains(canonical(u, v))) remaining.push_back(u);
    }
    const auto want = std::min(remaining.size(), static_cast<std::size_t>(std::floor(static_cast<double>(deg) * fraction)));
    std::shuffle(remaining.begin(), remaining.end(), rng);
    for (std::size_t i = 0; i < want; ++i) removed.insert(canonical(v, remaining[i]));
  }

  RecommendationSplit split;
  split.heldout.resize(g.num_nodes());
  for (const auto& [u, v] : removed) {
    split.heldout[u].push_back(v);
    split.heldout[v].push_back(u);
  }
  for (auto& h : split.heldout) std::sort(h.begin(), h.end());
  const std::vector<Edge> removed_list(removed.begin(), removed.end());
  split.train = g.without_edges(removed_list);
  return split;
}

double ndcg_at_k(std::span<const NodeId> ranking, std::span<const NodeId> relevant, std::size_t k) {
  if (relevant.empty()) throw DataError("ndcg_at_k: empty relevant set");
  const std::set<NodeId> rel(relevant.begin(), relevant.end());
  double dcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) {
    if (rel.contains(ranking[r])) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  }
  double ideal = 0.0;
  for (std::size_t r = 0; r < std::min(k, rel.size()); ++r) ideal += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / ideal;
}

double eval_node_recommendation(std::span<const HashCode> codes, const RecommendationSplit& split) {
  const Graph& g = split.train;
  if (codes.size() != g.num_nodes()) throw ShapeError("eval_node_recommendation: one code per node required");
  const HammingIndex index(codes);

  double total = 0.0;
  std::size_t queries = 0;
  std::vector<std::pair<std::size_t, NodeId>> order;
  for (NodeId q = 0; q < g.num_nodes(); ++q) {
    if (split.heldout[q].empty()) continue;
    const auto dist = index.distances(codes[q]);
    order.clear();
    for (NodeId v = 0; v < g.num_nodes(); ++v) {
      if (v != q && !g.has_edge(q, v)) order.emplace_back(dist[v], v);
    }
    const std::size_t k = std::min(kNdcgCutoff, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
    std::vector<NodeId> ranking(k);
    for (std::size_t i = 0; i < k; ++i) ranking[i] = order[i].second;
    total += ndcg_at_k(ranking, split.heldout[q]);
    ++queries;
  }
  if (queries == 0) throw DataError("eval_node_recommendation: no node has held-out neighbors");
  return total / static_cast<double>(queries);
}

double eval_node_recommendation(std::span<const HashCode> codes, const Graph& g, std::uint64_t seed) {
  return eval_node_recommendation(codes, make_recommendation_split(g, seed));
}

// ---- protocol ------------------------------------------------------------

TaskSet parse_tasks(const std::string& list) {
  TaskSet t{false, false, false};
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t end = std::min(list.find(',', start), list.size());
    const std::string item = list.substr(start, end - start);
    if (item == "cls") t.classification = true;
    else if (item == "link") t.link = true;
    else if (item == "rec") t.recommendation = true;
    else throw ConfigError("unknown task '" + item + "' (expected cls, link or rec)");
    start = end + 1;
  }
  return t;
}

TargetHoldout make_target_holdout(const Graph& g, const TaskSet& tasks, std::uint64_t seed) {
  TargetHoldout h{g, std::nullopt, std::nullopt};
  std::mt19937_64 rng(seed);
  const std::uint64_t rec_seed = rng(), link_seed = rng();
  if (tasks.recommendation) {
    h.recommendation = make_recommendation_split(h.train, rec_seed);
    h.train = h.recommendation->train;
  }
  if (tasks.link) {
    h.link = make_link_split(h.train, link_seed);
    h.train = h.link->train;
  }
  return h;
}

EvalReport evaluate_codes(std::span<const HashCode> codes, const Graph& g, const TargetHoldout& holdout,
                          const TaskSet& tasks, std::uint64_t split_seed) {
  if (codes.size() != g.num_nodes()) throw ShapeError("evaluate_codes: one code per node required");
  EvalReport report;
  auto timed = [&](const char* phase, auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    report.seconds.emplace_back(phase, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };
  if (tasks.classification) {
    if (!g.has_labels()) throw DataError("node classification needs labels");
    timed("classification", [&] { report.classification = eval_node_classification(codes, g.labels(), split_seed); });
  }
  if (tasks.link) {
    if (!holdout.link) throw ConfigError("link prediction requested without a link holdout");
    timed("link", [&] { report.link_auc = eval_link_prediction(codes, *holdout.link); });
  }
  if (tasks.recommendation) {
    if (!holdout.recommendation) throw ConfigError("recommendation requested without a recommendation holdout");
    timed("recommendation", [&] { report.ndcg = eval_node_recommendation(codes, *holdout.recommendation); });
  }
  return report;
}

// ---- report --------------------------------------------------------------

std::string EvalReport::to_json(bool with_timing) const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  if (classification) {
    j["node_classification"] = {{"micro_f1", classification->micro_f1},
                                {"macro_f1", classification->macro_f1},
                                {"mean_f1", classification->mean()}};
  }
  if (link_auc) j["link_prediction_auc"] = *link_auc;
  if (ndcg) j["node_recommendation_ndcg50"] = *ndcg;
  if (with_timing) {
    nlohmann::ordered_json t = nlohmann::ordered_json::object();
    for (const auto& [phase, s] : seconds) t[phase] = s;
    j["seconds"] = t;
  }
  return j.dump(2) + "\n";
}

std::string EvalReport::to_table() const {
  std::vector<std::pair<std::string, std::string>> rows;
  if (classification) {
    rows.emplace_back("micro-F1", fmt(classification->micro_f1));
    rows.emplace_back("macro-F1", fmt(classification->macro_f1));
    rows.emplace_back("mean F1", fmt(classification->mean()));
  }
  if (link_auc) rows.emplace_back("link AUC", fmt(*link_auc));
  if (ndcg) rows.emplace_back("NDCG@50", fmt(*ndcg));
  for (const auto& [phase, s] : seconds) rows.emplace_back("time " + phase + " (s)", fmt(s));

  std::size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.first.size());
  std::string out = "metric" + std::string(width - 6 + 2, ' ') + "value\n";
  for (const auto& [name, value] : rows) out += name + std::string(width - name.size() + 2, ' ') + value + "\n";
  return out;
}

void export_embeddings(const ModelParams& params, const Graph& g, const std::filesystem::path& path) {
  const Tensor z = embed_graph(params, g);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "# id\tlabel\t" << z.cols() << " embedding values\n";
  const std::span<const int> labels = g.has_labels() ? g.labels() : std::span<const int>{};
  for (NodeId v = 0; v < g.num_nodes(); ++v) {
    out << v << '\t' << (labels.empty() ? -1 : labels[v]);
    for (std::size_t c = 0; c < z.cols(); ++c) out << '\t' << fmt(z.at(v, c));
    out << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace udah
