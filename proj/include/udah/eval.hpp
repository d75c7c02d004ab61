#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "udah/graph.hpp"
#include "udah/model.hpp"
#include "udah/tensor.hpp"

namespace udah {

// Number of differing bits, via packed XOR and popcount. Throws ShapeError on
// a length mismatch.
std::size_t hamming_distance(const HashCode& a, const HashCode& b);

/// Codes packed 64 bits per word for exhaustive Hamming search.
class HammingIndex {
 public:
  // Ids default to 0..codes.size()-1. All codes must share one length.
  explicit HammingIndex(std::span<const HashCode> codes, std::vector<NodeId> ids = {});

  std::size_t size() const { return ids_.size(); }
  std::size_t code_length() const { return bits_; }
  NodeId id(std::size_t row) const { return ids_[row]; }

  std::size_t distance(std::size_t row_a, std::size_t row_b) const;
  // Distance from the query to every indexed row.
  std::vector<std::size_t> distances(const HashCode& query) const;

  // k ids by ascending distance, ties by ascending id. Throws DataError on an
  // empty index and ConfigError when k > size().
  std::vector<NodeId> topk_query(const HashCode& query, std::size_t k) const;

 private:
  std::vector<std::uint64_t> pack(const HashCode& code) const;

  std::size_t bits_ = 0;
  std::size_t words_ = 0;
  std::vector<std::uint64_t> packed_;  // row-major, words_ per row
  std::vector<NodeId> ids_;
};

// ---- node classification -------------------------------------------------

struct ClassificationScores {
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
  double mean() const { return 0.5 * (micro_f1 + macro_f1); }
};

// Stratified half/half split: within each class, a shuffled half (rounded
// down) goes to training. Returns (train, test) node ids.
std::pair<std::vector<NodeId>, std::vector<NodeId>> stratified_split(std::span<const int> labels,
                                                                     std::uint64_t split_seed);

/// One-vs-rest logistic regression on bits as -1/+1 (plus a bias), 500 full-batch
/// gradient steps at rate 0.1, evaluated on the held-out half.
ClassificationScores eval_node_classification(std::span<const HashCode> codes, std::span<const int> labels,
                                              std::uint64_t split_seed);
// Same protocol on real-valued features, one row per node.
ClassificationScores eval_node_classification(const Tensor& features, std::span<const int> labels,
                                              std::uint64_t split_seed);

// ---- link prediction -----------------------------------------------------

/// Held-out edges and an equal number of uniformly drawn non-edges. The
/// training graph is the input graph minus the held-out edges.
struct LinkSplit {
  Graph train;
  std::vector<Edge> positives;
  std::vector<Edge> negatives;
};

LinkSplit make_link_split(const Graph& g, std::uint64_t seed, double fraction = 0.1);

// Mann-Whitney AUC; ties count one half. Throws DataError if either side is empty.
double auc(std::span<const double> positive_scores, std::span<const double> negative_scores);

// Pairs are scored by negative Hamming distance.
double eval_link_prediction(std::span<const HashCode> codes, const LinkSplit& split);
double eval_link_prediction(std::span<const HashCode> codes, const Graph& g, std::uint64_t seed);
// Pairs are scored by negative squared Euclidean distance between rows.
double eval_link_prediction(const Tensor& embeddings, const LinkSplit& split);

// ---- node recommendation -------------------------------------------------

inline constexpr std::size_t kNdcgCutoff = 50;

/// Per node, the neighbors hidden from training. Nodes with at least
/// min_degree neighbors hide floor(degree * fraction) of their remaining edges;
/// an edge hidden by either endpoint is relevant to both.
struct RecommendationSplit {
  Graph train;
  std::vector<std::vector<NodeId>> heldout;  // indexed by node id
};

RecommendationSplit make_recommendation_split(const Graph& g, std::uint64_t seed, double fraction = 0.1,
                                              std::size_t min_degree = 10);

// Binary-relevance NDCG of a ranking truncated at k, log2 discount.
double ndcg_at_k(std::span<const NodeId> ranking, std::span<const NodeId> relevant, std::size_t k = kNdcgCutoff);

/// Mean NDCG@50 over nodes with a non-empty holdout. Each query ranks every
/// node except itself and its training neighbors by ascending Hamming
/// distance, ties by id. Throws DataError when no node qualifies.
double eval_node_recommendation(std::span<const HashCode> codes, const RecommendationSplit& split);
double eval_node_recommendation(std::span<const HashCode> codes, const Graph& g, std::uint64_t seed);

// ---- protocol ------------------------------------------------------------

struct TaskSet {
  bool classification = true;
  bool link = true;
  bool recommendation = true;
};

// Comma-separated subset of cls, link, rec. Throws ConfigError otherwise.
TaskSet parse_tasks(const std::string& list);

/// Edges hidden from training so link prediction and recommendation score
/// unseen structure. The recommendation split is drawn first; the link split
/// is drawn from what remains. Training must use `train`.
struct TargetHoldout {
  Graph train;
  std::optional<RecommendationSplit> recommendation;
  std::optional<LinkSplit> link;
};

TargetHoldout make_target_holdout(const Graph& g, const TaskSet& tasks, std::uint64_t seed);

struct EvalReport;

// Runs the requested tasks on codes of the full graph g. Classification reads
// g's labels and uses split_seed for its train/test split.
EvalReport evaluate_codes(std::span<const HashCode> codes, const Graph& g, const TargetHoldout& holdout,
                          const TaskSet& tasks, std::uint64_t split_seed);

// ---- report --------------------------------------------------------------

struct EvalReport {
  std::optional<ClassificationScores> classification;
  std::optional<double> link_auc;
  std::optional<double> ndcg;
  std::vector<std::pair<std::string, double>> seconds;  // wall clock per phase

  // Metrics only unless with_timing is set, so runs with equal seeds compare
  // byte for byte.
  std::string to_json(bool with_timing = false) const;
  std::string to_table() const;
};

// Rows of "id<TAB>label<TAB>v_1 ... v_d" after a header; label -1 when unlabeled.
void export_embeddings(const ModelParams& params, const Graph& g, const std::filesystem::path& path);

}  // namespace udah
