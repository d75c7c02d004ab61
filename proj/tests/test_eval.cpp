#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "test_util.hpp"
#include "udah/errors.hpp"
#include "udah/eval.hpp"
#include "udah/sampling.hpp"

using namespace udah;
using udah::testing::TempDir;

namespace {

HashCode random_code(std::size_t bits, std::mt19937_64& rng) {
  std::vector<std::uint8_t> b(bits);
  for (auto& x : b) x = static_cast<std::uint8_t>(rng() & 1);
  return HashCode(std::move(b));
}

std::size_t naive_hamming(const HashCode& a, const HashCode& b) {
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

// Node i's code has its first i bits set, so its distance to node 0 is i.
std::vector<HashCode> staircase_codes(std::size_t n, std::size_t bits) {
  std::vector<HashCode> codes;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint8_t> b(bits, 0);
    std::fill_n(b.begin(), i, 1);
    codes.emplace_back(std::move(b));
  }
  return codes;
}

RecommendationSplit query_zero_split(std::size_t n, std::vector<NodeId> relevant) {
  RecommendationSplit s{Graph(n, 1, {}, std::vector<SparseVector>(n)), std::vector<std::vector<NodeId>>(n)};
  s.heldout[0] = std::move(relevant);
  return s;
}

// Brute-force AUC over all positive/negative pairs.
double pairwise_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double wins = 0;
  for (double p : pos) {
    for (double q : neg) wins += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
  }
  return wins / static_cast<double>(pos.size() * neg.size());
}

}  // namespace

// ---- Hamming search -----------------------------------------------------------

TEST(Hamming, SmallCases) {
  EXPECT_EQ(hamming_distance(HashCode({0, 1, 1}), HashCode({0, 1, 1})), 0u);
  EXPECT_EQ(hamming_distance(HashCode({0, 0}), HashCode({1, 1})), 2u);
  EXPECT_THROW(hamming_distance(HashCode({0}), HashCode({0, 1})), ShapeError);
}

TEST(Hamming, MatchesNaiveLoopAcrossWordBoundaries) {
  std::mt19937_64 rng(1);
  for (std::size_t bits : {1, 63, 64, 65, 128, 200}) {
    for (int t = 0; t < 200; ++t) {
      const HashCode a = random_code(bits, rng), b = random_code(bits, rng);
      ASSERT_EQ(hamming_distance(a, b), naive_hamming(a, b)) << bits;
    }
  }
}

TEST(HammingIndex, TopKMatchesSortedOracle) {
  std::mt19937_64 rng(2);
  std::vector<HashCode> codes;
  for (int i = 0; i < 300; ++i) codes.push_back(random_code(24, rng));  // short codes force ties
  const HammingIndex index(codes);
  for (int q = 0; q < 20; ++q) {
    const HashCode query = random_code(24, rng);
    std::vector<NodeId> oracle(codes.size());
    std::iota(oracle.begin(), oracle.end(), NodeId{0});
    std::stable_sort(oracle.begin(), oracle.end(), [&](NodeId a, NodeId b) {
      return naive_hamming(query, codes[a]) < naive_hamming(query, codes[b]);
    });
    oracle.resize(17);
    EXPECT_EQ(index.topk_query(query, 17), oracle);
  }
}

TEST(HammingIndex, QueryOfIndexedCodeComesFirst) {
  std::mt19937_64 rng(3);
  std::vector<HashCode> codes;
  for (int i = 0; i < 50; ++i) codes.push_back(random_code(128, rng));
  const HammingIndex index(codes);
  EXPECT_EQ(index.topk_query(codes[31], 1), std::vector<NodeId>{31});
  const auto all = index.topk_query(codes[31], 50);
  EXPECT_EQ(std::set<NodeId>(all.begin(), all.end()).size(), 50u);
}

TEST(HammingIndex, CustomIdsAndErrors) {
  const std::vector<HashCode> codes{HashCode({1, 1}), HashCode({0, 0})};
  const HammingIndex index(codes, {70, 10});
  EXPECT_EQ(index.topk_query(HashCode({0, 1}), 2), (std::vector<NodeId>{10, 70}));
  EXPECT_EQ(index.distance(0, 1), 2u);
  EXPECT_THROW(index.topk_query(HashCode({0, 1}), 3), ConfigError);
  EXPECT_THROW(HammingIndex(std::span<const HashCode>{}).topk_query(HashCode({0}), 1), DataError);
}

// ---- node classification ------------------------------------------------------------

TEST(Classification, StratifiedSplitHalvesEachClass) {
  std::vector<int> labels;
  for (int c = 0; c < 3; ++c) labels.insert(labels.end(), 11, c);
  const auto [train, test] = stratified_split(labels, 4);
  EXPECT_EQ(train.size(), 15u);
  EXPECT_EQ(test.size(), 18u);
  std::vector<int> per_class(3, 0);
  for (NodeId v : train) ++per_class[labels[v]];
  EXPECT_EQ(per_class, (std::vector<int>{5, 5, 5}));
}

TEST(Classification, SeparableBitGivesPerfectScores) {
  std::mt19937_64 rng(5);
  std::vector<HashCode> codes;
  std::vector<int> labels;
  for (int i = 0; i < 80; ++i) {
    const int y = i % 2;
    std::vector<std::uint8_t> bits(16);
    for (auto& b : bits) b = static_cast<std::uint8_t>(rng() & 1);
    bits[0] = static_cast<std::uint8_t>(y);
    codes.emplace_back(bits);
    labels.push_back(y);
  }
  const ClassificationScores s = eval_node_classification(codes, labels, 1);
  EXPECT_DOUBLE_EQ(s.micro_f1, 1.0);
  EXPECT_DOUBLE_EQ(s.mean(), 1.0);
}

TEST(Classification, ConstantCodesScoreChanceOnBalancedClasses) {
  std::vector<int> labels;
  for (int i = 0; i < 160; ++i) labels.push_back(i % 8);
  const std::vector<HashCode> codes(labels.size(), HashCode({1, 0, 1, 1}));
  EXPECT_NEAR(eval_node_classification(codes, labels, 3).micro_f1, 0.125, 1e-12);
}

TEST(Classification, InvariantToBitOrder) {
  std::mt19937_64 rng(6);
  std::vector<HashCode> codes, permuted;
  std::vector<int> labels;
  std::vector<std::size_t> perm(32);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (int i = 0; i < 120; ++i) {
    codes.push_back(random_code(32, rng));
    std::vector<std::uint8_t> p(32);
    for (std::size_t j = 0; j < 32; ++j) p[j] = codes.back()[perm[j]];
    permuted.emplace_back(p);
    labels.push_back(static_cast<int>(rng() % 3));
  }
  const auto a = eval_node_classification(codes, labels, 7), b = eval_node_classification(permuted, labels, 7);
  EXPECT_NEAR(a.micro_f1, b.micro_f1, 1e-6);
  EXPECT_NEAR(a.macro_f1, b.macro_f1, 1e-6);
}

TEST(Classification, RandomCodesScoreNearChance) {
  double total = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    std::vector<HashCode> codes;
    std::vector<int> labels;
    for (int i = 0; i < 200; ++i) {
      codes.push_back(random_code(64, rng));
      labels.push_back(i % 2);
    }
    total += eval_node_classification(codes, labels, seed).mean();
  }
  EXPECT_NEAR(total / 20, 0.5, 0.1);
}

TEST(Classification, RealValuedFeatures) {
  Tensor x({40, 2}, 0.0);
  std::vector<int> labels;
  for (std::size_t i = 0; i < 40; ++i) {
    labels.push_back(static_cast<int>(i % 2));
    x.at(i, 0) = labels.back() ? 1.5 : -1.5;
    x.at(i, 1) = static_cast<double>(i % 7) / 7.0;
  }
  EXPECT_DOUBLE_EQ(eval_node_classification(x, labels, 2).mean(), 1.0);
}

TEST(Classification, NeedsTwoTrainingClasses) {
  const std::vector<int> labels(10, 0);
  const std::vector<HashCode> codes(10, HashCode({1}));
  EXPECT_THROW(eval_node_classification(codes, labels, 1), DataError);
}

// ---- link prediction ------------------------------------------------------------------

TEST(Auc, HandCases) {
  const double pos[] = {3, 2}, neg[] = {1, 0};
  EXPECT_DOUBLE_EQ(auc(pos, neg), 1.0);
  EXPECT_DOUBLE_EQ(auc(neg, pos), 0.0);
  const double same[] = {4, 4, 4};
  EXPECT_DOUBLE_EQ(auc(same, same), 0.5);
  EXPECT_THROW(auc(pos, std::span<const double>{}), DataError);
}

TEST(Auc, MatchesPairwiseCountWithTies) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> small(0, 6);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> pos(1 + rng() % 20), neg(1 + rng() % 20);
    for (double& x : pos) x = small(rng);
    for (double& x : neg) x = small(rng);
    EXPECT_NEAR(auc(pos, neg), pairwise_auc(pos, neg), 1e-12);
    EXPECT_NEAR(auc(pos, neg) + auc(neg, pos), 1.0, 1e-12);
  }
}

TEST(LinkSplit, HoldsOutEdgesAndSamplesNonEdges) {
  SyntheticSpec spec;
  const Graph& g = gen_synthetic_pair(spec).source;
  const LinkSplit s = make_link_split(g, 3);
  EXPECT_EQ(s.positives.size(), g.num_edges() / 10);
  EXPECT_EQ(s.negatives.size(), s.positives.size());
  EXPECT_EQ(s.train.num_edges(), g.num_edges() - s.positives.size());
  for (const auto& [u, v] : s.positives) {
    EXPECT_TRUE(g.has_edge(u, v));
    EXPECT_FALSE(s.train.has_edge(u, v));
  }
  for (const auto& [u, v] : s.negatives) EXPECT_FALSE(g.has_edge(u, v));
  EXPECT_EQ(make_link_split(g, 3).positives, s.positives);
}

TEST(LinkPrediction, PerfectCodesScoreOne) {
  // Two cliques; codes equal within a clique and complementary across.
  std::vector<Edge> edges;
  for (NodeId a = 0; a < 10; ++a) {
    for (NodeId b = a + 1; b < 10; ++b) {
      if ((a < 5) == (b < 5)) edges.emplace_back(a, b);
    }
  }
  const Graph g(10, 1, edges, std::vector<SparseVector>(10));
  std::vector<HashCode> codes;
  for (NodeId v = 0; v < 10; ++v) codes.emplace_back(std::vector<std::uint8_t>(8, v < 5 ? 0 : 1));
  const LinkSplit s{g, {{0, 1}, {5, 9}}, {{0, 5}, {3, 7}}};
  EXPECT_DOUBLE_EQ(eval_link_prediction(codes, s), 1.0);
  const std::vector<HashCode> flat(10, HashCode({0, 1}));
  EXPECT_DOUBLE_EQ(eval_link_prediction(flat, s), 0.5);
}

// ---- node recommendation ------------------------------------------------------------

TEST(Ndcg, HandCases) {
  const NodeId ranking[] = {4, 7, 1, 9};
  const NodeId first_two[] = {4, 7};
  const NodeId absent[] = {100};
  const NodeId second[] = {7};
  EXPECT_DOUBLE_EQ(ndcg_at_k(ranking, first_two), 1.0);
  EXPECT_DOUBLE_EQ(ndcg_at_k(ranking, absent), 0.0);
  EXPECT_NEAR(ndcg_at_k(ranking, second), 1.0 / std::log2(3.0), 1e-15);
  EXPECT_NEAR(1.0 / std::log2(3.0), 0.6309, 1e-4);
  EXPECT_DOUBLE_EQ(ndcg_at_k(ranking, second, 1), 0.0);
}

TEST(Recommendation, HandCasesThroughTheFullPipeline) {
  const auto codes = staircase_codes(60, 64);
  EXPECT_NEAR(eval_node_recommendation(codes, query_zero_split(60, {1, 2, 3})), 1.0, 1e-9);
  EXPECT_NEAR(eval_node_recommendation(codes, query_zero_split(60, {59})), 0.0, 1e-9);
  EXPECT_NEAR(eval_node_recommendation(codes, query_zero_split(60, {2})), 1.0 / std::log2(3.0), 1e-9);
}

TEST(Recommendation, TrainingNeighborsAreExcludedFromTheRanking) {
  const auto codes = staircase_codes(60, 64);
  RecommendationSplit s = query_zero_split(60, {2});
  s.train = Graph(60, 1, {{0, 1}}, std::vector<SparseVector>(60));
  EXPECT_NEAR(eval_node_recommendation(codes, s), 1.0, 1e-9);
}

TEST(Recommendation, SplitHidesSymmetricEdges) {
  SyntheticSpec spec;
  spec.edge_prob_in = 0.4;
  const Graph& g = gen_synthetic_pair(spec).source;
  const RecommendationSplit s = make_recommendation_split(g, 5);
  std::size_t hidden = 0;
  for (NodeId v = 0; v < g.num_nodes(); ++v) {
    for (NodeId u : s.heldout[v]) {
      EXPECT_TRUE(g.has_edge(u, v));
      EXPECT_FALSE(s.train.has_edge(u, v));
      EXPECT_TRUE(std::binary_search(s.heldout[u].begin(), s.heldout[u].end(), v));
      ++hidden;
    }
  }
  EXPECT_GT(hidden, 0u);
  EXPECT_EQ(s.train.num_edges() + hidden / 2, g.num_edges());
}

TEST(Recommendation, NoQualifyingNodeThrows) {
  const auto codes = staircase_codes(5, 8);
  EXPECT_THROW(eval_node_recommendation(codes, query_zero_split(5, {})), DataError);
}

// ---- protocol and reports ------------------------------------------------------------

TEST(Tasks, Parse) {
  const TaskSet t = parse_tasks("cls,rec");
  EXPECT_TRUE(t.classification);
  EXPECT_FALSE(t.link);
  EXPECT_TRUE(t.recommendation);
  EXPECT_THROW(parse_tasks("cls,foo"), ConfigError);
}

TEST(Holdout, TrainingGraphLacksEveryHiddenEdge) {
  SyntheticSpec spec;
  spec.edge_prob_in = 0.4;
  const Graph& g = gen_synthetic_pair(spec).target;
  const TargetHoldout h = make_target_holdout(g, TaskSet{}, 9);
  ASSERT_TRUE(h.link && h.recommendation);
  for (const auto& [u, v] : h.link->positives) EXPECT_FALSE(h.train.has_edge(u, v));
  for (NodeId v = 0; v < g.num_nodes(); ++v) {
    for (NodeId u : h.recommendation->heldout[v]) EXPECT_FALSE(h.train.has_edge(u, v));
  }
  const TargetHoldout none = make_target_holdout(g, parse_tasks("cls"), 9);
  EXPECT_FALSE(none.link || none.recommendation);
  EXPECT_EQ(none.train.num_edges(), g.num_edges());
}

TEST(Report, JsonIsDeterministicAndOmitsTimingByDefault) {
  SyntheticSpec spec;
  spec.edge_prob_in = 0.4;
  const Graph& g = gen_synthetic_pair(spec).target;
  std::mt19937_64 rng(4);
  std::vector<HashCode> codes;
  for (std::size_t v = 0; v < g.num_nodes(); ++v) codes.push_back(random_code(32, rng));
  const TargetHoldout h = make_target_holdout(g, TaskSet{}, 1);
  const EvalReport a = evaluate_codes(codes, g, h, TaskSet{}, 2), b = evaluate_codes(codes, g, h, TaskSet{}, 2);
  EXPECT_EQ(a.to_json(), b.to_json());
  const auto j = nlohmann::json::parse(a.to_json());
  EXPECT_TRUE(j.contains("node_classification"));
  EXPECT_TRUE(j["node_classification"].contains("mean_f1"));
  EXPECT_TRUE(j.contains("link_prediction_auc"));
  EXPECT_TRUE(j.contains("node_recommendation_ndcg50"));
  EXPECT_FALSE(j.contains("seconds"));
  EXPECT_TRUE(nlohmann::json::parse(a.to_json(true)).contains("seconds"));
  EXPECT_NE(a.to_table().find("AUC"), std::string::npos);
}

TEST(Export, OneRowPerNodeWithUnlabeledMarker) {
  TempDir dir("export");
  ModelConfig mc;
  mc.input_dim = 2;
  mc.encoder_widths = {3};
  mc.discriminator_widths = {2};
  mc.code_length = 4;
  mc.num_classes = 2;
  const ModelParams p = init_model(mc, 1);
  const Graph g(3, 2, {{0, 1}}, {{{0, 1.0}}, {{1, -1.0}}, {}});
  export_embeddings(p, g, dir.path() / "e.tsv");
  std::ifstream in(dir.path() / "e.tsv");
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') rows.push_back(line);
  }
  ASSERT_EQ(rows.size(), 3u);
  const Tensor z = embed_graph(p, g);
  for (std::size_t v = 0; v < 3; ++v) {
    std::istringstream row(rows[v]);
    std::size_t id;
    int label;
    row >> id >> label;
    EXPECT_EQ(id, v);
    EXPECT_EQ(label, -1);
    for (std::size_t j = 0; j < 3; ++j) {
      double x;
      row >> x;
      EXPECT_EQ(x, z.at(v, j));
    }
  }
}
