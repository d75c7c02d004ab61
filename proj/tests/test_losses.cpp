#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "udah/errors.hpp"
#include "udah/losses.hpp"

using namespace udah;
using udah::testing::random_tensor;

namespace {

// Anchor 0 with the given positive and negative rows of z.
ContrastBatch one_anchor(std::vector<NodeId> pos, std::vector<NodeId> neg) {
  ContrastBatch b;
  b.anchors = {0};
  b.positives = {std::move(pos)};
  b.negatives = {std::move(neg)};
  return b;
}

// Rows on the x axis at the given squared distances from the origin (row 0).
Tensor points_at_squared_distances(std::initializer_list<double> d2) {
  Tensor z({d2.size() + 1, 2}, 0.0);
  std::size_t r = 1;
  for (double d : d2) z.at(r++, 0) = std::sqrt(d);
  return z;
}

Tensor one_hot_rows(std::initializer_list<std::vector<int>> bits) {
  const std::size_t l = bits.begin()->size();
  Tensor u({bits.size(), 2 * l}, 0.0);
  std::size_t r = 0;
  for (const auto& row : bits) {
    for (std::size_t j = 0; j < l; ++j) u.at(r, 2 * j + row[j]) = 1.0;
    ++r;
  }
  return u;
}

double value(ad::Var v) { return v.value().item(); }

}  // namespace

// ---- structure preservation ------------------------------------------------

TEST(Pairwise, InactiveHinge) {
  ad::Tape t;
  auto z = t.constant(points_at_squared_distances({1, 9}));
  EXPECT_DOUBLE_EQ(value(loss::loss_pairwise_contrastive(z, one_anchor({1}, {2}), 5.0, 1)), 0.0);
}

TEST(Pairwise, EqualDistancesCostTheMargin) {
  ad::Tape t;
  auto z = t.constant(points_at_squared_distances({4, 4}));
  EXPECT_NEAR(value(loss::loss_pairwise_contrastive(z, one_anchor({1}, {2}), 5.0, 1)), 5.0, 1e-12);
  EXPECT_NEAR(value(loss::loss_pairwise_contrastive(z, one_anchor({1}, {2}), 0.0, 1)), 0.0, 1e-12);
}

TEST(Pairwise, NegativeMarginIsRejected) {
  ad::Tape t;
  auto z = t.constant(points_at_squared_distances({1, 2}));
  EXPECT_THROW(loss::loss_pairwise_contrastive(z, one_anchor({1}, {2}), -1.0, 1), ConfigError);
}

TEST(Groupwise, HardestPairHandCase) {
  ad::Tape t;
  auto z = t.constant(points_at_squared_distances({1, 2, 3, 5}));
  EXPECT_NEAR(value(loss::loss_groupwise_contrastive(z, one_anchor({1, 2}, {3, 4}), 5.0)), 4.0, 1e-12);
}

TEST(Groupwise, InactiveHingeHasZeroGradient) {
  ad::Tape t;
  Tensor zt = points_at_squared_distances({1, 2, 30, 50});
  auto z = t.param(zt);
  auto loss = loss::loss_groupwise_contrastive(z, one_anchor({1, 2}, {3, 4}), 5.0);
  EXPECT_EQ(value(loss), 0.0);
  t.backward(loss);
  EXPECT_EQ(t.grad_of(zt), Tensor(zt.shape(), 0.0));
}

TEST(Groupwise, SingletonGroupsMatchPairwise) {
  std::mt19937_64 rng(4);
  const Tensor zt = random_tensor({3, 4}, rng);
  ad::Tape t;
  auto z = t.constant(zt);
  const ContrastBatch b = one_anchor({1}, {2});
  EXPECT_NEAR(value(loss::loss_groupwise_contrastive(z, b, 2.0)), value(loss::loss_pairwise_contrastive(z, b, 2.0, 7)),
              1e-12);
}

TEST(Groupwise, EmptyGroupsAreSkipped) {
  ad::Tape t;
  auto z = t.constant(points_at_squared_distances({1, 2, 3}));
  ContrastBatch b = one_anchor({1}, {2});
  b.anchors.push_back(3);
  b.positives.push_back({1});
  b.negatives.push_back({});
  // Anchor 3 has no negatives and is skipped; anchor 0 gives max(0, 4 + 1 - 2) = 3.
  EXPECT_NEAR(value(loss::loss_groupwise_contrastive(z, b, 4.0)), 3.0, 1e-12);
}

TEST(Groupwise, DominatesPairwiseOnRandomBatches) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor zt = random_tensor({12, 3}, rng);
    ContrastBatch b;
    for (NodeId a = 0; a < 4; ++a) {
      b.anchors.push_back(a);
      b.positives.push_back({NodeId(4 + a), NodeId(8 + a)});
      b.negatives.push_back({NodeId(8 + (a + 1) % 4), NodeId(4 + (a + 2) % 4), NodeId(4 + (a + 3) % 4)});
    }
    ad::Tape t;
    auto z = t.constant(zt);
    EXPECT_GE(value(loss::loss_groupwise_contrastive(z, b, 1.0)) + 1e-12,
              value(loss::loss_pairwise_contrastive(z, b, 1.0, trial)));
  }
}

TEST(ToRows, RemapsEveryId) {
  ContrastBatch b = one_anchor({5}, {7, 9});
  b.anchors = {3};
  std::vector<std::size_t> row_of(10, 0);
  row_of[3] = 0;
  row_of[5] = 1;
  row_of[7] = 2;
  row_of[9] = 3;
  const ContrastBatch r = loss::to_rows(b, row_of);
  EXPECT_EQ(r.anchors, std::vector<NodeId>{0});
  EXPECT_EQ(r.positives[0], std::vector<NodeId>{1});
  EXPECT_EQ(r.negatives[0], (std::vector<NodeId>{2, 3}));
}

// ---- hashing ----------------------------------------------------------------

TEST(HashLoss, PerfectMatchIsZero) {
  ad::Tape t;
  auto u = t.constant(one_hot_rows({{0, 1, 1, 0}, {0, 1, 1, 0}}));
  EXPECT_DOUBLE_EQ(value(loss::loss_hash(u, {{0, 1, 1.0}}, 4)), 0.0);
}

TEST(HashLoss, DisjointCodesWithDissimilarLabel) {
  ad::Tape t;
  auto u = t.constant(one_hot_rows({{0, 1, 1, 0}, {1, 0, 0, 1}}));
  EXPECT_DOUBLE_EQ(value(loss::loss_hash(u, {{0, 1, -1.0}}, 4)), 0.5);
  EXPECT_DOUBLE_EQ(value(loss::loss_hash(u, {{0, 1, -1.0}, {1, 0, -1.0}}, 4)), 1.0);
}

TEST(HashLoss, UniformBlocksAgainstOneHot) {
  Tensor rows = one_hot_rows({{0, 0, 0}, {1, 0, 1}});
  for (std::size_t j = 0; j < 6; ++j) rows.at(0, j) = 0.5;
  ad::Tape t;
  auto u = t.constant(rows);
  for (double s : {1.0, -1.0}) {
    EXPECT_NEAR(value(loss::loss_hash(u, {{0, 1, s}}, 3)), (0.5 - s) * (0.5 - s) / 2, 1e-15);
  }
}

TEST(HashLoss, SignVariantUsesPlusMinusOneCodes) {
  // Logit pairs (l0, l1): bit = sign(l1 - l0). Rows agree on 1 of 2 bits.
  ad::Tape t;
  auto logits = t.constant(Tensor::matrix(2, 4, {0, 1, 0, 2, 0, 3, 1, 0}));
  // b0 = (+1, +1), b1 = (+1, -1): dot / l = 0, s = 1 -> 1/2.
  EXPECT_DOUBLE_EQ(value(loss::loss_hash_sign(logits, {{0, 1, 1.0}}, 2)), 0.5);
}

TEST(SimilarityPairs, SingleClassGivesOnlyPositives) {
  const std::vector<int> labels(6, 2);
  for (const auto& p : loss::build_similarity_pairs(labels, 1, 4)) {
    EXPECT_EQ(p.s, 1.0);
    EXPECT_NE(p.i, p.j);
  }
}

TEST(SimilarityPairs, BalancedTwoClassBatch) {
  const std::vector<int> labels{0, 1, 0, 1, 0, 1, 0, 1};
  const auto pairs = loss::build_similarity_pairs(labels, 3, 4);
  std::size_t pos = 0, neg = 0;
  for (const auto& p : pairs) {
    EXPECT_EQ(p.s, labels[p.i] == labels[p.j] ? 1.0 : -1.0);
    (p.s > 0 ? pos : neg)++;
  }
  EXPECT_GT(pos, 0u);
  EXPECT_EQ(pos, neg);
}

TEST(SimilarityPairs, LoneClassMemberFallsBackToNegatives) {
  const std::vector<int> labels{0, 1, 1, 1};
  for (const auto& p : loss::build_similarity_pairs(labels, 2, 4)) {
    if (p.i == 0) {
      EXPECT_EQ(p.s, -1.0);
    }
  }
}

TEST(SimilarityPairs, DeterministicPerSeed) {
  const std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1};
  const auto a = loss::build_similarity_pairs(labels, 9, 4), b = loss::build_similarity_pairs(labels, 9, 4);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].i, b[k].i);
    EXPECT_EQ(a[k].j, b[k].j);
  }
}

// ---- discriminators -----------------------------------------------------------

TEST(SourceCe, PerfectAndUniform) {
  ad::Tape t;
  const std::vector<int> y{1, 0};
  EXPECT_DOUBLE_EQ(value(loss::loss_source_ce(t.constant(Tensor::matrix(2, 2, {0, 1, 1, 0})), y)), 0.0);
  auto uniform = t.constant(Tensor({2, 8}, 0.125));
  EXPECT_NEAR(value(loss::loss_source_ce(uniform, y)), std::log(8.0), 1e-12);
  EXPECT_NEAR(std::log(8.0), 2.0794, 1e-4);
}

TEST(SourceCe, ZeroProbabilityIsFloored) {
  ad::Tape t;
  const std::vector<int> y{0};
  const double l = value(loss::loss_source_ce(t.constant(Tensor::matrix(1, 2, {0, 1})), y));
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, -std::log(loss::kProbFloor), 1e-9);
}

TEST(PseudoLabels, StrictThreshold) {
  const Tensor probs = Tensor::matrix(3, 3, {0.9, 0.05, 0.05, 0.4, 0.3, 0.3, 0.05, 0.85, 0.1});
  EXPECT_EQ(loss::assign_pseudo_labels(probs, 0.85), (loss::PseudoLabels{0, -1, -1}));
  EXPECT_EQ(loss::assign_pseudo_labels(Tensor::matrix(1, 2, {0.5, 0.5}), 0.85), (loss::PseudoLabels{-1}));
  EXPECT_EQ(loss::assign_pseudo_labels(probs, 0.8), (loss::PseudoLabels{0, -1, 1}));
}

TEST(TargetCe, RejectedRowsAreIgnored) {
  ad::Tape t;
  auto uniform = t.constant(Tensor({2, 8}, 0.125));
  EXPECT_EQ(value(loss::loss_target_ce(uniform, {-1, -1})), 0.0);
  EXPECT_NEAR(value(loss::loss_target_ce(uniform, {-1, 3})), std::log(8.0), 1e-12);
  EXPECT_DOUBLE_EQ(value(loss::loss_target_ce(t.constant(Tensor::matrix(2, 2, {0, 1, 0.5, 0.5})), {1, -1})), 0.0);
}

TEST(Kl, IdenticalRowsAndHandCase) {
  ad::Tape t;
  auto p = t.constant(Tensor::matrix(2, 3, {0.2, 0.3, 0.5, 0.6, 0.2, 0.2}));
  EXPECT_NEAR(value(loss::loss_kl(p, p)), 0.0, 1e-15);
  EXPECT_NEAR(value(loss::loss_kl(t.constant(Tensor::matrix(1, 2, {1, 0})), t.constant(Tensor::matrix(1, 2, {.5, .5})))),
              std::log(2.0), 1e-12);
}

TEST(Kl, NonNegativeOnRandomDistributions) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    ad::Tape t;
    auto s = ad::row_softmax(t.constant(random_tensor({4, 5}, rng, -3, 3)));
    auto q = ad::row_softmax(t.constant(random_tensor({4, 5}, rng, -3, 3)));
    EXPECT_GE(value(loss::loss_kl(s, q)), -1e-15);
  }
}

TEST(Kl, GradientReachesBothArguments) {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  ad::Tape t;
  t.backward(loss::loss_kl(ad::row_softmax(t.param(a)), ad::row_softmax(t.param(b))));
  auto nonzero = [](const Tensor& g) {
    double s = 0;
    for (double x : g.data()) s += std::abs(x);
    return s > 0;
  };
  EXPECT_TRUE(nonzero(t.grad_of(a)));
  EXPECT_TRUE(nonzero(t.grad_of(b)));
}

// ---- centers -------------------------------------------------------------------

TEST(Centers, SharedClassDistance) {
  ad::Tape t;
  auto zs = t.constant(Tensor::matrix(2, 2, {-1, 1, 1, -1}));
  auto zt = t.constant(Tensor::matrix(1, 2, {3, 4}));
  const std::vector<int> ys{0, 0};
  EXPECT_NEAR(value(loss::loss_center_alignment(zs, ys, zt, std::vector<int>{0}, 2)), 25.0, 1e-12);
  EXPECT_EQ(value(loss::loss_center_alignment(zs, ys, zs, ys, 2)), 0.0);
}

TEST(Centers, NoSharedClassHasZeroGradient) {
  Tensor a = Tensor::matrix(1, 2, {1, 2}), b = Tensor::matrix(2, 2, {3, 4, 5, 6});
  ad::Tape t;
  auto loss = loss::loss_center_alignment(t.param(a), std::vector<int>{0}, t.param(b), std::vector<int>{1, -1}, 2);
  EXPECT_EQ(value(loss), 0.0);
  t.backward(loss);
  EXPECT_EQ(t.grad_of(a), Tensor({1, 2}, 0.0));
  EXPECT_EQ(t.grad_of(b), Tensor({2, 2}, 0.0));
}

TEST(Centers, BatchClassMeans) {
  const auto [means, present] = loss::batch_class_means(Tensor::matrix(3, 1, {1, 3, 10}), std::vector<int>{0, 0, -1}, 2);
  EXPECT_EQ(means.at(0, 0), 2.0);
  EXPECT_EQ(present, (std::vector<bool>{true, false}));
}

TEST(Centers, EmaUpdate) {
  auto table_with = [](double c) {
    CenterTable t = CenterTable::empty(1, 1);
    t.centers[0] = c;
    t.seen[0] = true;
    return t;
  };
  const Tensor zero({1, 1}, 0.0), two({1, 1}, 2.0);
  CenterTable t = table_with(1.0);
  loss::update_centers(t, zero, {true}, 0.3);
  EXPECT_NEAR(t.centers[0], 0.3, 1e-15);

  t = table_with(1.0);
  loss::update_centers(t, two, {true}, 1.0);
  EXPECT_EQ(t.centers[0], 1.0);

  t = table_with(1.0);
  loss::update_centers(t, two, {true}, 0.0);
  EXPECT_EQ(t.centers[0], 2.0);

  t = table_with(1.0);
  loss::update_centers(t, two, {false}, 0.0);
  EXPECT_EQ(t.centers[0], 1.0);
}

TEST(Centers, FirstSightingTakesTheBatchMean) {
  CenterTable t = CenterTable::empty(2, 1);
  loss::update_centers(t, Tensor::matrix(2, 1, {5, 7}), {true, false}, 0.3);
  EXPECT_EQ(t.centers[0], 5.0);
  EXPECT_EQ(t.seen, (std::vector<bool>{true, false}));
}
