#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "udah/autodiff.hpp"
#include "udah/model.hpp"
#include "udah/sampling.hpp"

namespace udah::loss {

inline constexpr double kProbFloor = 1e-12;
inline constexpr int kRejected = -1;

/// (i, j, s): rows i and j of the same batch, s = +1 for a shared label, -1 otherwise.
struct SimilarityPair {
  std::size_t i;
  std::size_t j;
  double s;
};
using SimilarityPairs = std::vector<SimilarityPair>;

// Per target row: accepted class id, or kRejected.
using PseudoLabels = std::vector<int>;

// Rewrites node ids of a contrast batch into row indices of an embedding
// matrix. row_of[v] must be defined for every id the batch mentions.
ContrastBatch to_rows(const ContrastBatch& batch, std::span<const std::size_t> row_of);

// ---- structure preservation (ids in `batch` are rows of z) ----------------

/// Mean hinge max(0, margin + phi(a, p) - phi(a, n)) with one positive and one
/// negative drawn uniformly per anchor; phi is squared Euclidean distance.
ad::Var loss_pairwise_contrastive(ad::Var z, const ContrastBatch& batch, double margin, std::uint64_t seed);

/// Mean hinge against the farthest positive and the nearest negative of each
/// anchor. Anchors with an empty group are skipped.
ad::Var loss_groupwise_contrastive(ad::Var z, const ContrastBatch& batch, double margin);

// ---- supervised hashing --------------------------------------------------

/// 1/2 sum over pairs of (u_i . u_j / l - s_ij)^2 on relaxed codes u.
ad::Var loss_hash(ad::Var u, const SimilarityPairs& pairs, std::size_t code_length);

/// Same objective on sign codes b = sign(logit_1 - logit_0) in {-1, +1}^l with
/// a straight-through tanh gradient; the hashing fallback used when the
/// Gumbel relaxation is ablated.
ad::Var loss_hash_sign(ad::Var logits, const SimilarityPairs& pairs, std::size_t code_length);

// For each row, up to pairs_per_node / 2 same-label partners and as many
// different-label partners, balanced when both kinds exist.
SimilarityPairs build_similarity_pairs(std::span<const int> labels, std::uint64_t seed, std::size_t pairs_per_node);

// ---- cross-domain discriminators -----------------------------------------

// -mean log p[y] with p floored at kProbFloor.
ad::Var loss_source_ce(ad::Var probs, std::span<const int> labels);

// argmax class where the row maximum is strictly above threshold, else kRejected.
PseudoLabels assign_pseudo_labels(const Tensor& probs, double threshold);

// Cross-entropy averaged over accepted rows; a constant 0 when none is accepted.
ad::Var loss_target_ce(ad::Var probs, const PseudoLabels& pseudo);

// mean_i KL(student_i || teacher_i), both arguments differentiable.
ad::Var loss_kl(ad::Var student, ad::Var teacher);

// ---- semantic centers ----------------------------------------------------

/// Per-class mean rows of z (labels < 0 are ignored) and which classes appear.
std::pair<Tensor, std::vector<bool>> batch_class_means(const Tensor& z, std::span<const int> labels,
                                                       std::size_t num_classes);

/// Sum over classes present in both batches of ||mean_s(c) - mean_t(c)||^2.
/// Source rows are grouped by label, target rows by pseudo label.
ad::Var loss_center_alignment(ad::Var z_source, std::span<const int> source_labels, ad::Var z_target,
                              std::span<const int> pseudo, std::size_t num_classes);

// C <- eps * C + (1 - eps) * batch mean for classes present in the batch;
// a class seen for the first time takes the batch mean directly.
void update_centers(CenterTable& table, const Tensor& means, const std::vector<bool>& present, double eps);

}  // namespace udah::loss
