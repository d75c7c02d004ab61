#include "udah/losses.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "udah/errors.hpp"

namespace udah::loss {

namespace {

double squared_distance(const Tensor& z, std::size_t a, std::size_t b) {
  const std::size_t c = z.cols();
  double s = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    const double d = z[a * c + j] - z[b * c + j];
    s += d * d;
  }
  return s;
}

// Row-wise squared distances between z[a[k]] and z[b[k]].
ad::Var distances(ad::Var z, std::span<const std::size_t> a, std::span<const std::size_t> b) {
  return ad::row_sum(ad::square(ad::sub(ad::gather_rows(z, a), ad::gather_rows(z, b))));
}

ad::Var hinge_mean(ad::Var z, const std::vector<std::size_t>& anchors, const std::vector<std::size_t>& pos,
                   const std::vector<std::size_t>& neg, double margin) {
  ad::Var gap = ad::sub(distances(z, anchors, pos), distances(z, anchors, neg));
  return ad::mean(ad::relu(ad::add_scalar(gap, margin)));
}

void check_margin(double margin) {
  if (!(margin >= 0.0)) throw ConfigError("contrastive loss: margin must be non-negative");
}

ad::Var zero(ad::Tape& tape) { return tape.constant(Tensor::scalar(0.0)); }

void check_probs(const char* op, const Tensor& p) {
  if (p.rank() != 2) throw ShapeError(std::string(op) + ": expected [N, K] probabilities, got " + shape_string(p.shape()));
}

// Bit differences logit_1 - logit_0 per block as a [l*k, l] selection matrix.
Tensor block_difference(std::size_t code_length, std::size_t options) {
  Tensor d(Shape{code_length * options, code_length});
  for (std::size_t j = 0; j < code_length; ++j) {
    d.at(j * options, j) = -1.0;
    d.at(j * options + 1, j) = 1.0;
  }
  return d;
}

ad::Var code_agreement_loss(ad::Var codes, const SimilarityPairs& pairs, std::size_t code_length) {
  const std::size_t n = codes.value().dim(0);
  std::vector<std::size_t> is, js;
  Tensor targets(Shape{pairs.size()});
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    if (pairs[k].i >= n || pairs[k].j >= n) {
      throw DataError("hash loss: pair (" + std::to_string(pairs[k].i) + ", " + std::to_string(pairs[k].j) +
                      ") outside a batch of " + std::to_string(n));
    }
    is.push_back(pairs[k].i);
    js.push_back(pairs[k].j);
    targets[k] = pairs[k].s;
  }
  if (pairs.empty()) return zero(codes.tape());
  ad::Var inner = ad::scale(ad::row_sum(ad::mul(ad::gather_rows(codes, is), ad::gather_rows(codes, js))),
                            1.0 / static_cast<double>(code_length));
  ad::Var residual = ad::sub(inner, codes.tape().constant(std::move(targets)));
  return ad::scale(ad::sum(ad::square(residual)), 0.5);
}

}  // namespace

ContrastBatch to_rows(const ContrastBatch& batch, std::span<const std::size_t> row_of) {
  auto map = [&](NodeId v) { return static_cast<NodeId>(row_of[v]); };
  ContrastBatch out;
  out.skipped = batch.skipped;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    out.anchors.push_back(map(batch.anchors[k]));
    auto& p = out.positives.emplace_back();
    for (NodeId v : batch.positives[k]) p.push_back(map(v));
    auto& n = out.negatives.emplace_back();
    for (NodeId v : batch.negatives[k]) n.push_back(map(v));
  }
  return out;
}

ad::Var loss_pairwise_contrastive(ad::Var z, const ContrastBatch& batch, double margin, std::uint64_t seed) {
  check_margin(margin);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> anchors, pos, neg;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const auto& p = batch.positives[k];
    const auto& n = batch.negatives[k];
    if (p.empty() || n.empty()) continue;
    anchors.push_back(batch.anchors[k]);
    pos.push_back(p[std::uniform_int_distribution<std::size_t>(0, p.size() - 1)(rng)]);
    neg.push_back(n[std::uniform_int_distribution<std::size_t>(0, n.size() - 1)(rng)]);
  }
  if (anchors.empty()) throw ConfigError("pairwise contrastive loss: empty batch");
  return hinge_mean(z, anchors, pos, neg, margin);
}

ad::Var loss_groupwise_contrastive(ad::Var z, const ContrastBatch& batch, double margin) {
  check_margin(margin);
  const Tensor& zv = z.value();
  std::vector<std::size_t> anchors, pos, neg;
  std::size_t skipped = 0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const auto& p = batch.positives[k];
    const auto& n = batch.negatives[k];
    if (p.empty() || n.empty()) {
      ++skipped;
      continue;
    }
    const std::size_t a = batch.anchors[k];
    // Hardest members only: the gradient of max/min is the gradient of the
    // selected term, so the choice is made on values outside the tape.
    std::size_t far = p[0], near = n[0];
    double far_d = -1.0, near_d = std::numeric_limits<double>::infinity();
    for (NodeId j : p) {
      const double d = squared_distance(zv, a, j);
      if (d > far_d) far_d = d, far = j;
    }
    for (NodeId j : n) {
      const double d = squared_distance(zv, a, j);
      if (d < near_d) near_d = d, near = j;
    }
    anchors.push_back(a);
    pos.push_back(far);
    neg.push_back(near);
  }
  if (skipped > 0) spdlog::warn("groupwise contrastive loss: skipped {} anchor(s) with an empty group", skipped);
  if (anchors.empty()) return zero(z.tape());
  return hinge_mean(z, anchors, pos, neg, margin);
}

ad::Var loss_hash(ad::Var u, const SimilarityPairs& pairs, std::size_t code_length) {
  if (u.value().rank() != 2 || u.value().cols() % code_length != 0) {
    throw ShapeError("hash loss: relaxed codes " + shape_string(u.shape()) + " do not split into " +
                     std::to_string(code_length) + " blocks");
  }
  return code_agreement_loss(u, pairs, code_length);
}

ad::Var loss_hash_sign(ad::Var logits, const SimilarityPairs& pairs, std::size_t code_length) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.cols() != 2 * code_length) {
    throw ShapeError("sign hash loss: logits " + shape_string(lv.shape()) + " are not " +
                     std::to_string(code_length) + " blocks of 2");
  }
  ad::Var margin = ad::matmul(logits, logits.tape().constant(block_difference(code_length, 2)));
  return code_agreement_loss(ad::sign_ste(margin), pairs, code_length);
}

SimilarityPairs build_similarity_pairs(std::span<const int> labels, std::uint64_t seed, std::size_t pairs_per_node) {
  std::mt19937_64 rng(seed);
  const std::size_t half = std::max<std::size_t>(1, pairs_per_node / 2);
  SimilarityPairs pairs;
  std::vector<std::size_t> same, diff;
  auto draw = [&](std::vector<std::size_t>& pool, std::size_t count, std::size_t i, double s) {
    for (std::size_t k = 0; k < count; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
      std::swap(pool[k], pool[pick(rng)]);
      pairs.push_back({i, pool[k], s});
    }
  };
  for (std::size_t i = 0; i < labels.size(); ++i) {
    same.clear();
    diff.clear();
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (j == i) continue;
      (labels[j] == labels[i] ? same : diff).push_back(j);
    }
    if (!same.empty() && !diff.empty()) {
      const std::size_t m = std::min({half, same.size(), diff.size()});
      draw(same, m, i, 1.0);
      draw(diff, m, i, -1.0);
    } else if (!same.empty()) {
      draw(same, std::min(half, same.size()), i, 1.0);
    } else if (!diff.empty()) {
      draw(diff, std::min(half, diff.size()), i, -1.0);
    }
  }
  return pairs;
}

ad::Var loss_source_ce(ad::Var probs, std::span<const int> labels) {
  const Tensor& p = probs.value();
  check_probs("source cross-entropy", p);
  if (labels.size() != p.dim(0)) throw ShapeError("source cross-entropy: label count does not match rows");
  if (labels.empty()) throw ConfigError("source cross-entropy: empty batch");
  Tensor onehot(p.shape());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= p.dim(1)) {
      throw DataError("source cross-entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                      std::to_string(p.dim(1)) + ")");
    }
    onehot.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  ad::Var picked = ad::sum(ad::mul(ad::log(ad::clamp_min(probs, kProbFloor)), probs.tape().constant(std::move(onehot))));
  return ad::scale(picked, -1.0 / static_cast<double>(labels.size()));
}

PseudoLabels assign_pseudo_labels(const Tensor& probs, double threshold) {
  check_probs("pseudo labels", probs);
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("pseudo labels: threshold must lie in (0, 1)");
  PseudoLabels out(probs.dim(0), kRejected);
  const std::size_t k = probs.dim(1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* row = &probs[i * k];
    const auto best = std::max_element(row, row + k);
    if (*best > threshold) out[i] = static_cast<int>(best - row);
  }
  return out;
}

ad::Var loss_target_ce(ad::Var probs, const PseudoLabels& pseudo) {
  const Tensor& p = probs.value();
  check_probs("target cross-entropy", p);
  if (pseudo.size() != p.dim(0)) throw ShapeError("target cross-entropy: pseudo label count does not match rows");
  Tensor onehot(p.shape());
  std::size_t accepted = 0;
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    if (pseudo[i] == kRejected) continue;
    onehot.at(i, static_cast<std::size_t>(pseudo[i])) = 1.0;
    ++accepted;
  }
  if (accepted == 0) return zero(probs.tape());
  ad::Var picked = ad::sum(ad::mul(ad::log(ad::clamp_min(probs, kProbFloor)), probs.tape().constant(std::move(onehot))));
  return ad::scale(picked, -1.0 / static_cast<double>(accepted));
}

ad::Var loss_kl(ad::Var student, ad::Var teacher) {
  if (student.shape() != teacher.shape()) {
    throw ShapeError("kl loss: student " + shape_string(student.shape()) + " vs teacher " + shape_string(teacher.shape()));
  }
  check_probs("kl loss", student.value());
  ad::Var log_ratio = ad::sub(ad::log(ad::clamp_min(student, kProbFloor)), ad::log(ad::clamp_min(teacher, kProbFloor)));
  return ad::scale(ad::sum(ad::mul(student, log_ratio)), 1.0 / static_cast<double>(student.value().dim(0)));
}

std::pair<Tensor, std::vector<bool>> batch_class_means(const Tensor& z, std::span<const int> labels,
                                                       std::size_t num_classes) {
  const std::size_t dim = z.cols();
  Tensor means(Shape{num_classes, dim});
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    const auto c = static_cast<std::size_t>(labels[i]);
    ++counts[c];
    for (std::size_t j = 0; j < dim; ++j) means.at(c, j) += z.at(i, j);
  }
  std::vector<bool> present(num_classes, false);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) continue;
    present[c] = true;
    for (std::size_t j = 0; j < dim; ++j) means.at(c, j) /= static_cast<double>(counts[c]);
  }
  return {std::move(means), std::move(present)};
}

ad::Var loss_center_alignment(ad::Var z_source, std::span<const int> source_labels, ad::Var z_target,
                              std::span<const int> pseudo, std::size_t num_classes) {
  if (source_labels.size() != z_source.value().dim(0) || pseudo.size() != z_target.value().dim(0)) {
    throw ShapeError("center alignment: label counts do not match embedding rows");
  }
  std::vector<std::size_t> ns(num_classes, 0), nt(num_classes, 0);
  for (int y : source_labels) {
    if (y >= 0) ++ns[static_cast<std::size_t>(y)];
  }
  for (int y : pseudo) {
    if (y >= 0) ++nt[static_cast<std::size_t>(y)];
  }
  std::vector<std::size_t> shared;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (ns[c] > 0 && nt[c] > 0) shared.push_back(c);
  }
  if (shared.empty()) return zero(z_source.tape());

  // Averaging matrices [|shared|, N] turn the class means into matmuls.
  auto averager = [&](std::span<const int> labels, const std::vector<std::size_t>& counts) {
    Tensor a(Shape{shared.size(), labels.size()});
    for (std::size_t r = 0; r < shared.size(); ++r) {
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == static_cast<int>(shared[r])) a.at(r, i) = 1.0 / static_cast<double>(counts[shared[r]]);
      }
    }
    return a;
  };
  ad::Tape& tape = z_source.tape();
  ad::Var ms = ad::matmul(tape.constant(averager(source_labels, ns)), z_source);
  ad::Var mt = ad::matmul(tape.constant(averager(pseudo, nt)), z_target);
  return ad::sum(ad::square(ad::sub(ms, mt)));
}

void update_centers(CenterTable& table, const Tensor& means, const std::vector<bool>& present, double eps) {
  if (!(eps >= 0.0 && eps <= 1.0)) throw ConfigError("center update: step must lie in [0, 1]");
  if (means.shape() != table.centers.shape() || present.size() != table.seen.size()) {
    throw ShapeError("center update: batch means " + shape_string(means.shape()) + " vs table " +
                     shape_string(table.centers.shape()));
  }
  const std::size_t dim = means.cols();
  for (std::size_t c = 0; c < present.size(); ++c) {
    if (!present[c]) continue;
    for (std::size_t j = 0; j < dim; ++j) {
      double& dst = table.centers.at(c, j);
      dst = table.seen[c] ? eps * dst + (1.0 - eps) * means.at(c, j) : means.at(c, j);
    }
    table.seen[c] = true;
  }
}

}  // namespace udah::loss
