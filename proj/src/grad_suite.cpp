#include "udah/grad_suite.hpp"

#include <random>

#include "udah/losses.hpp"
#include "udah/model.hpp"
#include "udah/sampling.hpp"
#include "udah/trainer.hpp"

namespace udah {

namespace {

constexpr std::size_t kToyNodes = 10;
constexpr std::size_t kToyDim = 6;
constexpr std::size_t kToyClasses = 3;

Graph toy_graph(std::mt19937_64& rng, double shift, Edge chord) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Edge> edges;
  for (NodeId v = 0; v < kToyNodes; ++v) edges.emplace_back(v, static_cast<NodeId>((v + 1) % kToyNodes));
  edges.push_back(chord);
  edges.emplace_back(2, 7);
  std::vector<SparseVector> attrs(kToyNodes);
  std::vector<int> labels(kToyNodes);
  for (NodeId v = 0; v < kToyNodes; ++v) {
    labels[v] = static_cast<int>(v % kToyClasses);
    for (std::uint32_t d = 0; d < kToyDim; ++d) attrs[v].push_back({d, normal(rng) + shift * labels[v]});
  }
  return Graph(kToyNodes, kToyDim, std::move(edges), std::move(attrs), std::move(labels), kToyClasses);
}

std::vector<NodeId> all_nodes() {
  std::vector<NodeId> v(kToyNodes);
  for (NodeId i = 0; i < kToyNodes; ++i) v[i] = i;
  return v;
}

}  // namespace

DomainPair toy_pair(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Graph source = toy_graph(rng, 0.0, {0, 5});
  Graph target = toy_graph(rng, 0.5, {1, 6});
  return {std::move(source), std::move(target)};
}

std::vector<GradSuiteEntry> run_grad_suite(std::uint64_t seed, const ad::GradCheckOptions& options) {
  const DomainPair pair = toy_pair(seed);
  const std::vector<NodeId> nodes = all_nodes();
  const std::vector<int> labels(pair.source.labels().begin(), pair.source.labels().end());

  ModelConfig mc;
  mc.input_dim = kToyDim;
  mc.encoder_widths = {8, 5};
  mc.discriminator_widths = {6};
  mc.code_length = 4;
  mc.num_classes = kToyClasses;
  mc.dropout = 0.1;
  ModelParams params = init_model(mc, seed + 1);

  std::vector<Tensor*> tensors;
  for (auto& [name, t] : params.named_parameters()) tensors.push_back(t);

  std::mt19937_64 rng(seed + 2);
  const Tensor xs = pair.source.dense_attributes(nodes);
  const Tensor xt = pair.target.dense_attributes(nodes);
  std::vector<std::size_t> identity(kToyNodes);
  for (std::size_t i = 0; i < kToyNodes; ++i) identity[i] = i;
  const ContrastBatch contrast = loss::to_rows(sample_contrast_batch(pair.source, nodes, rng()), identity);
  const loss::SimilarityPairs pairs = loss::build_similarity_pairs(labels, rng(), 4);
  const Tensor gumbel = sample_gumbel(kToyNodes, mc.code_length * 2, rng);
  const loss::PseudoLabels pseudo{0, -1, 2, 0, 1, -1, 1, 2, -1, 0};
  const std::uint64_t dropout_seed = rng();
  const std::uint64_t pairwise_seed = rng();

  // Encodes both domains with a dropout mask fixed per call.
  struct Embedded {
    ad::Var zs, zt;
  };
  auto embed = [&](ad::Tape& tape) {
    std::mt19937_64 drop(dropout_seed);
    ad::Var zs = encode(tape, params.encoder, tape.constant(xs), true, drop);
    ad::Var zt = encode(tape, params.encoder, tape.constant(xt), true, drop);
    return Embedded{zs, zt};
  };
  auto probs = [&](ad::Tape& tape, const Discriminator& d, ad::Var z) {
    std::mt19937_64 drop(dropout_seed + 1);
    return discriminate(tape, d, z, true, drop);
  };

  std::vector<std::pair<std::string, std::function<ad::Var(ad::Tape&)>>> terms = {
      {"structure_pairwise",
       [&](ad::Tape& t) { return loss::loss_pairwise_contrastive(embed(t).zs, contrast, 5.0, pairwise_seed); }},
      {"structure_groupwise", [&](ad::Tape& t) { return loss::loss_groupwise_contrastive(embed(t).zs, contrast, 5.0); }},
      {"hash_relaxed",
       [&](ad::Tape& t) {
         return loss::loss_hash(relax_hash(t, params.head, embed(t).zs, gumbel, 1.0), pairs, mc.code_length);
       }},
      {"source_ce", [&](ad::Tape& t) { return loss::loss_source_ce(probs(t, params.source_disc, embed(t).zs), labels); }},
      {"target_ce", [&](ad::Tape& t) { return loss::loss_target_ce(probs(t, params.target_disc, embed(t).zt), pseudo); }},
      {"distillation_kl",
       [&](ad::Tape& t) {
         const ad::Var zt = embed(t).zt;
         return loss::loss_kl(probs(t, params.target_disc, zt), probs(t, params.source_disc, zt));
       }},
      {"center_alignment",
       [&](ad::Tape& t) {
         const Embedded e = embed(t);
         return loss::loss_center_alignment(e.zs, labels, e.zt, pseudo, kToyClasses);
       }},
  };

  // The composed objective, batches and pseudo labels drawn by the trainer.
  TrainConfig cfg;
  cfg.code_length = mc.code_length;
  cfg.batch_size = kToyNodes;
  cfg.pairs_per_node = 4;
  const StepBatch batch = prepare_step(pair, labels, nodes, nodes, cfg, seed + 3);
  terms.emplace_back("total", [&](ad::Tape& t) { return forward_objective(t, params, pair, batch, cfg).total; });

  std::vector<GradSuiteEntry> out;
  for (const auto& [name, f] : terms) out.push_back({name, ad::grad_check(f, tensors, options)});
  return out;
}

}  // namespace udah
