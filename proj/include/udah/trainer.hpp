#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "udah/autodiff.hpp"
#include "udah/graph.hpp"
#include "udah/losses.hpp"
#include "udah/model.hpp"
#include "udah/sampling.hpp"

namespace udah {

struct Ablation {
  bool pairwise_structure = false;  // no_L1_group: pairwise hinge instead of groupwise
  bool sign_hash = false;           // no_L2_gumbel: sign codes with a straight-through gradient
  bool no_classification = false;   // no_L3
  bool no_alignment = false;        // no_L4
  bool no_distillation = false;     // no_Lkl
  bool no_adaptation = false;       // NoDAH: source structure, hashing and source CE only

  friend bool operator==(const Ablation&, const Ablation&) = default;
};

// Parses a comma-separated list of switch names (no_L1_group, no_L2_gumbel,
// no_L3, no_L4, no_Lkl, NoDAH); "none" or "" gives the full model.
Ablation parse_ablation(const std::string& list);
std::string ablation_string(const Ablation& a);

struct TrainConfig {
  double lr = 0.005;
  double alpha = 1.0;   // structure
  double beta = 0.01;   // hashing
  double sigma = 1.0;   // cross-domain classification
  double delta = 0.1;   // center alignment
  double margin = 5.0;  // contrastive lambda
  double tau = 1.0;
  double threshold = 0.85;
  double center_step = 0.3;
  double momentum = 0.0;
  double dropout = 0.1;
  std::size_t batch_size = 400;
  std::size_t epochs = 50;
  std::size_t code_length = 128;
  std::size_t pairs_per_node = 10;
  std::vector<std::size_t> encoder_widths{1024, 512, 256};
  std::vector<std::size_t> discriminator_widths{256, 256};
  std::uint64_t seed = 42;
  // Remap hashing targets s = -1 to 0 (the relaxed codes cannot reach -1).
  bool binary_similarity = false;
  // Apply the structure loss to the target graph as well.
  bool target_structure = true;
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
  Ablation ablation;

  void validate(std::size_t num_classes) const;
  // Overrides fields from key=value pairs; unknown keys throw ConfigError.
  void apply(const std::map<std::string, std::string>& values);
  // Resolved configuration as key=value lines, the same format apply() reads.
  std::string to_string() const;
  ModelConfig model_config(std::size_t input_dim, std::size_t num_classes) const;
};

// Reads flat key=value lines; '#' starts a comment.
std::map<std::string, std::string> read_key_values(const std::filesystem::path& path);
TrainConfig load_config(const std::filesystem::path& path);

/// Component losses on one batch. Terms a variant does not use stay invalid.
struct LossTerms {
  ad::Var l1_source, l1_target, l2, l3_source, l3_target, kl, l4;
};

struct LossBreakdown {
  double l1_source = 0, l1_target = 0, l2 = 0, l3_source = 0, l3_target = 0, kl = 0, l4 = 0, total = 0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double f) const;
};

// Which terms a configuration keeps.
struct ActiveTerms {
  bool l1_source, l1_target, l2, l3_source, l3_target, kl, l4;
};
ActiveTerms active_terms(const TrainConfig& cfg);

/// alpha (L1s + L1t) + beta L2 + sigma (L3s + L3t) + delta L4 + Lkl over the
/// active terms. Throws NumericalError naming the first non-finite component.
ad::Var total_loss(const TrainConfig& cfg, const LossTerms& terms);
double weighted_total(const TrainConfig& cfg, const LossBreakdown& b);

/// Everything random about one optimization step, drawn before the forward
/// pass so the objective is a deterministic function of the parameters.
struct StepBatch {
  std::vector<NodeId> source_nodes;   // encoded rows; the batch comes first
  std::size_t source_batch = 0;
  std::vector<int> source_labels;     // labels of the batch rows
  ContrastBatch source_contrast;      // ids are rows of source_nodes
  std::vector<NodeId> target_nodes;
  std::size_t target_batch = 0;
  ContrastBatch target_contrast;
  loss::SimilarityPairs pairs;        // rows of the source batch
  Tensor gumbel;                      // [source_batch, l * 2]
  std::uint64_t dropout_seed = 0;
  std::uint64_t pairwise_seed = 0;
};

StepBatch prepare_step(const DomainPair& pair, std::span<const int> source_labels, std::span<const NodeId> source_batch,
                       std::span<const NodeId> target_batch, const TrainConfig& cfg, std::uint64_t step_seed);

struct StepOutput {
  LossTerms terms;
  ad::Var total;
  loss::PseudoLabels pseudo;  // per target batch row
  Tensor source_embedding;    // batch rows only
  Tensor target_embedding;
};

StepOutput forward_objective(ad::Tape& tape, const ModelParams& params, const DomainPair& pair, const StepBatch& batch,
                             const TrainConfig& cfg);

// p <- p - lr * g for every (name, tensor) with matching gradient.
void sgd_step(std::span<const std::pair<std::string, Tensor*>> params, std::span<const Tensor> grads, double lr);

/// SGD with optional heavy-ball momentum over all trainable tensors.
class SgdOptimizer {
 public:
  SgdOptimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  // Reads gradients from the tape; throws NumericalError on a non-finite one.
  void step(ModelParams& params, const ad::Tape& tape);

 private:
  double lr_;
  double momentum_;
  std::map<std::string, Tensor> velocity_;
};

struct EpochReport {
  std::size_t epoch = 0;
  LossBreakdown loss;  // averaged over the epoch's steps
  double pseudo_acceptance = 0.0;
  double center_drift = 0.0;
};

struct TrainReport {
  std::vector<EpochReport> epochs;

  static const char* csv_header();
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
  ModelParams params;
  TrainReport report;
};

/// Trains on the source labels and the target graph's structure and attributes.
/// Never reads target labels.
TrainResult train(const DomainPair& pair, const TrainConfig& cfg);

}  // namespace udah
