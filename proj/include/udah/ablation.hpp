#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "udah/eval.hpp"
#include "udah/graph.hpp"
#include "udah/model.hpp"
#include "udah/trainer.hpp"

namespace udah {

struct Variant {
  std::string name;
  Ablation ablation;
};

// full, NoDAH, -L1, -L2, -L3, -L4, -Lkl in that order.
std::vector<Variant> standard_variants();

/// Accuracy-style scores of the source discriminator's argmax on a labeled
/// graph: a classifier fit on source labels only.
ClassificationScores source_classifier_scores(const ModelParams& params, const Graph& g);

struct AblationRow {
  std::string name;
  EvalReport target;  // eval tasks on the target graph's codes
};

struct AblationTable {
  std::vector<AblationRow> rows;

  std::string to_json() const;
  std::string to_table() const;
};

struct AblationOptions {
  TaskSet tasks;
  std::uint64_t holdout_seed = 42;
  std::uint64_t split_seed = 42;
  std::vector<Variant> variants = standard_variants();
};

/// Trains every variant with the same config and seed on the source graph and
/// the target's training holdout, then evaluates target codes.
AblationTable run_ablation_suite(const DomainPair& pair, const TrainConfig& cfg, const AblationOptions& opts = {});

}  // namespace udah
