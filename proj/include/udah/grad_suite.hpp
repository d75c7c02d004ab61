#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "udah/grad_check.hpp"
#include "udah/graph.hpp"

namespace udah {

struct GradSuiteEntry {
  std::string term;
  ad::GradCheckReport report;
};

// A 10-node labeled pair with 6 attributes and 3 classes; the target copy has
// shifted attributes and a rewired edge.
DomainPair toy_pair(std::uint64_t seed);

/// Finite-difference check of every objective term, and of the composed
/// objective, against all model parameters of a small network on toy_pair.
/// Noise, dropout masks and pseudo labels are frozen per term.
std::vector<GradSuiteEntry> run_grad_suite(std::uint64_t seed, const ad::GradCheckOptions& options = {});

}  // namespace udah
