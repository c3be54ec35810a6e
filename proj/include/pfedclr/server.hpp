#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pfedclr/matrix.hpp"

namespace pfedclr {

struct GlobalModel {
  Matrix q;  // m x d
  std::uint32_t round = 0;
};

struct RoundPlan {
  std::uint32_t round = 0;
  std::vector<std::uint32_t> clients;  // sorted ascending
  std::vector<double> weights;         // |D_u| normalized over the cohort
};

/// Uniform sample without replacement of ceil(fraction * n) clients,
/// deterministic under (seed, round). Weights are each client's interaction
/// count normalized over the sampled cohort.
RoundPlan sample_clients(std::span<const std::uint32_t> interaction_counts,
                         double fraction, std::uint32_t round, std::uint64_t seed);

/// Weighted elementwise average of the uploads. Weights must be nonnegative
/// and sum to 1 within 1e-12. Entries accumulate with compensated summation,
/// so reordering the uploads does not move the result materially.
Matrix fedavg(std::span<const Matrix* const> uploads, std::span<const double> weights);
Matrix fedavg(const std::vector<std::pair<const Matrix*, double>>& uploads);

}  // namespace pfedclr
