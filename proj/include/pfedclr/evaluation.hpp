#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pfedclr/client.hpp"
#include "pfedclr/data.hpp"

namespace pfedclr {

struct EvalResult {
  double hr = 0.0;
  double ndcg = 0.0;
  std::uint32_t k = 10;
  std::vector<std::uint32_t> ranks;  // per user, 1-based
};

/// 1-based rank of scores[test_index] with pessimistic ties: every other
/// candidate scoring >= the test item counts as ahead of it.
std::uint32_t rank_test_item(std::span<const double> scores, std::size_t test_index);

/// HR@k = mean 1[rank <= k]; NDCG@k = mean 1[rank <= k] / log2(rank + 1).
EvalResult metrics_at_k(std::span<const std::uint32_t> ranks, std::uint32_t k = 10);

struct EvalOptions {
  std::uint32_t k = 10;
  bool merged = true;        // score personalized item vectors
  bool full_catalog = false; // rank against every non-train item instead of
                             // the fixed negative sample
};

/// Scores each user's held-out item against its evaluation candidates with
/// that user's personalized state.
EvalResult evaluate_all(std::span<const ClientState> clients,
                        const ImplicitDataset& dataset, const NegativeSampler& sampler,
                        const EvalOptions& options = {});

/// Same, one user; returns the rank.
std::uint32_t evaluate_user(const ClientState& client, const ImplicitDataset& dataset,
                            const NegativeSampler& sampler, const EvalOptions& options);

/// user,rank,hit,ndcg rows.
void write_per_user_csv(const EvalResult& result, const std::filesystem::path& path);

}  // namespace pfedclr
