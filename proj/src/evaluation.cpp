#include "pfedclr/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace pfedclr {

std::uint32_t rank_test_item(std::span<const double> scores, std::size_t test_index) {
  if (test_index >= scores.size()) {
    throw std::out_of_range("rank_test_item: test item not among candidates");
  }
  const double target = scores[test_index];
  std::uint32_t ahead = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i == test_index) continue;
    if (scores[i] >= target) ++ahead;
  }
  return ahead + 1;
}

EvalResult metrics_at_k(std::span<const std::uint32_t> ranks, std::uint32_t k) {
  if (ranks.empty()) throw std::invalid_argument("metrics_at_k: no ranks");
  EvalResult result;
  result.k = k;
  result.ranks.assign(ranks.begin(), ranks.end());
  double hits = 0.0, gain = 0.0;
  for (std::uint32_t rank : ranks) {
    if (rank < 1) throw std::invalid_argument("metrics_at_k: ranks are 1-based");
    if (rank <= k) {
      hits += 1.0;
      gain += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
    }
  }
  result.hr = hits / static_cast<double>(ranks.size());
  result.ndcg = gain / static_cast<double>(ranks.size());
  return result;
}

std::uint32_t evaluate_user(const ClientState& client, const ImplicitDataset& dataset,
                            const NegativeSampler& sampler, const EvalOptions& options) {
  const std::uint32_t user = client.user_id;
  std::vector<std::uint32_t> candidates;
  if (options.full_catalog) {
    const auto& positives = dataset.train_positives[user];
    std::vector<char> is_positive(dataset.n_items, 0);
    for (std::uint32_t item : positives) is_positive[item] = 1;
    candidates.reserve(dataset.n_items - positives.size());
    candidates.push_back(dataset.test_item[user]);
    for (std::uint32_t i = 0; i < dataset.n_items; ++i) {
      if (!is_positive[i] && i != dataset.test_item[user]) candidates.push_back(i);
    }
  } else {
    const auto& negatives = sampler.eval_negatives(user);
    candidates.reserve(negatives.size() + 1);
    candidates.push_back(dataset.test_item[user]);
    candidates.insert(candidates.end(), negatives.begin(), negatives.end());
  }
  auto scores = inference_scores(client, candidates, options.merged);
  return rank_test_item(scores, 0);
}

EvalResult evaluate_all(std::span<const ClientState> clients,
                        const ImplicitDataset& dataset, const NegativeSampler& sampler,
                        const EvalOptions& options) {
  if (clients.empty()) throw std::invalid_argument("evaluate_all: no clients");
  std::vector<std::uint32_t> ranks(clients.size());
  for (std::size_t i = 0; i < clients.size(); ++i) {
    ranks[i] = evaluate_user(clients[i], dataset, sampler, options);
  }
  return metrics_at_k(ranks, options.k);
}

void write_per_user_csv(const EvalResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "user,rank,hit,ndcg\n";
  for (std::size_t u = 0; u < result.ranks.size(); ++u) {
    const std::uint32_t rank = result.ranks[u];
    const bool hit = rank <= result.k;
    out << u << "," << rank << "," << (hit ? 1 : 0) << ","
        << (hit ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0) << "\n";
  }
}

}  // namespace pfedclr
