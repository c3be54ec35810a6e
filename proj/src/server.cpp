#include "pfedclr/server.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "pfedclr/rng.hpp"

namespace pfedclr {

RoundPlan sample_clients(std::span<const std::uint32_t> interaction_counts,
                         double fraction, std::uint32_t round, std::uint64_t seed) {
  const std::size_t n = interaction_counts.size();
  if (n == 0) throw std::invalid_argument("sample_clients: no clients");
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw std::invalid_argument("sample_clients: fraction must be in (0, 1]");
  }
  const auto n_sampled =
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));

  std::vector<std::uint32_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0u);
  Rng rng(derive_seed(seed, Stream::kClientSample, round));
  for (std::size_t i = 0; i < n_sampled; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(n_sampled);
  std::sort(ids.begin(), ids.end());

  RoundPlan plan;
  plan.round = round;
  plan.clients = std::move(ids);
  double total = 0.0;
  for (std::uint32_t u : plan.clients) total += interaction_counts[u];
  if (total <= 0.0) {
    throw std::runtime_error("sample_clients: sampled cohort has no interactions");
  }
  plan.weights.reserve(n_sampled);
  for (std::uint32_t u : plan.clients) plan.weights.push_back(interaction_counts[u] / total);
  return plan;
}

Matrix fedavg(std::span<const Matrix* const> uploads, std::span<const double> weights) {
  if (uploads.empty()) throw std::invalid_argument("fedavg: no uploads");
  if (uploads.size() != weights.size()) {
    throw std::invalid_argument("fedavg: one weight per upload required");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw std::invalid_argument("fedavg: negative weight");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-12) {
    throw std::invalid_argument("fedavg: weights sum to " + std::to_string(sum) +
                                ", expected 1");
  }
  const Matrix& first = *uploads[0];
  for (const Matrix* m : uploads) require_same_shape(first, *m, "fedavg");

  // Accumulate against the first upload as a baseline: since the weights sum
  // to one, sum_k w_k x_k = x_0 + sum_k w_k (x_k - x_0). Identical uploads
  // therefore average to themselves exactly, and the deltas are small enough
  // that Neumaier compensation makes the sum insensitive to upload order.
  Matrix acc(first.rows(), first.cols(), 0.0);
  Vec comp(first.size(), 0.0);
  const double* base = first.data();
  for (std::size_t k = 0; k < uploads.size(); ++k) {
    const double w = weights[k];
    const double* src = uploads[k]->data();
    double* dst = acc.data();
    for (std::size_t i = 0; i < acc.size(); ++i) {
      double term = w * (src[i] - base[i]);
      double t = dst[i] + term;
      if (std::abs(dst[i]) >= std::abs(term)) {
        comp[i] += (dst[i] - t) + term;
      } else {
        comp[i] += (term - t) + dst[i];
      }
      dst[i] = t;
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) {
    acc.data()[i] = base[i] + (acc.data()[i] + comp[i]);
  }
  return acc;
}

Matrix fedavg(const std::vector<std::pair<const Matrix*, double>>& uploads) {
  std::vector<const Matrix*> ms;
  std::vector<double> ws;
  ms.reserve(uploads.size());
  ws.reserve(uploads.size());
  for (const auto& [m, w] : uploads) {
    ms.push_back(m);
    ws.push_back(w);
  }
  return fedavg(std::span<const Matrix* const>(ms), std::span<const double>(ws));
}

}  // namespace pfedclr
