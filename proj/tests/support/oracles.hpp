#pragma once

// Independent reference implementations used to check the library. Everything
// here is deliberately naive (loops, sorts, central differences) and shares no
// code with the implementation paths it verifies.

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "pfedclr/matrix.hpp"

namespace oracles {

// Central finite difference of `loss` with respect to `param`, which must be
// referenced by the loss closure.
inline double fd_grad(const std::function<double()>& loss, double& param,
                      double h = 1e-5) {
  const double saved = param;
  param = saved + h;
  const double up = loss();
  param = saved - h;
  const double down = loss();
  param = saved;
  return (up - down) / (2.0 * h);
}

inline double relative_error(double got, double want) {
  const double scale = std::max({std::abs(got), std::abs(want), 1e-12});
  return std::abs(got - want) / scale;
}

// BCE of sigma(p . q) predictions against binary labels; plain loops.
inline double naive_bce(const pfedclr::Vec& p, const pfedclr::Matrix& q_eff,
                        const std::vector<int>& labels) {
  double loss = 0.0;
  for (std::size_t i = 0; i < q_eff.rows(); ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) z += p[j] * q_eff(i, j);
    const double pred = 1.0 / (1.0 + std::exp(-z));
    loss -= labels[i] == 1 ? std::log(pred) : std::log(1.0 - pred);
  }
  return loss;
}

// Triple-loop product accumulated into a copy of Q.
inline pfedclr::Matrix naive_merge(const pfedclr::Matrix& q, const pfedclr::Matrix& a,
                                   const pfedclr::Matrix& b) {
  pfedclr::Matrix out = q;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < q.cols(); ++j) {
      for (std::size_t k = 0; k < a.cols(); ++k) {
        out(i, j) += a(i, k) * b(k, j);
      }
    }
  }
  return out;
}

// Plain weighted sum, accumulated in upload order without compensation.
inline pfedclr::Matrix naive_weighted_sum(const std::vector<pfedclr::Matrix>& uploads,
                                          const std::vector<double>& weights) {
  pfedclr::Matrix out(uploads[0].rows(), uploads[0].cols(), 0.0);
  for (std::size_t k = 0; k < uploads.size(); ++k) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out.data()[i] += weights[k] * uploads[k].data()[i];
    }
  }
  return out;
}

// Rank by sorting (score desc, test item last among equals).
inline std::uint32_t sort_rank(const std::vector<double>& scores,
                               std::size_t test_index) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return (a == test_index) < (b == test_index);  // test item loses ties
  });
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    if (order[pos] == test_index) return static_cast<std::uint32_t>(pos + 1);
  }
  return 0;
}

}  // namespace oracles
