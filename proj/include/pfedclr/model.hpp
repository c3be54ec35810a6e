#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "pfedclr/matrix.hpp"
#include "pfedclr/rng.hpp"

namespace pfedclr {

// Predictions are clamped into [kClampEps, 1 - kClampEps] before entering the
// log terms of the loss; gradients use the unclamped sigmoid residual, which
// is finite for any logit.
inline constexpr double kClampEps = 1e-7;

double sigmoid(double x);

/// sigma(p . q), with a dimension check.
double predict(std::span<const double> p, std::span<const double> q);

/// Binary cross-entropy over (prediction, label) pairs, labels in {0, 1}.
double bce_loss(std::span<const std::pair<double, int>> pairs);

/// Gradient of the loss w.r.t. the user vector: sum_i (sigma(p.q_i) - r_i) q_i.
/// q_eff holds one effective item vector per row, labels one entry per row.
Vec grad_user(std::span<const double> p, const Matrix& q_eff,
              std::span<const int> labels);

/// Gradient of the loss w.r.t. one effective item vector: (sigma(p.q) - r) p.
Vec grad_item(std::span<const double> p, std::span<const double> q_eff, int label);

// Gradients of the loss w.r.t. the low-rank factors for one batch of items.
// Rows of `a_rows` line up with `rows` (sorted, unique); `b` is the dense
// accumulated gradient for the shared factor.
struct LowRankGrad {
  std::vector<std::uint32_t> rows;
  Matrix a_rows;  // |rows| x r
  Matrix b;       // r x d
};

/// Chain-rule gradients for the buffer factors A (m x r) and B (r x d) with
/// effective item vectors q_i + (A B)_i. Only rows appearing in the batch
/// contribute; duplicate items accumulate.
LowRankGrad grad_lowrank(std::span<const double> p, const Matrix& q_frozen,
                         const Matrix& a, const Matrix& b,
                         std::span<const std::pair<std::uint32_t, int>> batch);

/// Q + A*B, inputs untouched.
Matrix merge(const Matrix& q, const Matrix& a, const Matrix& b);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction over a flat parameter block. Row-sparse updates
// share one step counter: begin_step() once per optimizer step, then
// update_span() for each touched slice.
class AdamState {
 public:
  AdamState() = default;
  AdamState(std::size_t size, AdamConfig config = {});

  void begin_step() { ++step_; }
  void update_span(std::size_t offset, std::span<const double> grad,
                   std::span<double> param, double lr);

  std::int64_t step_count() const { return step_; }
  std::size_t size() const { return m1_.size(); }
  std::span<const double> first_moment() const { return m1_; }
  std::span<const double> second_moment() const { return m2_; }
  AdamConfig config() const { return config_; }

  /// Reinstates a serialized state; moment sizes must match.
  void restore(std::int64_t step, Vec m1, Vec m2);

 private:
  Vec m1_;
  Vec m2_;
  std::int64_t step_ = 0;
  AdamConfig config_;
};

/// One dense Adam step over a whole matrix. Shape mismatch throws.
void adam_step(Matrix& param, const Matrix& grad, AdamState& state, double lr);
void adam_step(Vec& param, const Vec& grad, AdamState& state, double lr);

// Zero-initialized A (m x r) plus Gaussian B (r x d). B entries are drawn
// N(0, 1/r) so the first buffer updates have rank-invariant scale.
struct LowRankBuffer {
  Matrix a;
  Matrix b;
  std::uint32_t rank = 0;

  static LowRankBuffer init(std::size_t n_items, std::size_t dim, std::uint32_t rank,
                            Rng& rng);
  bool empty() const { return a.empty(); }
};

}  // namespace pfedclr
