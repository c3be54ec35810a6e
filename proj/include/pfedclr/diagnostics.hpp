#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "pfedclr/matrix.hpp"

namespace pfedclr {

/// Row differences between the aggregated and the locally trained item
/// matrices: delta_i = q_i(global) - q_i(local).
Matrix compute_delta(const Matrix& q_global, const Matrix& q_local);

// First-order decomposition of the user-gradient change induced by delta:
//   scaling = sum_i sigma'(p.q_i) (p.delta_i) q_i
//   shift   = sum_i (sigma(p.q_i) - r_i) delta_i
// Their sum approximates grad(q + delta) - grad(q) up to O(|delta|^2).
struct SkewTerms {
  Vec scaling;
  Vec shift;

  Vec total() const {
    Vec t = scaling;
    axpy(1.0, shift, t);
    return t;
  }
};

SkewTerms skew_terms(std::span<const double> p, const Matrix& q_local,
                     const Matrix& delta, std::span<const int> labels);

// Counterpart produced by one buffer step of size lr:
//   scaling = -sum_i lr L1 L2 (p.p) q_i
//   shift   = -sum_i lr L1^2 p      (always antiparallel to p)
SkewTerms calibration_terms(std::span<const double> p, const Matrix& q_local,
                            std::span<const int> labels, double lr);

/// Geometric-series bound on the accumulated skew when per-item deltas shrink
/// by at least gamma each round:
///   sum_i (lr*C1*|delta_i| + lr*C2*|p0.delta_i|*|q_i|) / (1 - gamma).
double accumulated_skew_bound(const Matrix& delta0, std::span<const double> p0,
                              const Matrix& q0, double lr, double gamma, double c1,
                              double c2);

struct GammaEstimate {
  double gamma = 0.0;
  bool out_of_assumption = false;  // some ratio exceeded 1 (or was unbounded)
  bool degenerate = false;         // history had no usable ratio
};

/// Max successive ratio |delta(t+1)| / |delta(t)| over one item's history.
/// Reported as observed; never clamped.
GammaEstimate estimate_gamma(std::span<const double> delta_norm_history);

// Per-round user-embedding snapshots for a tracked set of clients.
class TrajectoryLog {
 public:
  void record(std::uint32_t client, std::uint32_t round, std::span<const double> p);
  void write_csv(const std::filesystem::path& path) const;
  static TrajectoryLog read_csv(const std::filesystem::path& path);

  const std::vector<std::pair<std::uint32_t, Vec>>& rounds_for(std::uint32_t client) const;
  std::size_t n_clients() const { return entries_.size(); }

 private:
  std::map<std::uint32_t, std::vector<std::pair<std::uint32_t, Vec>>> entries_;
};

}  // namespace pfedclr
