#pragma once

#include <cstdint>
#include <limits>

#include "pfedclr/matrix.hpp"

namespace pfedclr {

// Local differential privacy on uploads: clip the round's total update, then
// add elementwise Laplace noise. Only the wire copy is noised; the client
// keeps its clean local model.
struct LdpConfig {
  bool enabled = false;
  double noise_scale = 0.5;  // lambda
  double clip_threshold = std::numeric_limits<double>::infinity();  // C
  bool clip_per_batch = false;
};

/// Scales delta to Frobenius norm C when it exceeds C; otherwise returns it
/// unchanged.
Matrix clip_update(const Matrix& delta, double clip_threshold);

/// In-place variant used inside training loops (per-batch gradient clipping).
void clip_inplace(Matrix& delta, double clip_threshold);

/// Adds i.i.d. Laplace(0, scale) to every entry. scale = 0 is a no-op.
Matrix add_laplace(const Matrix& q, double scale, std::uint64_t seed);

/// Upper bound on the per-round global sensitivity: 2 * weight * lr * C.
double sensitivity_bound(double aggregation_weight, double lr, double clip_threshold);

/// Per-round privacy budget epsilon = sensitivity / noise scale.
double privacy_budget(double sensitivity, double noise_scale);

/// Wire transform for an upload: downloaded + clip(trained - downloaded),
/// then Laplace noise. With the config disabled the upload passes through.
Matrix apply_ldp(const Matrix& trained, const Matrix& downloaded,
                 const LdpConfig& config, std::uint64_t seed);

}  // namespace pfedclr
