#include "pfedclr/privacy.hpp"

#include <stdexcept>

#include "pfedclr/rng.hpp"

namespace pfedclr {

void clip_inplace(Matrix& delta, double clip_threshold) {
  if (!(clip_threshold > 0)) {
    throw std::invalid_argument("clip_update: threshold must be positive");
  }
  double norm = frobenius_norm(delta);
  if (norm <= clip_threshold) return;
  double scale = clip_threshold / norm;
  for (std::size_t i = 0; i < delta.size(); ++i) delta.data()[i] *= scale;
}

Matrix clip_update(const Matrix& delta, double clip_threshold) {
  Matrix out = delta;
  clip_inplace(out, clip_threshold);
  return out;
}

Matrix add_laplace(const Matrix& q, double scale, std::uint64_t seed) {
  if (scale < 0) throw std::invalid_argument("add_laplace: scale must be >= 0");
  Matrix out = q;
  if (scale == 0.0) return out;
  Rng rng(seed);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += rng.laplace(scale);
  return out;
}

double sensitivity_bound(double aggregation_weight, double lr, double clip_threshold) {
  if (aggregation_weight <= 0 || lr <= 0 || clip_threshold <= 0) {
    throw std::invalid_argument("sensitivity_bound: inputs must be positive");
  }
  return 2.0 * aggregation_weight * lr * clip_threshold;
}

double privacy_budget(double sensitivity, double noise_scale) {
  if (noise_scale <= 0) throw std::invalid_argument("privacy_budget: noise scale must be > 0");
  return sensitivity / noise_scale;
}

Matrix apply_ldp(const Matrix& trained, const Matrix& downloaded,
                 const LdpConfig& config, std::uint64_t seed) {
  if (!config.enabled) return trained;
  require_same_shape(trained, downloaded, "apply_ldp");
  if (!std::isfinite(config.clip_threshold)) {
    return add_laplace(trained, config.noise_scale, seed);
  }
  Matrix delta(trained.rows(), trained.cols());
  for (std::size_t i = 0; i < delta.size(); ++i) {
    delta.data()[i] = trained.data()[i] - downloaded.data()[i];
  }
  double norm = frobenius_norm(delta);
  if (norm <= config.clip_threshold) {
    return add_laplace(trained, config.noise_scale, seed);
  }
  clip_inplace(delta, config.clip_threshold);
  for (std::size_t i = 0; i < delta.size(); ++i) delta.data()[i] += downloaded.data()[i];
  return add_laplace(delta, config.noise_scale, seed);
}

}  // namespace pfedclr
