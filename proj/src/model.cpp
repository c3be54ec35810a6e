#include "pfedclr/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace pfedclr {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double predict(std::span<const double> p, std::span<const double> q) {
  return sigmoid(dot(p, q));
}

double bce_loss(std::span<const std::pair<double, int>> pairs) {
  double loss = 0.0;
  for (const auto& [pred, label] : pairs) {
    double r = std::clamp(pred, kClampEps, 1.0 - kClampEps);
    loss -= label == 1 ? std::log(r) : std::log(1.0 - r);
  }
  return loss;
}

Vec grad_user(std::span<const double> p, const Matrix& q_eff,
              std::span<const int> labels) {
  if (q_eff.rows() != labels.size()) {
    throw std::invalid_argument("grad_user: one label per item row required");
  }
  Vec g(p.size(), 0.0);
  for (std::size_t i = 0; i < q_eff.rows(); ++i) {
    double residual = predict(p, q_eff.row(i)) - labels[i];
    axpy(residual, q_eff.row(i), g);
  }
  return g;
}

Vec grad_item(std::span<const double> p, std::span<const double> q_eff, int label) {
  double residual = predict(p, q_eff) - label;
  Vec g(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) g[j] = residual * p[j];
  return g;
}

LowRankGrad grad_lowrank(std::span<const double> p, const Matrix& q_frozen,
                         const Matrix& a, const Matrix& b,
                         std::span<const std::pair<std::uint32_t, int>> batch) {
  const std::size_t d = q_frozen.cols();
  const std::size_t r = b.rows();
  if (a.cols() != r || b.cols() != d || a.rows() != q_frozen.rows()) {
    throw std::invalid_argument("grad_lowrank: factor shapes do not conform");
  }

  // Row index -> slot in the output, keyed in sorted order.
  std::map<std::uint32_t, std::size_t> slot;
  for (const auto& [row, label] : batch) slot.emplace(row, 0);
  LowRankGrad g;
  g.rows.reserve(slot.size());
  for (auto& [row, idx] : slot) {
    idx = g.rows.size();
    g.rows.push_back(row);
  }
  g.a_rows = Matrix(g.rows.size(), r);
  g.b = Matrix(r, d);

  Vec q_eff(d), dw(d);
  for (const auto& [row, label] : batch) {
    // q_eff = q_row + A_row * B
    auto q_row = q_frozen.row(row);
    auto a_row = a.row(row);
    for (std::size_t j = 0; j < d; ++j) q_eff[j] = q_row[j];
    for (std::size_t k = 0; k < r; ++k) axpy(a_row[k], b.row(k), q_eff);

    double residual = predict(p, q_eff) - label;
    for (std::size_t j = 0; j < d; ++j) dw[j] = residual * p[j];

    auto ga = g.a_rows.row(slot[row]);
    for (std::size_t k = 0; k < r; ++k) ga[k] += dot(dw, b.row(k));
    for (std::size_t k = 0; k < r; ++k) axpy(a_row[k], dw, g.b.row(k));
  }
  return g;
}

Matrix merge(const Matrix& q, const Matrix& a, const Matrix& b) {
  if (a.rows() != q.rows() || a.cols() != b.rows() || b.cols() != q.cols()) {
    throw std::invalid_argument("merge: factor shapes do not conform");
  }
  Matrix out = q;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    auto out_row = out.row(i);
    auto a_row = a.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) axpy(a_row[k], b.row(k), out_row);
  }
  return out;
}

AdamState::AdamState(std::size_t size, AdamConfig config)
    : m1_(size, 0.0), m2_(size, 0.0), config_(config) {}

void AdamState::restore(std::int64_t step, Vec m1, Vec m2) {
  if (m1.size() != m1_.size() || m2.size() != m2_.size()) {
    throw std::invalid_argument("AdamState::restore: moment size mismatch");
  }
  step_ = step;
  m1_ = std::move(m1);
  m2_ = std::move(m2);
}

void AdamState::update_span(std::size_t offset, std::span<const double> grad,
                            std::span<double> param, double lr) {
  if (offset + grad.size() > m1_.size() || grad.size() != param.size()) {
    throw std::invalid_argument("AdamState: span outside tracked parameter");
  }
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t j = 0; j < grad.size(); ++j) {
    double& m = m1_[offset + j];
    double& v = m2_[offset + j];
    m = config_.beta1 * m + (1.0 - config_.beta1) * grad[j];
    v = config_.beta2 * v + (1.0 - config_.beta2) * grad[j] * grad[j];
    param[j] -= lr * (m / c1) / (std::sqrt(v / c2) + config_.epsilon);
  }
}

void adam_step(Matrix& param, const Matrix& grad, AdamState& state, double lr) {
  require_same_shape(param, grad, "adam_step");
  if (state.size() != param.size()) {
    throw std::invalid_argument("adam_step: state sized for a different parameter");
  }
  state.begin_step();
  state.update_span(0, {grad.data(), grad.size()}, {param.data(), param.size()}, lr);
}

void adam_step(Vec& param, const Vec& grad, AdamState& state, double lr) {
  if (param.size() != grad.size() || state.size() != param.size()) {
    throw std::invalid_argument("adam_step: shape mismatch");
  }
  state.begin_step();
  state.update_span(0, grad, param, lr);
}

LowRankBuffer LowRankBuffer::init(std::size_t n_items, std::size_t dim,
                                  std::uint32_t rank, Rng& rng) {
  if (rank < 1 || rank > std::min(n_items, dim)) {
    throw std::invalid_argument("LowRankBuffer: rank must be in [1, min(m, d)]");
  }
  LowRankBuffer buf;
  buf.rank = rank;
  buf.a = Matrix(n_items, rank, 0.0);
  buf.b = gaussian_matrix(rank, dim, 0.0, std::sqrt(1.0 / rank), rng);
  return buf;
}

}  // namespace pfedclr
