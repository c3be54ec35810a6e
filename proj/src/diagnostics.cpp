#include "pfedclr/diagnostics.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "pfedclr/model.hpp"

namespace pfedclr {

namespace {

std::string shortest_repr(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

Matrix compute_delta(const Matrix& q_global, const Matrix& q_local) {
  require_same_shape(q_global, q_local, "compute_delta");
  Matrix delta(q_global.rows(), q_global.cols());
  for (std::size_t i = 0; i < delta.size(); ++i) {
    delta.data()[i] = q_global.data()[i] - q_local.data()[i];
  }
  return delta;
}

SkewTerms skew_terms(std::span<const double> p, const Matrix& q_local,
                     const Matrix& delta, std::span<const int> labels) {
  require_same_shape(q_local, delta, "skew_terms");
  if (labels.size() != q_local.rows()) {
    throw std::invalid_argument("skew_terms: one label per item required");
  }
  SkewTerms terms;
  terms.scaling.assign(p.size(), 0.0);
  terms.shift.assign(p.size(), 0.0);
  for (std::size_t i = 0; i < q_local.rows(); ++i) {
    const double s = sigmoid(dot(p, q_local.row(i)));
    const double l1 = s - labels[i];
    const double l2 = s * (1.0 - s);
    axpy(l2 * dot(p, delta.row(i)), q_local.row(i), terms.scaling);
    axpy(l1, delta.row(i), terms.shift);
  }
  return terms;
}

SkewTerms calibration_terms(std::span<const double> p, const Matrix& q_local,
                            std::span<const int> labels, double lr) {
  if (labels.size() != q_local.rows()) {
    throw std::invalid_argument("calibration_terms: one label per item required");
  }
  SkewTerms terms;
  terms.scaling.assign(p.size(), 0.0);
  terms.shift.assign(p.size(), 0.0);
  const double p_sq = dot(p, p);
  for (std::size_t i = 0; i < q_local.rows(); ++i) {
    const double s = sigmoid(dot(p, q_local.row(i)));
    const double l1 = s - labels[i];
    const double l2 = s * (1.0 - s);
    axpy(-lr * l1 * l2 * p_sq, q_local.row(i), terms.scaling);
    axpy(-lr * l1 * l1, p, terms.shift);
  }
  return terms;
}

double accumulated_skew_bound(const Matrix& delta0, std::span<const double> p0,
                              const Matrix& q0, double lr, double gamma, double c1,
                              double c2) {
  if (!(gamma > 0.0) || !(gamma < 1.0)) {
    throw std::invalid_argument("accumulated_skew_bound: gamma must lie in (0, 1)");
  }
  require_same_shape(delta0, q0, "accumulated_skew_bound");
  double bound = 0.0;
  for (std::size_t i = 0; i < delta0.rows(); ++i) {
    const double dn = norm2(delta0.row(i));
    const double pd = std::abs(dot(p0, delta0.row(i)));
    bound += lr * c1 * dn + lr * c2 * pd * norm2(q0.row(i));
  }
  return bound / (1.0 - gamma);
}

GammaEstimate estimate_gamma(std::span<const double> delta_norm_history) {
  if (delta_norm_history.size() < 2) {
    throw std::invalid_argument("estimate_gamma: need at least 2 rounds of history");
  }
  GammaEstimate est;
  bool any_ratio = false;
  for (std::size_t t = 0; t + 1 < delta_norm_history.size(); ++t) {
    const double prev = delta_norm_history[t];
    const double next = delta_norm_history[t + 1];
    if (prev == 0.0) {
      if (next != 0.0) {
        // Unbounded growth from zero; report and flag.
        est.gamma = std::numeric_limits<double>::infinity();
        est.out_of_assumption = true;
        any_ratio = true;
      }
      continue;
    }
    any_ratio = true;
    est.gamma = std::max(est.gamma, next / prev);
  }
  if (!any_ratio) {
    est.degenerate = true;
    est.gamma = 0.0;
    return est;
  }
  if (est.gamma > 1.0) est.out_of_assumption = true;
  return est;
}

void TrajectoryLog::record(std::uint32_t client, std::uint32_t round,
                           std::span<const double> p) {
  auto& rows = entries_[client];
  if (!rows.empty() && rows.back().first >= round) {
    throw std::logic_error("TrajectoryLog: rounds must be strictly increasing");
  }
  rows.emplace_back(round, Vec(p.begin(), p.end()));
}

const std::vector<std::pair<std::uint32_t, Vec>>& TrajectoryLog::rounds_for(
    std::uint32_t client) const {
  static const std::vector<std::pair<std::uint32_t, Vec>> empty;
  auto it = entries_.find(client);
  return it == entries_.end() ? empty : it->second;
}

void TrajectoryLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  std::size_t dim = 0;
  for (const auto& [client, rows] : entries_) {
    if (!rows.empty()) dim = rows.front().second.size();
  }
  out << "client,round";
  for (std::size_t j = 0; j < dim; ++j) out << ",p" << j;
  out << "\n";
  for (const auto& [client, rows] : entries_) {
    for (const auto& [round, p] : rows) {
      out << client << "," << round;
      for (double x : p) out << "," << shortest_repr(x);
      out << "\n";
    }
  }
}

TrajectoryLog TrajectoryLog::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  TrajectoryLog log;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    auto client = static_cast<std::uint32_t>(std::stoul(field));
    std::getline(ss, field, ',');
    auto round = static_cast<std::uint32_t>(std::stoul(field));
    Vec p;
    while (std::getline(ss, field, ',')) {
      double v = 0.0;
      auto res = std::from_chars(field.data(), field.data() + field.size(), v);
      if (res.ec != std::errc()) {
        throw std::runtime_error("TrajectoryLog: bad float in " + path.string());
      }
      p.push_back(v);
    }
    log.entries_[client].emplace_back(round, std::move(p));
  }
  return log;
}

}  // namespace pfedclr
