#include <doctest.h>

#include <cmath>

#include "pfedclr/diagnostics.hpp"
#include "pfedclr/model.hpp"
#include "pfedclr/server.hpp"
#include "support/synthetic.hpp"

using namespace pfedclr;

TEST_CASE("compute_delta") {
  Rng rng(2);
  Matrix q = gaussian_matrix(3, 4, 0.0, 1.0, rng);
  Matrix zero = compute_delta(q, q);
  for (std::size_t i = 0; i < zero.size(); ++i) CHECK(zero.data()[i] == 0.0);

  Matrix other(2, 4, 0.0);
  CHECK_THROWS_AS(compute_delta(q, other), std::invalid_argument);
}

TEST_CASE("aggregation identities for delta") {
  Rng rng(3);
  Matrix q1 = gaussian_matrix(2, 3, 0.0, 1.0, rng);
  Matrix q2 = gaussian_matrix(2, 3, 0.0, 1.0, rng);

  // A single client with weight 1 sees no difference after aggregation.
  std::vector<const Matrix*> solo{&q1};
  std::vector<double> w1{1.0};
  Matrix g = fedavg(solo, w1);
  Matrix d = compute_delta(g, q1);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(d.data()[i] == 0.0);

  // Two clients: client 1's delta is w2 * (Q2 - Q1).
  std::vector<const Matrix*> both{&q1, &q2};
  std::vector<double> w{0.25, 0.75};
  g = fedavg(both, w);
  d = compute_delta(g, q1);
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(d.data()[i] ==
          doctest::Approx(0.75 * (q2.data()[i] - q1.data()[i])).epsilon(1e-12));
  }
}

TEST_CASE("skew_terms structure") {
  Rng rng(4);
  const std::size_t m = 5, d = 3;
  Matrix q = gaussian_matrix(m, d, 0.0, 1.0, rng);
  std::vector<int> labels{1, 0, 1, 0, 1};

  SUBCASE("zero delta gives zero terms") {
    Matrix delta(m, d, 0.0);
    Vec p = gaussian_vector(d, 0.0, 1.0, rng);
    SkewTerms t = skew_terms(p, q, delta, labels);
    for (double x : t.scaling) CHECK(x == 0.0);
    for (double x : t.shift) CHECK(x == 0.0);
  }
  SUBCASE("zero user embedding kills the scaling term only") {
    Matrix delta = gaussian_matrix(m, d, 0.0, 0.1, rng);
    Vec p(d, 0.0);
    SkewTerms t = skew_terms(p, q, delta, labels);
    for (double x : t.scaling) CHECK(x == 0.0);
    Vec expect(d, 0.0);
    for (std::size_t i = 0; i < m; ++i) axpy(0.5 - labels[i], delta.row(i), expect);
    for (std::size_t j = 0; j < d; ++j) {
      CHECK(t.shift[j] == doctest::Approx(expect[j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("skew decomposition is first-order accurate in delta") {
  // The exact user-gradient change minus (scaling + shift) must shrink ~4x
  // when delta is halved.
  Rng rng(5);
  int checked = 0;
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t m = 4, d = 3;
    Matrix q = gaussian_matrix(m, d, 0.0, 1.0, rng);
    Vec p = gaussian_vector(d, 0.0, 1.0, rng);
    std::vector<int> labels(m);
    for (auto& l : labels) l = rng.below(2) ? 1 : 0;
    Matrix delta = gaussian_matrix(m, d, 0.0, 0.02, rng);

    auto residual_norm = [&](double scale) {
      Matrix scaled = delta;
      for (std::size_t i = 0; i < scaled.size(); ++i) scaled.data()[i] *= scale;
      Matrix q_shift = q;
      for (std::size_t i = 0; i < q_shift.size(); ++i) {
        q_shift.data()[i] += scaled.data()[i];
      }
      Vec g1 = grad_user(p, q_shift, labels);
      Vec g0 = grad_user(p, q, labels);
      SkewTerms t = skew_terms(p, q, scaled, labels);
      Vec total = t.total();
      Vec resid(d);
      for (std::size_t j = 0; j < d; ++j) resid[j] = g1[j] - g0[j] - total[j];
      return norm2(resid);
    };

    double r1 = residual_norm(1.0);
    double r2 = residual_norm(0.5);
    if (r1 < 1e-12) continue;  // degenerate draw, nothing to measure
    ++checked;
    CHECK(r1 / r2 > 3.0);
    CHECK(r1 / r2 < 5.0);
  }
  CHECK(checked >= 6);
}

TEST_CASE("decomposition additivity") {
  Rng rng(6);
  Matrix q = gaussian_matrix(4, 3, 0.0, 1.0, rng);
  Matrix delta = gaussian_matrix(4, 3, 0.0, 0.1, rng);
  Vec p = gaussian_vector(3, 0.0, 1.0, rng);
  std::vector<int> labels{1, 0, 0, 1};
  SkewTerms t = skew_terms(p, q, delta, labels);
  Vec total = t.total();
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(total[j] == t.scaling[j] + t.shift[j]);
  }
}

TEST_CASE("calibration_terms structure") {
  Rng rng(7);
  const std::size_t m = 4, d = 3;
  Matrix q = gaussian_matrix(m, d, 0.0, 1.0, rng);
  std::vector<int> labels{1, 0, 1, 0};
  const double lr = 0.01;

  SUBCASE("zero user embedding gives zero terms") {
    Vec p(d, 0.0);
    SkewTerms t = calibration_terms(p, q, labels, lr);
    for (double x : t.scaling) CHECK(x == 0.0);
    for (double x : t.shift) CHECK(x == 0.0);
  }
  SUBCASE("shift is antiparallel to p") {
    Vec p = gaussian_vector(d, 0.0, 1.0, rng);
    SkewTerms t = calibration_terms(p, q, labels, lr);
    // shift = -lr * sum L1^2 * p: proportional to p with a nonpositive factor
    double coeff = 0.0;
    bool proportional = true;
    for (std::size_t j = 0; j < d; ++j) {
      if (p[j] != 0.0) {
        double c = t.shift[j] / p[j];
        if (coeff == 0.0) coeff = c;
        proportional = proportional && std::abs(c - coeff) < 1e-12;
      }
    }
    CHECK(proportional);
    CHECK(coeff <= 0.0);
  }
}

TEST_CASE("residual and derivative constants stay in their ranges") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Vec p = gaussian_vector(4, 0.0, 2.0, rng);
    Vec q = gaussian_vector(4, 0.0, 2.0, rng);
    int label = rng.below(2) ? 1 : 0;
    double s = sigmoid(dot(p, q));
    double l1 = s - label;
    double l2 = s * (1.0 - s);
    CHECK(l1 > -1.0);
    CHECK(l1 < 1.0);
    CHECK(l2 > 0.0);
    CHECK(l2 <= 0.25);
  }
}

TEST_CASE("accumulated_skew_bound") {
  SUBCASE("zero initial delta bounds to zero") {
    Matrix delta0(3, 2, 0.0);
    Matrix q0(3, 2, 1.0);
    Vec p0{1.0, 1.0};
    CHECK(accumulated_skew_bound(delta0, p0, q0, 0.01, 0.5, 0.5, 0.25) == 0.0);
  }
  SUBCASE("monotone in gamma") {
    Rng rng(9);
    Matrix delta0 = gaussian_matrix(3, 2, 0.0, 1.0, rng);
    Matrix q0 = gaussian_matrix(3, 2, 0.0, 1.0, rng);
    Vec p0 = gaussian_vector(2, 0.0, 1.0, rng);
    double prev = 0.0;
    for (double gamma : {0.1, 0.5, 0.9, 0.99}) {
      double b = accumulated_skew_bound(delta0, p0, q0, 0.01, gamma, 0.5, 0.25);
      CHECK(b > prev);
      prev = b;
    }
  }
  SUBCASE("single-item closed form") {
    // eta (C1 |delta| + C2 |p.delta| |q|) / (1 - gamma)
    Matrix delta0(1, 1);
    delta0(0, 0) = 1.0;
    Matrix q0(1, 1);
    q0(0, 0) = 1.0;
    Vec p0{0.2};  // |p.delta| = 0.2
    double b = accumulated_skew_bound(delta0, p0, q0, 0.01, 0.5, 0.5, 0.25);
    CHECK(b == doctest::Approx(0.011).epsilon(1e-12));
  }
  SUBCASE("gamma outside (0,1) throws") {
    Matrix delta0(1, 1, 1.0), q0(1, 1, 1.0);
    Vec p0{1.0};
    CHECK_THROWS_AS(accumulated_skew_bound(delta0, p0, q0, 0.01, 0.0, 0.5, 0.25),
                    std::invalid_argument);
    CHECK_THROWS_AS(accumulated_skew_bound(delta0, p0, q0, 0.01, 1.0, 0.5, 0.25),
                    std::invalid_argument);
  }
}

TEST_CASE("estimate_gamma") {
  std::vector<double> shrinking{1.0, 0.5, 0.25};
  GammaEstimate est = estimate_gamma(shrinking);
  CHECK(est.gamma == doctest::Approx(0.5).epsilon(1e-12));
  CHECK_FALSE(est.out_of_assumption);
  CHECK_FALSE(est.degenerate);

  std::vector<double> growing{1.0, 0.5, 0.6};
  est = estimate_gamma(growing);
  CHECK(est.gamma == doctest::Approx(1.2).epsilon(1e-12));
  CHECK(est.out_of_assumption);

  std::vector<double> zeros{0.0, 0.0, 0.0};
  est = estimate_gamma(zeros);
  CHECK(est.gamma == 0.0);
  CHECK(est.degenerate);

  CHECK_THROWS_AS(estimate_gamma(std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("trajectory log records copies and round-trips through CSV") {
  auto dir = synthetic::temp_dir("traj");
  TrajectoryLog log;
  Vec p{0.1, -0.2, 1.0 / 3.0};
  log.record(7, 1, p);
  p[0] = 99.0;  // the log must hold a copy
  log.record(7, 2, p);
  log.record(9, 1, p);

  CHECK(log.rounds_for(7).size() == 2);
  CHECK(log.rounds_for(7)[0].second[0] == 0.1);

  CHECK_THROWS_AS(log.record(7, 2, p), std::logic_error);

  log.write_csv(dir / "t.csv");
  TrajectoryLog back = TrajectoryLog::read_csv(dir / "t.csv");
  CHECK(back.n_clients() == 2);
  REQUIRE(back.rounds_for(7).size() == 2);
  CHECK(back.rounds_for(7)[0].second == log.rounds_for(7)[0].second);
  CHECK(back.rounds_for(7)[1].second == log.rounds_for(7)[1].second);
  CHECK(back.rounds_for(9)[0].second == log.rounds_for(9)[0].second);
}

TEST_CASE("bound holds on synthetic geometric delta sequences") {
  Rng rng(10);
  for (double gamma : {0.3, 0.5, 0.8}) {
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t m = 3, d = 4;
      Matrix q = gaussian_matrix(m, d, 0.0, 1.0, rng);
      Vec p = gaussian_vector(d, 0.0, 1.0, rng);
      std::vector<int> labels(m, 0);  // residuals stay positive
      Matrix delta0 = gaussian_matrix(m, d, 0.0, 0.5, rng);

      const double lr = 0.01;
      const int rounds = 40;
      Vec cumulative(d, 0.0);
      double c1 = 0.0, c2 = 0.0;
      Matrix delta = delta0;
      for (int t = 0; t < rounds; ++t) {
        SkewTerms terms = skew_terms(p, q, delta, labels);
        Vec total = terms.total();
        axpy(-lr, total, cumulative);
        for (std::size_t i = 0; i < m; ++i) {
          double s = sigmoid(dot(p, q.row(i)));
          c1 = std::max(c1, s - labels[i]);
          c2 = std::max(c2, s * (1.0 - s));
        }
        for (std::size_t i = 0; i < delta.size(); ++i) delta.data()[i] *= gamma;
      }
      double bound = accumulated_skew_bound(delta0, p, q, lr, gamma, c1, c2);
      CHECK(norm2(cumulative) <= bound);
    }
  }
}
