#include "ccr/infer_eval.hpp"
#include "ccr/proposals.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <random>

using namespace ccr;

TEST_CASE("gaussian_weights: mirror symmetry about c = 0.5 for odd T") {
  for (int T : {3, 7, 15, 31}) {
    for (double s : {0.05, 0.2, 0.9}) {
      const auto w = gaussian_weights(0.5, s, T).values;
      for (int t = 0; t < T; ++t) CHECK(w(t) == doctest::Approx(w(T - 1 - t)).epsilon(1e-15));
    }
  }
}

TEST_CASE("gaussian_weights: c = 0.5, T = 3 peaks at the center frame") {
  const auto w = gaussian_weights(0.5, 0.3, 3).values;
  CHECK(w(1) == 1.0);
  CHECK(w(0) < 1.0);
}

TEST_CASE("gaussian_weights: c = 0.25, s = 0.1, T = 5 equals direct evaluation") {
  const auto w = gaussian_weights(0.25, 0.1, 5).values;
  const auto expected = oracle::gaussian(0.25, 0.1, 5);
  for (int t = 0; t < 5; ++t) CHECK(std::abs(w(t) - expected[static_cast<std::size_t>(t)]) < 1e-15);
  CHECK(w(1) == 1.0);  // t/(T-1) = 0.25 sits exactly on the center
}

TEST_CASE("gaussian_weights: unimodal, peak 1, non-negative; errors on bad width") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> c(0.01, 0.99), s(0.01, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const auto w = gaussian_weights(c(rng), s(rng), 32).values;
    Eigen::Index peak;
    CHECK(w.maxCoeff(&peak) == 1.0);
    CHECK(w.minCoeff() >= 0.0);
    for (Eigen::Index t = 1; t <= peak; ++t) CHECK(w(t) >= w(t - 1));
    for (Eigen::Index t = peak + 1; t < w.size(); ++t) CHECK(w(t) <= w(t - 1));
  }
  CHECK_THROWS(gaussian_weights(0.5, 0.0, 8));
  CHECK_THROWS(gaussian_weights(0.5, -0.1, 8));
}

TEST_CASE("reference weights cover the full video with ones") {
  const auto w = weights_for(Proposal{0.5, 1.0, ProposalKind::reference}, 9).values;
  CHECK((w.array() == 1.0).all());
  CHECK(weights_to_segment(Proposal{0.5, 1.0, ProposalKind::reference}, 20.0).end == 20.0);
}

TEST_CASE("mine_negatives: default arithmetic c = 0.5, s = 0.1 gives 0.2 and 0.8") {
  const auto [left, right] = mine_negatives(Proposal{0.5, 0.1, ProposalKind::positive});
  CHECK(left.center == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(right.center == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(left.width == 0.1);
  CHECK(right.width == 0.1);
  CHECK(left.kind == ProposalKind::negative);
}

TEST_CASE("mine_negatives: c = 0.02, s = 0.3 clamps the left negative to 0.01") {
  const auto [left, right] = mine_negatives(Proposal{0.02, 0.3, ProposalKind::positive});
  CHECK(left.center == 0.01);
  CHECK(right.center == doctest::Approx(0.92).epsilon(1e-15));
}

TEST_CASE("mine_negatives: flanking negatives never coincide with the positive") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> c(0.02, 0.98), s(0.01, 0.5);
  for (int trial = 0; trial < 100; ++trial) {
    const Proposal p{c(rng), s(rng), ProposalKind::positive};
    const auto [n1, n2] = mine_negatives(p);
    const Span sp = weights_to_segment(p, 1.0);
    const double self = oracle::iou(sp.start, sp.end, sp.start, sp.end);
    for (const Proposal& n : {n1, n2}) {
      validate(n);
      const Span sn = weights_to_segment(n, 1.0);
      CHECK(oracle::iou(sp.start, sp.end, sn.start, sn.end) < self);
    }
  }
}

TEST_CASE("weights_to_segment: c = 0.5, s = 0.25, d = 10 gives [2.5, 7.5]") {
  const Span s = weights_to_segment(Proposal{0.5, 0.25, ProposalKind::positive}, 10.0);
  CHECK(s.start == 2.5);
  CHECK(s.end == 7.5);
}

TEST_CASE("weights_to_segment: clamped to [0, duration]; midpoint inverts to c") {
  const Span lo = weights_to_segment(Proposal{0.05, 0.3, ProposalKind::positive}, 8.0);
  CHECK(lo.start == 0.0);
  const Span hi = weights_to_segment(Proposal{0.95, 0.3, ProposalKind::positive}, 8.0);
  CHECK(hi.end == 8.0);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> c(0.3, 0.7), s(0.01, 0.29), d(1.0, 100.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Proposal p{c(rng), s(rng), ProposalKind::positive};
    const double dur = d(rng);
    const Span seg = weights_to_segment(p, dur);
    CHECK(std::abs((seg.start + seg.end) / (2.0 * dur) - p.center) < 1e-12);
    CHECK(std::abs((seg.end - seg.start) / (2.0 * dur) - p.width) < 1e-12);
  }
}

TEST_CASE("diversity_loss: single row with lambda = 1 is 0") {
  Eigen::MatrixXd omega(1, 4);
  omega << 0.2, 1.0, 0.7, 0.1;
  CHECK(diversity_loss(omega, 1.0) == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));
}

TEST_CASE("diversity_loss: two identical rows with lambda = 1 is 2") {
  Eigen::MatrixXd omega(2, 3);
  omega << 1, 2, 3, 1, 2, 3;
  CHECK(diversity_loss(omega, 1.0) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("diversity_loss: random 3xT matches a dense oracle; non-negative") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::MatrixXd omega(3, 20);
    std::vector<std::vector<double>> rows(3);
    for (int r = 0; r < 3; ++r) {
      for (int t = 0; t < 20; ++t) {
        omega(r, t) = u(rng);
        rows[static_cast<std::size_t>(r)].push_back(omega(r, t));
      }
    }
    const double lambda = u(rng);
    const double got = diversity_loss(omega, lambda);
    CHECK(got >= 0.0);
    CHECK(std::abs(got - oracle::diversity(rows, lambda)) < 1e-12);
  }
  CHECK_THROWS(diversity_loss(Eigen::MatrixXd(0, 5), 0.15));
}

TEST_CASE("diversity_loss: the graph form agrees with the matrix form") {
  const auto a = gaussian_weights(0.3, 0.1, 16).values;
  const auto b = gaussian_weights(0.6, 0.2, 16).values;
  Eigen::MatrixXd omega(2, 16);
  omega.row(0) = a.transpose();
  omega.row(1) = b.transpose();
  const std::vector<ag::Var> cols{ag::constant(a), ag::constant(b)};
  CHECK(std::abs(diversity_loss(cols, 0.15).scalar() - diversity_loss(omega, 0.15)) < 1e-14);
}

TEST_CASE("validate rejects out-of-range proposals") {
  CHECK_NOTHROW(validate(Proposal{0.5, 0.1}));
  CHECK_THROWS(validate(Proposal{0.0, 0.1}));
  CHECK_THROWS(validate(Proposal{1.0, 0.1}));
  CHECK_THROWS(validate(Proposal{0.5, 0.001}));
  CHECK_THROWS(validate(Proposal{0.5, 1.5}));
}
