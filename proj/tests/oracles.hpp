#pragma once

// Independent reference implementations used to check the library. Each is
// written from the defining formula with scalar loops and long double
// accumulation, sharing no code with the code under test.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

namespace oracle {

using ld = long double;

// Softmax probability of entry k of `row`, via log-sum-exp in long double.
inline ld softmax_at(const Eigen::RowVectorXd& row, Eigen::Index k) {
  ld m = row(0);
  for (Eigen::Index j = 1; j < row.size(); ++j) m = std::max<ld>(m, row(j));
  ld z = 0;
  for (Eigen::Index j = 0; j < row.size(); ++j) z += std::exp(static_cast<ld>(row(j)) - m);
  return std::exp(static_cast<ld>(row(k)) - m) / z;
}

// Mean over rows of -log softmax(row)[target].
inline double cross_entropy(const Eigen::MatrixXd& logits, const std::vector<int>& targets) {
  ld total = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    total += -std::log(softmax_at(logits.row(r), targets[static_cast<std::size_t>(r)]));
  }
  return static_cast<double>(total / logits.rows());
}

// Mean over rows of sum_k p_k log(p_k / q_k) with p = softmax(P), q = softmax(Q).
inline double kl(const Eigen::MatrixXd& P, const Eigen::MatrixXd& Q) {
  ld total = 0;
  for (Eigen::Index r = 0; r < P.rows(); ++r) {
    for (Eigen::Index k = 0; k < P.cols(); ++k) {
      const ld p = softmax_at(P.row(r), k);
      const ld q = softmax_at(Q.row(r), k);
      total += p * std::log(p / q);
    }
  }
  return static_cast<double>(total / P.rows());
}

inline double sigmoid(double x) { return static_cast<double>(1.0L / (1.0L + std::exp(-static_cast<ld>(x)))); }

// omega_t = exp(-(t/(T-1) - c)^2 / (2 s^2)) divided by its maximum.
inline std::vector<double> gaussian(double c, double s, int T) {
  std::vector<ld> w(static_cast<std::size_t>(T));
  ld peak = 0;
  for (int t = 0; t < T; ++t) {
    const ld x = static_cast<ld>(t) / (T - 1) - c;
    w[static_cast<std::size_t>(t)] = std::exp(-(x * x) / (2 * static_cast<ld>(s) * s));
    peak = std::max(peak, w[static_cast<std::size_t>(t)]);
  }
  std::vector<double> out;
  for (ld v : w) out.push_back(static_cast<double>(v / peak));
  return out;
}

// ||Omega Omega^T - lambda I||_F^2 with rows L2-normalized first; explicit
// triple loop.
inline double diversity(const std::vector<std::vector<double>>& rows, double lambda) {
  std::vector<std::vector<ld>> n;
  for (const auto& r : rows) {
    ld s = 0;
    for (double v : r) s += static_cast<ld>(v) * v;
    const ld norm = std::sqrt(s);
    std::vector<ld> u;
    for (double v : r) u.push_back(v / norm);
    n.push_back(u);
  }
  ld total = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    for (std::size_t j = 0; j < n.size(); ++j) {
      ld dot = 0;
      for (std::size_t t = 0; t < n[i].size(); ++t) dot += n[i][t] * n[j][t];
      const ld e = dot - (i == j ? lambda : 0.0);
      total += e * e;
    }
  }
  return static_cast<double>(total);
}

// Temporal IoU by case analysis on the relative order of endpoints.
inline double iou(double s1, double e1, double s2, double e2) {
  double inter;
  if (e1 <= s2 || e2 <= s1) {
    inter = 0.0;
  } else {
    const double lo = s1 > s2 ? s1 : s2;
    const double hi = e1 < e2 ? e1 : e2;
    inter = hi - lo;
  }
  const double lo = s1 < s2 ? s1 : s2;
  const double hi = e1 > e2 ? e1 : e2;
  const double uni = hi - lo;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Vote winner: tally every candidate, then scan with an explicit
// lexicographic comparison on (-votes, loss, index).
inline std::size_t vote(const std::vector<std::pair<double, double>>& segs, const std::vector<double>& losses) {
  std::vector<double> votes(segs.size(), 0.0);
  for (std::size_t i = 0; i < segs.size(); ++i) {
    for (std::size_t j = 0; j < segs.size(); ++j) {
      if (i == j) continue;
      votes[i] += iou(segs[i].first, segs[i].second, segs[j].first, segs[j].second);
    }
  }
  std::vector<std::size_t> idx(segs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (votes[a] != votes[b]) return votes[a] > votes[b];
    if (losses[a] != losses[b]) return losses[a] < losses[b];
    return a < b;
  });
  return idx.front();
}

// R@a,IoU=b and R@a,mIoU over records given ranked per-record IoUs.
struct Metrics {
  double recall = 0.0;
  double miou = 0.0;
};
inline Metrics recall_at(const std::vector<std::vector<double>>& ranked_ious, int a, double b) {
  int hits = 0;
  ld miou = 0;
  for (const auto& r : ranked_ious) {
    bool hit = false;
    ld sum = 0;
    int k = 0;
    for (; k < a && k < static_cast<int>(r.size()); ++k) {
      if (r[static_cast<std::size_t>(k)] > b) hit = true;
      sum += r[static_cast<std::size_t>(k)];
    }
    hits += hit ? 1 : 0;
    miou += sum / k;
  }
  return {static_cast<double>(hits) / ranked_ious.size(), static_cast<double>(miou / ranked_ious.size())};
}

// Central finite difference of f with respect to x[i].
inline double central_difference(const std::function<double()>& f, double& x, double h) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace oracle
