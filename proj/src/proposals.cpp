#include "ccr/proposals.hpp"

#include "ccr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ccr {

void validate(const Proposal& p, const WidthBounds& bounds) {
  if (!(p.center > 0.0 && p.center < 1.0)) {
    throw std::invalid_argument("proposal center " + std::to_string(p.center) +
                                " outside (0, 1)");
  }
  if (!(p.width >= bounds.min && p.width <= bounds.max)) {
    throw std::invalid_argument("proposal width " + std::to_string(p.width) +
                                " outside [" + std::to_string(bounds.min) + ", " +
                                std::to_string(bounds.max) + "]");
  }
}

TemporalWeights gaussian_weights(double center, double width, int frames) {
  if (!(width > 0.0)) throw std::invalid_argument("gaussian_weights: width must be positive");
  if (frames < 2) throw std::invalid_argument("gaussian_weights: need at least 2 frames");
  ag::NoGradGuard no_grad;
  const ag::Var w =
      ag::gaussian_profile(ag::scalar_constant(center), ag::scalar_constant(width), frames);
  return TemporalWeights{w.value().col(0)};
}

TemporalWeights reference_weights(int frames) {
  if (frames < 2) throw std::invalid_argument("reference_weights: need at least 2 frames");
  return TemporalWeights{Eigen::VectorXd::Ones(frames)};
}

TemporalWeights weights_for(const Proposal& p, int frames) {
  if (p.kind == ProposalKind::reference) return reference_weights(frames);
  return gaussian_weights(p.center, p.width, frames);
}

std::pair<Proposal, Proposal> mine_negatives(const Proposal& positive, const NegativeMining& mining) {
  const double offset = mining.shift * std::max(positive.width, mining.min_width);
  Proposal left{std::max(mining.edge, positive.center - offset), positive.width,
                ProposalKind::negative};
  Proposal right{std::min(1.0 - mining.edge, positive.center + offset), positive.width,
                 ProposalKind::negative};
  return {left, right};
}

Span weights_to_segment(const Proposal& p, double duration_s, double gamma) {
  if (p.kind == ProposalKind::reference) return Span{0.0, duration_s};
  const double lo = std::clamp(p.center - gamma * p.width, 0.0, 1.0);
  const double hi = std::clamp(p.center + gamma * p.width, 0.0, 1.0);
  return Span{lo * duration_s, hi * duration_s};
}

double diversity_loss(const Eigen::MatrixXd& omega, double lambda) {
  if (omega.rows() == 0) throw std::invalid_argument("diversity_loss: no positive proposals");
  ag::NoGradGuard no_grad;
  const ag::Var rows = ag::l2_normalize_rows(ag::constant(omega));
  const ag::Var gram = ag::matmul(rows, ag::transpose(rows));
  const Eigen::MatrixXd diff =
      gram.value() - lambda * Eigen::MatrixXd::Identity(omega.rows(), omega.rows());
  return diff.squaredNorm();
}

ag::Var gaussian_weights(const ag::Var& center, const ag::Var& width, int frames) {
  return ag::gaussian_profile(center, width, frames);
}

std::pair<ag::Var, ag::Var> negative_centers(const ag::Var& center, const ag::Var& width,
                                             const NegativeMining& mining) {
  const ag::Var offset =
      ag::scale(ag::clamp(width, mining.min_width, std::numeric_limits<double>::infinity()),
                mining.shift);
  const double lo = mining.edge;
  const double hi = 1.0 - mining.edge;
  return {ag::clamp(center - offset, lo, hi), ag::clamp(center + offset, lo, hi)};
}

ag::Var diversity_loss(std::span<const ag::Var> rows, double lambda) {
  if (rows.empty()) throw std::invalid_argument("diversity_loss: no positive proposals");
  std::vector<ag::Var> transposed;
  transposed.reserve(rows.size());
  for (const auto& r : rows) transposed.push_back(ag::transpose(r));
  const ag::Var omega = ag::l2_normalize_rows(ag::concat_rows(transposed));
  const ag::Var gram = ag::matmul(omega, ag::transpose(omega));
  const auto n = static_cast<ag::Index>(rows.size());
  return ag::squared_norm(gram - ag::constant(lambda * ag::Matrix::Identity(n, n)));
}

}  // namespace ccr
