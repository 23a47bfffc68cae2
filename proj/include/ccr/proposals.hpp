#pragma once

// Gaussian temporal proposals: weights, flanking negatives, segment
// conversion and the positive-diversity penalty.

#include "ccr/autograd.hpp"
#include "ccr/data.hpp"

#include <Eigen/Dense>

#include <span>
#include <utility>
#include <vector>

namespace ccr {

enum class ProposalKind { positive, negative, reference };

struct Proposal {
  double center = 0.5;  // normalized video time, (0, 1)
  double width = 0.1;   // normalized standard deviation
  ProposalKind kind = ProposalKind::positive;
};

struct WidthBounds {
  double min = 0.01;
  double max = 1.0;
};

struct NegativeMining {
  double shift = 3.0;      // delta: distance in widths
  double edge = 0.01;      // epsilon: keep centers inside (0, 1)
  double min_width = 0.1;  // w_min: floor on the width used for the shift
};

// Length-T non-negative vector with peak value 1.
struct TemporalWeights {
  Eigen::VectorXd values;
};

struct ProposalSet {
  std::vector<Proposal> positives;
  // Negatives of positive j sit at 2j (left) and 2j + 1 (right).
  std::vector<Proposal> negatives;
  Proposal reference{0.5, 1.0, ProposalKind::reference};

  const Proposal& negative(std::size_t j, int k) const {
    return negatives.at(2 * j + static_cast<std::size_t>(k - 1));
  }
};

void validate(const Proposal& p, const WidthBounds& bounds = {});

TemporalWeights gaussian_weights(double center, double width, int frames);
// Full-video reference: all ones.
TemporalWeights reference_weights(int frames);
TemporalWeights weights_for(const Proposal& p, int frames);

std::pair<Proposal, Proposal> mine_negatives(const Proposal& positive,
                                             const NegativeMining& mining = {});

Span weights_to_segment(const Proposal& p, double duration_s, double gamma = 1.0);

// ||Omega Omega^T - lambda I||_F^2 over L2-normalized rows of omega.
double diversity_loss(const Eigen::MatrixXd& omega, double lambda);

// Differentiable forms used by the trainer; center/width are 1x1 Vars.
ag::Var gaussian_weights(const ag::Var& center, const ag::Var& width, int frames);
std::pair<ag::Var, ag::Var> negative_centers(const ag::Var& center, const ag::Var& width,
                                             const NegativeMining& mining);
// rows: each a T x 1 weight column of one positive proposal.
ag::Var diversity_loss(std::span<const ag::Var> rows, double lambda);

}  // namespace ccr
