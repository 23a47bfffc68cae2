#pragma once

// Training objectives: rectified reconstruction, intra-video contrastive
// hinges, query-only reconstruction, diversity-inclusive total, and the KL
// objective that fits mu.

#include "ccr/autograd.hpp"
#include "ccr/ccr.hpp"

#include <span>

namespace ccr {

struct Margins {
  double positive = 0.2;  // alpha_p, against the whole-video reference
  double negative = 0.1;  // alpha_n, against each flanking negative
};

struct LossBundle {
  // Reconstruction losses by proposal role; positives and negatives are
  // averaged over the N^p triplets.
  double recon_positive = 0.0;
  double recon_reference = 0.0;
  double recon_negative1 = 0.0;
  double recon_negative2 = 0.0;
  double contrastive = 0.0;
  double query = 0.0;
  double diversity = 0.0;
  double total = 0.0;  // contrastive + query + diversity
  double recon = 0.0;      // mean positive reconstruction plus the reference's
  double objective = 0.0;  // total + recon_weight * recon
  double kl = 0.0;
  double margin_positive = 0.2;
  double margin_negative = 0.1;

  bool finite() const;
};

// CE(softmax(debiased), W) + CE(softmax(aggregated), W), each a mean over
// masked positions.
ag::Var recon_loss(const ag::Var& debiased, const ag::Var& aggregated, std::span<const int> targets);
ag::Var contrastive_loss(const ag::Var& positive, const ag::Var& reference, const ag::Var& negative1,
                         const ag::Var& negative2, const Margins& margins);
ag::Var query_loss(const ag::Var& side_logits, std::span<const int> targets);
ag::Var total_loss(const ag::Var& contrastive, const ag::Var& query, const ag::Var& diversity);
// Sum over roles of mean-row KL(softmax(role) || softmax(counterfactual)).
// Role logits are detached; gradient reaches only the counterfactual.
ag::Var kl_loss(std::span<const ag::Var> role_logits, const ag::Var& counterfactual);

double recon_loss(const ReconLogits& debiased, const ReconLogits& aggregated,
                  std::span<const int> targets);
double contrastive_loss(double positive, double reference, double negative1, double negative2,
                        const Margins& margins);
double query_loss(const ReconLogits& side_logits, std::span<const int> targets);
double total_loss(double contrastive, double query, double diversity);
double kl_loss(std::span<const ReconLogits> role_logits, const ReconLogits& counterfactual);

}  // namespace ccr
