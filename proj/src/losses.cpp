#include "ccr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ccr {

bool LossBundle::finite() const {
  for (double v : {recon_positive, recon_reference, recon_negative1, recon_negative2, contrastive,
                   query, diversity, total, recon, objective, kl}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

ag::Var recon_loss(const ag::Var& debiased, const ag::Var& aggregated, std::span<const int> targets) {
  return ag::cross_entropy_rows(debiased, targets) + ag::cross_entropy_rows(aggregated, targets);
}

ag::Var contrastive_loss(const ag::Var& positive, const ag::Var& reference, const ag::Var& negative1,
                         const ag::Var& negative2, const Margins& margins) {
  const ag::Var to_ref = ag::relu(ag::add_scalar(positive - reference, margins.positive));
  const ag::Var to_neg1 = ag::relu(ag::add_scalar(positive - negative1, margins.negative));
  const ag::Var to_neg2 = ag::relu(ag::add_scalar(positive - negative2, margins.negative));
  const std::vector<ag::Var> terms{to_ref, to_neg1, to_neg2};
  return ag::sum_scalars(terms);
}

ag::Var query_loss(const ag::Var& side_logits, std::span<const int> targets) {
  return ag::cross_entropy_rows(side_logits, targets);
}

ag::Var total_loss(const ag::Var& contrastive, const ag::Var& query, const ag::Var& diversity) {
  const std::vector<ag::Var> terms{contrastive, query, diversity};
  return ag::sum_scalars(terms);
}

ag::Var kl_loss(std::span<const ag::Var> role_logits, const ag::Var& counterfactual) {
  if (role_logits.empty()) throw std::invalid_argument("kl_loss: no proposal roles");
  std::vector<ag::Var> terms;
  terms.reserve(role_logits.size());
  for (const auto& role : role_logits) terms.push_back(ag::kl_rows(ag::detach(role), counterfactual));
  return ag::sum_scalars(terms);
}

double recon_loss(const ReconLogits& debiased, const ReconLogits& aggregated,
                  std::span<const int> targets) {
  ag::NoGradGuard no_grad;
  return recon_loss(ag::constant(debiased.values), ag::constant(aggregated.values), targets).scalar();
}

double contrastive_loss(double positive, double reference, double negative1, double negative2,
                        const Margins& margins) {
  return std::max(0.0, margins.positive + positive - reference) +
         std::max(0.0, margins.negative + positive - negative1) +
         std::max(0.0, margins.negative + positive - negative2);
}

double query_loss(const ReconLogits& side_logits, std::span<const int> targets) {
  ag::NoGradGuard no_grad;
  return query_loss(ag::constant(side_logits.values), targets).scalar();
}

double total_loss(double contrastive, double query, double diversity) {
  return contrastive + query + diversity;
}

double kl_loss(std::span<const ReconLogits> role_logits, const ReconLogits& counterfactual) {
  ag::NoGradGuard no_grad;
  std::vector<ag::Var> roles;
  roles.reserve(role_logits.size());
  for (const auto& r : role_logits) roles.push_back(ag::constant(r.values));
  return kl_loss(roles, ag::constant(counterfactual.values)).scalar();
}

}  // namespace ccr
