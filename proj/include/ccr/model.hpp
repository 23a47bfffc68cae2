#pragma once

// Full per-pair forward pass: masking is done by the caller; this proposes,
// reconstructs under every proposal role, applies the counterfactual
// subtraction and assembles the losses.

#include "ccr/ccr.hpp"
#include "ccr/fusion.hpp"
#include "ccr/losses.hpp"
#include "ccr/proposals.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace ccr {

struct ModelConfig {
  FusionConfig fusion;
  AggregatorKind aggregator = AggregatorKind::sigmoid_gate;
  CounterfactualStrategy strategy = CounterfactualStrategy::uniform;
  // When false the counterfactual subtraction is skipped: reconstruction
  // and ranking use the aggregated logits alone.
  bool ccr_enabled = true;
};

class CcrModel {
 public:
  CcrModel(const ModelConfig& cfg, int vocab_size, int feature_dim, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  FusionModel& fusion() { return fusion_; }
  const FusionModel& fusion() const { return fusion_; }
  CcrHead& head() { return head_; }
  const CcrHead& head() const { return head_; }

  // Optimizer groups: everything trained by the total loss, and mu alone.
  std::vector<ag::Var> model_parameters() const;
  std::vector<ag::Var> mu_parameters() const;
  // Every parameter with a stable name, for checkpoints.
  std::vector<std::pair<std::string, ag::Var>> named_parameters() const;

 private:
  ModelConfig cfg_;
  FusionModel fusion_;
  CcrHead head_;
};

struct RoleOutput {
  Proposal proposal;
  ag::Var weights;     // T x 1
  ag::Var main;        // phi
  ag::Var aggregated;  // qhat
  ag::Var debiased;    // qhat - qhat_c (qhat when CCR is disabled)
  ag::Var recon;       // per-role reconstruction loss
  ag::Var score;       // CE of the debiased logits alone; ranking criterion
};

struct PairForward {
  MaskedQuery query;
  ag::Var side;            // psi
  ag::Var counterfactual;  // qhat_c on the main-objective path (mu detached)
  std::vector<RoleOutput> positives;
  std::vector<RoleOutput> negatives;  // 2j left, 2j + 1 right of positive j
  RoleOutput reference;

  ag::Var contrastive;
  ag::Var query_loss;
  ag::Var diversity;
  ag::Var total;      // contrastive + query + diversity
  ag::Var recon;      // mean positive reconstruction plus the reference's
  ag::Var objective;  // total + recon_weight * recon; what training minimizes
  ag::Var kl;         // reaches mu only

  // Mean over positives and masked rows of phi, the batch summary consumed by
  // the average / random_selected strategies.
  Eigen::RowVectorXd main_summary() const;
};

struct PairOptions {
  ForwardOptions forward;
  Margins margins;
  double diversity_lambda = 0.15;
  // Weight of the direct reconstruction term in the training objective.
  double recon_weight = 1.0;
};

// Stage one: proposals and main-branch logits for every role, plus psi.
PairForward forward_branches(const CcrModel& model, const VideoFeatures& video,
                             const MaskedQuery& query, const PairOptions& opts);

// Stage two: counterfactual, debiased logits and all losses. batch_mains
// feeds the average / random_selected strategies and is ignored for uniform.
void finish_pair(const CcrModel& model, PairForward& pair, BatchMains batch_mains,
                 std::mt19937_64* rng, const PairOptions& opts);

}  // namespace ccr
