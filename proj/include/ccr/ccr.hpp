#pragma once

// Counterfactual cross-modality reasoning over reconstruction logits.
//
// main branch      phi = project(decoder hidden)     video + query
// side branch      psi = project(query-only hidden)  query alone
// aggregate        qhat   = rho(phi, psi)
// counterfactual   qhat_c = rho(mu * 1, psi)        main branch replaced
// debias           qhat - qhat_c                     total indirect effect
//
// rho defaults to x * sigmoid(y), so under the uniform strategy the debiased
// logits are exactly (phi - mu) * sigmoid(psi).

#include "ccr/autograd.hpp"
#include "ccr/fusion.hpp"
#include "ccr/parameters.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ccr {

enum class Branch { main, side, aggregated, counterfactual, debiased };

enum class CounterfactualStrategy { uniform, average, random_selected };

enum class AggregatorKind { sigmoid_gate, sum_sigmoid, learned_concat };

std::string to_string(CounterfactualStrategy s);
std::string to_string(AggregatorKind k);
CounterfactualStrategy parse_strategy(const std::string& s);
AggregatorKind parse_aggregator(const std::string& s);

struct ReconLogits {
  Eigen::MatrixXd values;  // |mask_positions| x |V|
  Branch branch = Branch::main;
};

struct CounterfactualKnowledge {
  CounterfactualStrategy strategy = CounterfactualStrategy::uniform;
  double mu = 0.0;
};

// Trainable weights of the learned_concat aggregator: [x ; y] W + b.
struct ConcatWeights {
  ag::Var weight;  // 2|V| x |V|
  ag::Var bias;    // 1 x |V|
};

// The CCR-specific learnable state: the counterfactual scalar mu (its own
// optimizer group) and, for learned_concat, the aggregator weights (trained
// with the fusion module).
class CcrHead {
 public:
  CcrHead(AggregatorKind kind, CounterfactualStrategy strategy, int vocab_size, std::uint64_t seed);

  AggregatorKind aggregator() const { return kind_; }
  CounterfactualStrategy strategy() const { return strategy_; }
  ParameterStore& aggregator_params() { return aggregator_params_; }
  const ParameterStore& aggregator_params() const { return aggregator_params_; }
  ParameterStore& mu_params() { return mu_params_; }
  const ParameterStore& mu_params() const { return mu_params_; }

  const ag::Var& mu() const { return mu_; }
  const ConcatWeights* concat() const { return concat_ ? &*concat_ : nullptr; }
  CounterfactualKnowledge knowledge() const { return {strategy_, mu_.scalar()}; }

 private:
  AggregatorKind kind_;
  CounterfactualStrategy strategy_;
  ParameterStore aggregator_params_;
  ParameterStore mu_params_;
  ag::Var mu_;
  std::optional<ConcatWeights> concat_;
};

// Graph forms.
ag::Var aggregate(const ag::Var& x, const ag::Var& y, AggregatorKind kind,
                  const ConcatWeights* concat);
// Row-mean of each batch member's main-branch logits, 1 x |V| each.
using BatchMains = std::span<const Eigen::RowVectorXd>;
ag::Var counterfactual_logits(CounterfactualStrategy strategy, const ag::Var& mu, const ag::Var& psi,
                              BatchMains batch_mains, AggregatorKind kind,
                              const ConcatWeights* concat, std::mt19937_64* rng);
ag::Var debias(const ag::Var& aggregated, const ag::Var& counterfactual);

// Value-level forms.
ReconLogits main_branch(const FusionModel& model, const FusionOutput& fused);
ReconLogits side_branch(const FusionModel& model, const Eigen::MatrixXd& query_hidden);
ReconLogits aggregate(const ReconLogits& x, const ReconLogits& y, AggregatorKind kind,
                      const ConcatWeights* concat = nullptr);
ReconLogits counterfactual_logits(const CounterfactualKnowledge& ck, const ReconLogits& psi,
                                  std::span<const ReconLogits> batch_mains, AggregatorKind kind,
                                  const ConcatWeights* concat = nullptr,
                                  std::mt19937_64* rng = nullptr);
ReconLogits debias(const ReconLogits& aggregated, const ReconLogits& counterfactual);

}  // namespace ccr
