#include "ccr/ccr.hpp"

#include "ccr/errors.hpp"

#include <stdexcept>

namespace ccr {

std::string to_string(CounterfactualStrategy s) {
  switch (s) {
    case CounterfactualStrategy::uniform: return "uniform";
    case CounterfactualStrategy::average: return "average";
    case CounterfactualStrategy::random_selected: return "random_selected";
  }
  return "?";
}

std::string to_string(AggregatorKind k) {
  switch (k) {
    case AggregatorKind::sigmoid_gate: return "sigmoid_gate";
    case AggregatorKind::sum_sigmoid: return "sum_sigmoid";
    case AggregatorKind::learned_concat: return "learned_concat";
  }
  return "?";
}

CounterfactualStrategy parse_strategy(const std::string& s) {
  if (s == "uniform") return CounterfactualStrategy::uniform;
  if (s == "average") return CounterfactualStrategy::average;
  if (s == "random_selected") return CounterfactualStrategy::random_selected;
  throw ConfigError("unknown counterfactual strategy '" + s +
                    "' (expected uniform, average or random_selected)");
}

AggregatorKind parse_aggregator(const std::string& s) {
  if (s == "sigmoid_gate") return AggregatorKind::sigmoid_gate;
  if (s == "sum_sigmoid") return AggregatorKind::sum_sigmoid;
  if (s == "learned_concat") return AggregatorKind::learned_concat;
  throw ConfigError("unknown aggregator '" + s +
                    "' (expected sigmoid_gate, sum_sigmoid or learned_concat)");
}

CcrHead::CcrHead(AggregatorKind kind, CounterfactualStrategy strategy, int vocab_size,
                 std::uint64_t seed)
    : kind_(kind), strategy_(strategy) {
  mu_ = mu_params_.add("mu", ag::Matrix::Zero(1, 1));
  if (kind_ == AggregatorKind::learned_concat) {
    std::mt19937_64 rng(seed);
    ag::Matrix w(2 * vocab_size, vocab_size);
    w.topRows(vocab_size).setIdentity();
    w.bottomRows(vocab_size) = uniform_matrix(vocab_size, vocab_size, 0.01, rng);
    concat_ = ConcatWeights{aggregator_params_.add("aggregate.w", std::move(w)),
                            aggregator_params_.add("aggregate.b", ag::Matrix::Zero(1, vocab_size))};
  }
}

ag::Var aggregate(const ag::Var& x, const ag::Var& y, AggregatorKind kind,
                  const ConcatWeights* concat) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw std::invalid_argument("aggregate: logits of shape " + std::to_string(x.rows()) + "x" +
                                std::to_string(x.cols()) + " and " + std::to_string(y.rows()) +
                                "x" + std::to_string(y.cols()) + " differ");
  }
  switch (kind) {
    case AggregatorKind::sigmoid_gate:
      return ag::hadamard(x, ag::sigmoid(y));
    case AggregatorKind::sum_sigmoid:
      return ag::sigmoid(x + y);
    case AggregatorKind::learned_concat: {
      if (!concat) throw std::invalid_argument("aggregate: learned_concat needs weights");
      const std::vector<ag::Var> parts{x, y};
      return ag::add_row(ag::matmul(ag::concat_cols(parts), concat->weight), concat->bias);
    }
  }
  throw std::logic_error("aggregate: unknown kind");
}

ag::Var counterfactual_logits(CounterfactualStrategy strategy, const ag::Var& mu, const ag::Var& psi,
                              BatchMains batch_mains, AggregatorKind kind,
                              const ConcatWeights* concat, std::mt19937_64* rng) {
  const auto rows = psi.rows();
  const auto cols = psi.cols();
  switch (strategy) {
    case CounterfactualStrategy::uniform:
      return aggregate(ag::broadcast(mu, rows, cols), psi, kind, concat);
    case CounterfactualStrategy::average: {
      if (batch_mains.empty()) throw std::invalid_argument("counterfactual: average needs a batch");
      Eigen::RowVectorXd avg = Eigen::RowVectorXd::Zero(cols);
      for (const auto& m : batch_mains) {
        if (m.size() != cols) throw std::invalid_argument("counterfactual: batch width mismatch");
        avg += m;
      }
      avg /= static_cast<double>(batch_mains.size());
      return aggregate(ag::constant(avg.replicate(rows, 1)), psi, kind, concat);
    }
    case CounterfactualStrategy::random_selected: {
      if (batch_mains.empty()) {
        throw std::invalid_argument("counterfactual: random_selected needs a batch");
      }
      if (!rng) throw std::invalid_argument("counterfactual: random_selected needs an rng");
      std::uniform_int_distribution<std::size_t> pick(0, batch_mains.size() - 1);
      const Eigen::RowVectorXd& chosen = batch_mains[pick(*rng)];
      if (chosen.size() != cols) throw std::invalid_argument("counterfactual: batch width mismatch");
      return aggregate(ag::constant(chosen.replicate(rows, 1)), psi, kind, concat);
    }
  }
  throw std::logic_error("counterfactual: unknown strategy");
}

ag::Var debias(const ag::Var& aggregated, const ag::Var& counterfactual) {
  if (aggregated.rows() != counterfactual.rows() || aggregated.cols() != counterfactual.cols()) {
    throw std::invalid_argument("debias: factual and counterfactual logits differ in shape");
  }
  return aggregated - counterfactual;
}

ReconLogits main_branch(const FusionModel& model, const FusionOutput& fused) {
  return {model.project(fused.masked_hidden), Branch::main};
}

ReconLogits side_branch(const FusionModel& model, const Eigen::MatrixXd& query_hidden) {
  return {model.project(query_hidden), Branch::side};
}

ReconLogits aggregate(const ReconLogits& x, const ReconLogits& y, AggregatorKind kind,
                      const ConcatWeights* concat) {
  ag::NoGradGuard no_grad;
  return {aggregate(ag::constant(x.values), ag::constant(y.values), kind, concat).value(),
          Branch::aggregated};
}

ReconLogits counterfactual_logits(const CounterfactualKnowledge& ck, const ReconLogits& psi,
                                  std::span<const ReconLogits> batch_mains, AggregatorKind kind,
                                  const ConcatWeights* concat, std::mt19937_64* rng) {
  ag::NoGradGuard no_grad;
  std::vector<Eigen::RowVectorXd> means;
  means.reserve(batch_mains.size());
  for (const auto& m : batch_mains) means.push_back(m.values.colwise().mean());
  const ag::Var out = counterfactual_logits(ck.strategy, ag::scalar_constant(ck.mu),
                                            ag::constant(psi.values), means, kind, concat, rng);
  return {out.value(), Branch::counterfactual};
}

ReconLogits debias(const ReconLogits& aggregated, const ReconLogits& counterfactual) {
  ag::NoGradGuard no_grad;
  return {debias(ag::constant(aggregated.values), ag::constant(counterfactual.values)).value(),
          Branch::debiased};
}

}  // namespace ccr
