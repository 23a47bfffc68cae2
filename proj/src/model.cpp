#include "ccr/model.hpp"

#include <optional>
#include <stdexcept>

namespace ccr {

CcrModel::CcrModel(const ModelConfig& cfg, int vocab_size, int feature_dim, std::uint64_t seed)
    : cfg_(cfg),
      fusion_(cfg.fusion, vocab_size, feature_dim, mix_seed(seed, 1)),
      head_(cfg.aggregator, cfg.strategy, vocab_size, mix_seed(seed, 2)) {}

std::vector<ag::Var> CcrModel::model_parameters() const {
  std::vector<ag::Var> out;
  for (const auto& e : fusion_.params().entries()) out.push_back(e.var);
  for (const auto& e : head_.aggregator_params().entries()) out.push_back(e.var);
  return out;
}

std::vector<ag::Var> CcrModel::mu_parameters() const {
  std::vector<ag::Var> out;
  for (const auto& e : head_.mu_params().entries()) out.push_back(e.var);
  return out;
}

std::vector<std::pair<std::string, ag::Var>> CcrModel::named_parameters() const {
  std::vector<std::pair<std::string, ag::Var>> out;
  for (const auto& e : fusion_.params().entries()) out.emplace_back("fusion/" + e.name, e.var);
  for (const auto& e : head_.aggregator_params().entries()) out.emplace_back("ccr/" + e.name, e.var);
  for (const auto& e : head_.mu_params().entries()) out.emplace_back("ccr/" + e.name, e.var);
  return out;
}

Eigen::RowVectorXd PairForward::main_summary() const {
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(positives.front().main.cols());
  for (const auto& p : positives) acc += p.main.value().colwise().mean();
  return acc / static_cast<double>(positives.size());
}

PairForward forward_branches(const CcrModel& model, const VideoFeatures& video,
                             const MaskedQuery& query, const PairOptions& opts) {
  const FusionModel& fusion = model.fusion();
  fusion.check_inputs(video, query);
  const auto& fcfg = fusion.config();
  const int frames = static_cast<int>(video.frame_count());
  const ForwardOptions& fwd = opts.forward;

  PairForward out;
  out.query = query;
  const ag::Var input = fusion.video_input(video);
  const ag::Var states = fusion.query_states(query, fwd);
  const ag::Var ones = ag::constant(Eigen::VectorXd::Ones(frames));
  const ag::Var full_memory = fusion.video_memory(input, ones, fwd);
  const ProposalHead head = fusion.proposal_head(full_memory, states, fwd);

  out.side = fusion.project(ag::gather_rows(states, query.mask_positions));

  auto reconstruct = [&](const ag::Var& memory) {
    return fusion.project(fusion.decode(states, memory, query.mask_positions, fwd));
  };
  auto role_for = [&](const ag::Var& center, const ag::Var& width, ProposalKind kind) {
    RoleOutput r;
    r.proposal = Proposal{center.scalar(), width.scalar(), kind};
    r.weights = gaussian_weights(center, width, frames);
    r.main = reconstruct(fusion.video_memory(input, r.weights, fwd));
    return r;
  };

  for (int i = 0; i < fcfg.num_positives; ++i) {
    const ag::Var center = ag::element(head.centers, i, 0);
    const ag::Var width = ag::element(head.widths, i, 0);
    out.positives.push_back(role_for(center, width, ProposalKind::positive));
    const auto [left, right] = negative_centers(center, width, fcfg.mining);
    out.negatives.push_back(role_for(left, width, ProposalKind::negative));
    out.negatives.push_back(role_for(right, width, ProposalKind::negative));
  }
  out.reference.proposal = Proposal{0.5, fcfg.width_bounds.max, ProposalKind::reference};
  out.reference.weights = ones;
  out.reference.main = reconstruct(full_memory);
  return out;
}

void finish_pair(const CcrModel& model, PairForward& pair, BatchMains batch_mains,
                 std::mt19937_64* rng, const PairOptions& opts) {
  const CcrHead& head = model.head();
  const AggregatorKind kind = head.aggregator();
  const ConcatWeights* concat = head.concat();
  const std::vector<int>& targets = pair.query.targets;
  const bool ccr = model.config().ccr_enabled;

  // random_selected draws once so both objective paths see the same member.
  CounterfactualStrategy strategy = head.strategy();
  std::vector<Eigen::RowVectorXd> chosen;
  if (strategy == CounterfactualStrategy::random_selected) {
    if (batch_mains.empty()) throw std::invalid_argument("random_selected needs a batch");
    if (!rng) throw std::invalid_argument("random_selected needs an rng");
    std::uniform_int_distribution<std::size_t> pick(0, batch_mains.size() - 1);
    chosen.push_back(batch_mains[pick(*rng)]);
    batch_mains = chosen;
    strategy = CounterfactualStrategy::average;
  }

  pair.counterfactual = counterfactual_logits(strategy, ag::detach(head.mu()), pair.side,
                                              batch_mains, kind, concat, nullptr);

  auto finish_role = [&](RoleOutput& r) {
    r.aggregated = aggregate(r.main, pair.side, kind, concat);
    // Disabling CCR sets the counterfactual to zero: the debiased logits are
    // the aggregated ones and the two-term loss keeps its form and scale.
    r.debiased = ccr ? debias(r.aggregated, pair.counterfactual) : r.aggregated;
    r.score = ag::cross_entropy_rows(r.debiased, targets);
    r.recon = r.score + ag::cross_entropy_rows(r.aggregated, targets);
  };
  for (auto& r : pair.positives) finish_role(r);
  for (auto& r : pair.negatives) finish_role(r);
  finish_role(pair.reference);

  std::vector<ag::Var> hinges;
  std::vector<ag::Var> positive_weights;
  for (std::size_t i = 0; i < pair.positives.size(); ++i) {
    hinges.push_back(contrastive_loss(pair.positives[i].recon, pair.reference.recon,
                                      pair.negatives[2 * i].recon, pair.negatives[2 * i + 1].recon,
                                      opts.margins));
    positive_weights.push_back(pair.positives[i].weights);
  }
  pair.contrastive = ag::sum_scalars(hinges);
  pair.query_loss = query_loss(pair.side, targets);
  pair.diversity = diversity_loss(positive_weights, opts.diversity_lambda);
  pair.total = total_loss(pair.contrastive, pair.query_loss, pair.diversity);
  // The hinges alone are satisfiable by making the reference and negatives
  // worse; minimizing the positive and reference reconstructions directly
  // keeps the decoder reading the video.
  std::vector<ag::Var> recons{pair.reference.recon};
  const double per_positive = 1.0 / static_cast<double>(pair.positives.size());
  for (const auto& r : pair.positives) recons.push_back(ag::scale(r.recon, per_positive));
  pair.recon = ag::sum_scalars(recons);
  if (opts.recon_weight != 0.0) {
    const std::vector<ag::Var> parts{pair.total, ag::scale(pair.recon, opts.recon_weight)};
    pair.objective = ag::sum_scalars(parts);
  } else {
    pair.objective = pair.total;
  }

  if (ccr) {
    std::optional<ConcatWeights> frozen;
    if (concat) frozen = ConcatWeights{ag::detach(concat->weight), ag::detach(concat->bias)};
    const ag::Var cf_for_mu =
        counterfactual_logits(strategy, head.mu(), ag::detach(pair.side), batch_mains, kind,
                              frozen ? &*frozen : nullptr, nullptr);
    std::vector<ag::Var> roles;
    for (const auto& r : pair.positives) roles.push_back(r.aggregated);
    for (const auto& r : pair.negatives) roles.push_back(r.aggregated);
    roles.push_back(pair.reference.aggregated);
    pair.kl = kl_loss(roles, cf_for_mu);
  } else {
    pair.kl = ag::scalar_constant(0.0);
  }
}

}  // namespace ccr
