#include "ccr/ccr.hpp"
#include "ccr/losses.hpp"
#include "ccr/model.hpp"
#include "ccr/trainer.hpp"

#include "oracles.hpp"
#include "trivial_examples.hpp"

#include <doctest.h>

#include <random>

using namespace ccr;

namespace {

Eigen::MatrixXd random_logits(int rows, int cols, std::mt19937_64& rng, double scale = 3.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = u(rng);
  return m;
}

ReconLogits logits(Eigen::MatrixXd v) { return ReconLogits{std::move(v), Branch::main}; }

}  // namespace

TEST_CASE("ccr: worked examples") {
  for (const auto& ex : examples::ccr_examples()) {
    INFO(ex.name);
    CHECK(ex.pass);
  }
}

TEST_CASE("main_branch differs across proposals on non-degenerate video") {
  SynthConfig sc;
  sc.n_pairs = 1;
  sc.frames = 16;
  sc.feature_dim = 8;
  sc.vocab_size = 20;
  const auto data = synth_dataset(sc);
  FusionConfig fc;
  fc.hidden = 8;
  fc.ff = 16;
  fc.layers = 1;
  const FusionModel model(fc, sc.vocab_size, sc.feature_dim, 5);
  std::mt19937_64 rng(1);
  const MaskedQuery q = mask_query(data[0].record.query, 0.5, rng);
  const auto a = main_branch(model, model.encode(data[0].video, q, gaussian_weights(0.2, 0.1, 16)));
  const auto b = main_branch(model, model.encode(data[0].video, q, gaussian_weights(0.8, 0.1, 16)));
  CHECK((a.values - b.values).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("debias of aggregate and uniform counterfactual equals (phi - mu) * sigmoid(psi)") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::MatrixXd phi = random_logits(3, 8, rng);
    const Eigen::MatrixXd psi = random_logits(3, 8, rng);
    const double mu = u(rng);
    const auto agg = aggregate(logits(phi), logits(psi), AggregatorKind::sigmoid_gate);
    const auto cf = counterfactual_logits(CounterfactualKnowledge{CounterfactualStrategy::uniform, mu},
                                          logits(psi), {}, AggregatorKind::sigmoid_gate);
    const Eigen::MatrixXd got = debias(agg, cf).values;
    for (Eigen::Index i = 0; i < got.size(); ++i) {
      CHECK(std::abs(got(i) - (phi(i) - mu) * oracle::sigmoid(psi(i))) < 1e-14);
    }
  }
}

TEST_CASE("aggregate: sum_sigmoid and learned_concat follow their definitions") {
  std::mt19937_64 rng(22);
  const Eigen::MatrixXd x = random_logits(2, 5, rng);
  const Eigen::MatrixXd y = random_logits(2, 5, rng);
  const auto s = aggregate(logits(x), logits(y), AggregatorKind::sum_sigmoid).values;
  for (Eigen::Index i = 0; i < s.size(); ++i) CHECK(std::abs(s(i) - oracle::sigmoid(x(i) + y(i))) < 1e-15);

  const CcrHead head(AggregatorKind::learned_concat, CounterfactualStrategy::uniform, 5, 3);
  REQUIRE(head.concat() != nullptr);
  const auto c = aggregate(logits(x), logits(y), AggregatorKind::learned_concat, head.concat()).values;
  Eigen::MatrixXd xy(2, 10);
  xy << x, y;
  const Eigen::MatrixXd expected =
      (xy * head.concat()->weight.value()).rowwise() + head.concat()->bias.value().row(0);
  CHECK((c - expected).cwiseAbs().maxCoeff() < 1e-13);

  CHECK_THROWS(aggregate(logits(x), logits(y), AggregatorKind::learned_concat));
  CHECK_THROWS(aggregate(logits(x), logits(random_logits(2, 4, rng)), AggregatorKind::sigmoid_gate));
}

TEST_CASE("CcrHead owns aggregator weights only for learned_concat, and mu separately") {
  const CcrHead gate(AggregatorKind::sigmoid_gate, CounterfactualStrategy::uniform, 7, 1);
  CHECK(gate.concat() == nullptr);
  CHECK(gate.aggregator_params().size() == 0);
  CHECK(gate.mu_params().size() == 1);
  const CcrHead concat(AggregatorKind::learned_concat, CounterfactualStrategy::average, 7, 1);
  CHECK(concat.aggregator_params().size() == 2);
  CHECK(concat.knowledge().strategy == CounterfactualStrategy::average);
}

TEST_CASE("counterfactual: average and random_selected use mini-batch main logits") {
  std::mt19937_64 rng(23);
  const Eigen::MatrixXd psi = random_logits(3, 6, rng);
  std::vector<ReconLogits> mains{logits(random_logits(2, 6, rng)), logits(random_logits(4, 6, rng))};
  const Eigen::RowVectorXd avg = (mains[0].values.colwise().mean() + mains[1].values.colwise().mean()) / 2.0;

  const auto a = counterfactual_logits(CounterfactualKnowledge{CounterfactualStrategy::average, 0.0},
                                       logits(psi), mains, AggregatorKind::sigmoid_gate);
  for (Eigen::Index r = 0; r < 3; ++r) {
    for (Eigen::Index k = 0; k < 6; ++k) {
      CHECK(std::abs(a.values(r, k) - avg(k) * oracle::sigmoid(psi(r, k))) < 1e-14);
    }
  }

  std::mt19937_64 pick(5);
  const auto s = counterfactual_logits(CounterfactualKnowledge{CounterfactualStrategy::random_selected, 0.0},
                                       logits(psi), mains, AggregatorKind::sigmoid_gate, nullptr, &pick);
  bool matches_one = false;
  for (const auto& m : mains) {
    const Eigen::RowVectorXd mean = m.values.colwise().mean();
    bool all = true;
    for (Eigen::Index r = 0; r < 3; ++r) {
      for (Eigen::Index k = 0; k < 6; ++k) {
        all = all && std::abs(s.values(r, k) - mean(k) * oracle::sigmoid(psi(r, k))) < 1e-14;
      }
    }
    matches_one = matches_one || all;
  }
  CHECK(matches_one);

  CHECK_THROWS(counterfactual_logits(CounterfactualKnowledge{CounterfactualStrategy::average, 0.0},
                                     logits(psi), {}, AggregatorKind::sigmoid_gate));
  CHECK_THROWS(counterfactual_logits(CounterfactualKnowledge{CounterfactualStrategy::random_selected, 0.0},
                                     logits(psi), mains, AggregatorKind::sigmoid_gate));
}

TEST_CASE("debias rejects mismatched shapes") {
  CHECK_THROWS(debias(logits(Eigen::MatrixXd::Zero(2, 3)), logits(Eigen::MatrixXd::Zero(3, 3))));
}

TEST_CASE("gradient of the kl objective with respect to mu matches finite differences") {
  std::mt19937_64 rng(24);
  const Eigen::MatrixXd psi = random_logits(3, 6, rng);
  std::vector<ag::Var> roles;
  for (int r = 0; r < 7; ++r) roles.push_back(ag::constant(random_logits(3, 6, rng)));
  for (double mu0 : {-1.3, 0.0, 0.4, 2.2}) {
    ag::Var mu(ag::Matrix::Constant(1, 1, mu0), true);
    const auto f = [&] {
      return kl_loss(roles, counterfactual_logits(CounterfactualStrategy::uniform, mu, ag::constant(psi), {},
                                                  AggregatorKind::sigmoid_gate, nullptr, nullptr));
    };
    ag::backward(f());
    const double analytic = mu.grad()(0, 0);
    double& x = mu.mutable_value()(0, 0);
    const double numeric = oracle::central_difference(
        [&] {
          ag::NoGradGuard no_grad;
          return f().scalar();
        },
        x, 1e-5);
    CHECK(std::abs(analytic - numeric) / std::max(1e-8, std::abs(numeric)) < 1e-4);
  }
}

TEST_CASE("side branch trained alone on a fully biased corpus predicts the planted partner") {
  SynthConfig sc;
  sc.n_pairs = 200;
  sc.frames = 8;
  sc.feature_dim = 4;
  sc.vocab_size = 20;
  sc.query_length = 6;
  sc.bias_strength = 1.0;
  sc.seed = 3;
  const auto data = synth_dataset(sc);

  FusionConfig fc;
  fc.hidden = 16;
  fc.ff = 32;
  fc.layers = 1;
  FusionModel model(fc, sc.vocab_size, sc.feature_dim, 11);
  std::vector<ag::Var> params;
  for (const auto& e : model.params().entries()) params.push_back(e.var);
  Adam opt(params, 1e-2);

  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  for (int step = 0; step < 800; ++step) {
    for (auto& p : params) p.zero_grad();
    std::vector<ag::Var> losses;
    for (int b = 0; b < 8; ++b) {
      const MaskedQuery q = mask_query(data[pick(rng)].record.query, 1.0 / 3.0, rng);
      const ag::Var states = model.query_states(q, ForwardOptions{});
      losses.push_back(query_loss(model.project(ag::gather_rows(states, q.mask_positions)), q.targets));
    }
    ag::backward(ag::scale(ag::sum_scalars(losses), 1.0 / 8.0));
    std::vector<ag::Matrix> grads;
    for (const auto& p : params) grads.push_back(p.grad());
    opt.step(grads, 5.0);
  }

  const BiasedPair biased;
  int hits = 0;
  int total = 0;
  for (const auto& pair : data) {
    const auto& tokens = pair.record.query.tokens;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
      if (tokens[i] != biased.first || tokens[i + 1] != biased.second) continue;
      MaskedQuery q;
      q.tokens = tokens;
      q.tokens[i + 1] = kMaskId;
      q.mask_positions = {static_cast<int>(i + 1)};
      q.targets = {biased.second};
      Eigen::Index argmax = 0;
      side_branch(model, model.side_hidden(q)).values.row(0).maxCoeff(&argmax);
      hits += argmax == biased.second ? 1 : 0;
      ++total;
      break;
    }
  }
  REQUIRE(total == static_cast<int>(data.size()));
  MESSAGE("partner accuracy " << hits << "/" << total);
  CHECK(static_cast<double>(hits) / total > 0.9);
}
