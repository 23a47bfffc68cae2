#include "ccr/trainer.hpp"

#include "ccr/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace ccr {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr_model >= 0.0) || !(lr_mu >= 0.0)) throw ConfigError("learning rates must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (!(p_mask >= 0.0 && p_mask <= 1.0)) throw ConfigError("p_mask must lie in [0, 1]");
  if (!(margins.positive >= 0.0) || !(margins.negative >= 0.0)) {
    throw ConfigError("margins must be non-negative");
  }
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (!(feature_noise >= 0.0)) throw ConfigError("feature_noise must be non-negative");
  if (!(recon_weight >= 0.0)) throw ConfigError("recon_weight must be non-negative");
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<ag::Var> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.push_back(ag::Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(ag::Matrix::Zero(p.rows(), p.cols()));
  }
}

void Adam::step(const std::vector<ag::Matrix>& grads, double clip_norm) {
  if (grads.size() != params_.size()) throw std::logic_error("Adam: gradient count mismatch");
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  const double factor = norm > clip_norm ? clip_norm / norm : 1.0;

  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const ag::Matrix g = grads[i] * factor;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    if (lr_ == 0.0) continue;
    const ag::Matrix update =
        (m_[i] / c1).array() / ((v_[i] / c2).array().sqrt() + eps_);
    params_[i].mutable_value() -= lr_ * update;
  }
}

// ---------------------------------------------------------------------------
// State

TrainState::TrainState(const ModelConfig& model_cfg, const TrainConfig& train_cfg, Vocabulary vocab_in,
                       int feature_dim_in)
    : model_config(model_cfg),
      train_config(train_cfg),
      vocab(std::move(vocab_in)),
      feature_dim(feature_dim_in),
      model(std::make_unique<CcrModel>(model_cfg, vocab.size(), feature_dim_in, train_cfg.seed)),
      model_opt(model->model_parameters(), train_cfg.lr_model),
      mu_opt(model->mu_parameters(), train_cfg.lr_mu) {
  train_config.validate();
}

namespace {

std::vector<ag::Matrix> collect_grads(const std::vector<ag::Var>& params) {
  std::vector<ag::Matrix> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.grad());
  return out;
}

double max_abs(const std::vector<ag::Matrix>& grads) {
  double m = 0.0;
  for (const auto& g : grads) {
    if (g.size()) m = std::max(m, g.cwiseAbs().maxCoeff());
  }
  return m;
}

void zero(const std::vector<ag::Var>& params) {
  for (auto p : params) p.zero_grad();
}

std::string describe(const LossBundle& b, std::int64_t step) {
  std::ostringstream os;
  os << "non-finite loss at step " << step << ": recon_p=" << b.recon_positive
     << " recon_r=" << b.recon_reference << " recon_n1=" << b.recon_negative1
     << " recon_n2=" << b.recon_negative2 << " contrastive=" << b.contrastive
     << " query=" << b.query << " diversity=" << b.diversity << " kl=" << b.kl;
  return os.str();
}

}  // namespace

LossBundle train_step(TrainState& state, std::span<const TrainExample> batch,
                      const MaskPolicy& policy, GradientProbe* probe) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const TrainConfig& cfg = state.train_config;
  const CcrModel& model = *state.model;

  std::mt19937_64 dropout_rng(mix_seed(cfg.seed, 0xd209, static_cast<std::uint64_t>(state.step)));
  std::mt19937_64 select_rng(mix_seed(cfg.seed, 0xcf5e, static_cast<std::uint64_t>(state.step)));
  PairOptions opts;
  opts.forward = ForwardOptions{true, &dropout_rng};
  opts.margins = cfg.margins;
  opts.diversity_lambda = cfg.diversity_lambda;
  opts.recon_weight = cfg.recon_weight;

  std::vector<PairForward> pairs;
  pairs.reserve(batch.size());
  std::mt19937_64 noise_rng(mix_seed(cfg.seed, 0xf0e5, static_cast<std::uint64_t>(state.step)));
  std::normal_distribution<float> noise(0.0f, static_cast<float>(cfg.feature_noise));
  for (const auto& ex : batch) {
    std::mt19937_64 mask_rng(ex.mask_seed);
    const MaskedQuery mq = mask_query(*ex.query, cfg.p_mask, mask_rng, policy);
    if (cfg.feature_noise > 0.0) {
      VideoFeatures noisy = *ex.video;
      for (Eigen::Index i = 0; i < noisy.frames.size(); ++i) noisy.frames(i) += noise(noise_rng);
      pairs.push_back(forward_branches(model, noisy, mq, opts));
    } else {
      pairs.push_back(forward_branches(model, *ex.video, mq, opts));
    }
  }

  std::vector<Eigen::RowVectorXd> summaries;
  if (model.head().strategy() != CounterfactualStrategy::uniform) {
    for (const auto& p : pairs) summaries.push_back(p.main_summary());
  }
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::vector<Eigen::RowVectorXd> others;
    BatchMains mains = summaries;
    if (model.head().strategy() == CounterfactualStrategy::random_selected && summaries.size() > 1) {
      for (std::size_t j = 0; j < summaries.size(); ++j) {
        if (j != i) others.push_back(summaries[j]);
      }
      mains = others;
    }
    finish_pair(model, pairs[i], mains, &select_rng, opts);
  }

  const double inv = 1.0 / static_cast<double>(pairs.size());
  LossBundle bundle;
  bundle.margin_positive = cfg.margins.positive;
  bundle.margin_negative = cfg.margins.negative;
  std::vector<ag::Var> totals, kls;
  for (const auto& p : pairs) {
    double rp = 0.0, rn1 = 0.0, rn2 = 0.0;
    for (std::size_t j = 0; j < p.positives.size(); ++j) {
      rp += p.positives[j].recon.scalar();
      rn1 += p.negatives[2 * j].recon.scalar();
      rn2 += p.negatives[2 * j + 1].recon.scalar();
    }
    const double np = static_cast<double>(p.positives.size());
    bundle.recon_positive += rp / np * inv;
    bundle.recon_negative1 += rn1 / np * inv;
    bundle.recon_negative2 += rn2 / np * inv;
    bundle.recon_reference += p.reference.recon.scalar() * inv;
    bundle.contrastive += p.contrastive.scalar() * inv;
    bundle.query += p.query_loss.scalar() * inv;
    bundle.diversity += p.diversity.scalar() * inv;
    bundle.recon += p.recon.scalar() * inv;
    bundle.kl += p.kl.scalar() * inv;
    totals.push_back(p.objective);
    kls.push_back(p.kl);
  }
  bundle.total = bundle.contrastive + bundle.query + bundle.diversity;
  bundle.objective = bundle.total + cfg.recon_weight * bundle.recon;
  if (!bundle.finite()) throw NumericalError(describe(bundle, state.step));

  const ag::Var total = ag::scale(ag::sum_scalars(totals), inv);
  const ag::Var kl = ag::scale(ag::sum_scalars(kls), inv);
  const auto model_params = model.model_parameters();
  const auto mu_params = model.mu_parameters();

  zero(model_params);
  zero(mu_params);
  ag::backward(total);
  const auto model_grads = collect_grads(model_params);
  const double total_on_mu = max_abs(collect_grads(mu_params));

  zero(model_params);
  zero(mu_params);
  ag::backward(kl);
  const auto mu_grads = collect_grads(mu_params);
  const double kl_on_model = max_abs(collect_grads(model_params));
  zero(model_params);
  zero(mu_params);

  if (probe) *probe = GradientProbe{kl_on_model, total_on_mu};
  for (const auto& g : model_grads) {
    if (!g.allFinite()) throw NumericalError("non-finite gradient at step " + std::to_string(state.step));
  }

  state.model_opt.step(model_grads, cfg.clip_norm);
  state.mu_opt.step(mu_grads, cfg.clip_norm);
  ++state.step;
  return bundle;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<BatchSlot> batch_slots(std::size_t dataset_size, std::int64_t step, int batch_size,
                                   std::uint64_t seed) {
  if (dataset_size == 0) throw std::invalid_argument("batch_slots: empty dataset");
  std::vector<BatchSlot> out;
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> perm(dataset_size);
  for (int j = 0; j < batch_size; ++j) {
    const auto g = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(batch_size) +
                   static_cast<std::uint64_t>(j);
    const auto epoch = static_cast<std::int64_t>(g / dataset_size);
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::mt19937_64 rng(mix_seed(seed, 0xba7c, static_cast<std::uint64_t>(epoch)));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(BatchSlot{perm[g % dataset_size], epoch});
  }
  return out;
}

std::uint64_t mask_seed(std::uint64_t seed, std::int64_t epoch, std::size_t pair_index) {
  return mix_seed(seed ^ 0x6d61736bULL, static_cast<std::uint64_t>(epoch), pair_index);
}

void train(TrainState& state, std::span<const Sample> data, const MaskPolicy& policy,
           std::int64_t until_step,
           const std::function<void(std::int64_t, const LossBundle&)>& on_step) {
  const TrainConfig& cfg = state.train_config;
  while (state.step < until_step) {
    std::vector<TrainExample> batch;
    for (const auto& slot : batch_slots(data.size(), state.step, cfg.batch_size, cfg.seed)) {
      const Sample& s = data[slot.index];
      batch.push_back(TrainExample{&s.video, &s.query, mask_seed(cfg.seed, slot.epoch, slot.index)});
    }
    const std::int64_t step = state.step;
    const LossBundle bundle = train_step(state, batch, policy);
    if (on_step) on_step(step, bundle);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'C', 'R', 'C'};
constexpr char kCheckpointTrailer[4] = {'E', 'N', 'D', '!'};

json fusion_to_json(const FusionConfig& f) {
  return json{{"hidden", f.hidden},
              {"layers", f.layers},
              {"heads", f.heads},
              {"ff", f.ff},
              {"dropout", f.dropout},
              {"max_frames", f.max_frames},
              {"max_query", f.max_query},
              {"num_positives", f.num_positives},
              {"sigma_min", f.width_bounds.min},
              {"sigma_max", f.width_bounds.max},
              {"neg_shift", f.mining.shift},
              {"neg_edge", f.mining.edge},
              {"neg_min_width", f.mining.min_width},
              {"initial_width", f.initial_width}};
}

FusionConfig fusion_from_json(const json& j) {
  FusionConfig f;
  f.hidden = j.at("hidden");
  f.layers = j.at("layers");
  f.heads = j.at("heads");
  f.ff = j.at("ff");
  f.dropout = j.at("dropout");
  f.max_frames = j.at("max_frames");
  f.max_query = j.at("max_query");
  f.num_positives = j.at("num_positives");
  f.width_bounds.min = j.at("sigma_min");
  f.width_bounds.max = j.at("sigma_max");
  f.mining.shift = j.at("neg_shift");
  f.mining.edge = j.at("neg_edge");
  f.mining.min_width = j.at("neg_min_width");
  f.initial_width = j.at("initial_width");
  return f;
}

json train_to_json(const TrainConfig& t) {
  return json{{"lr_model", t.lr_model},
              {"lr_mu", t.lr_mu},
              {"batch_size", t.batch_size},
              {"steps", t.steps},
              {"p_mask", t.p_mask},
              {"lambda", t.diversity_lambda},
              {"alpha_p", t.margins.positive},
              {"alpha_n", t.margins.negative},
              {"clip_norm", t.clip_norm},
              {"feature_noise", t.feature_noise},
              {"recon_weight", t.recon_weight},
              {"seed", t.seed},
              {"checkpoint_every", t.checkpoint_every}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  t.lr_model = j.at("lr_model");
  t.lr_mu = j.at("lr_mu");
  t.batch_size = j.at("batch_size");
  t.steps = j.at("steps");
  t.p_mask = j.at("p_mask");
  t.diversity_lambda = j.at("lambda");
  t.margins.positive = j.at("alpha_p");
  t.margins.negative = j.at("alpha_n");
  t.clip_norm = j.at("clip_norm");
  t.feature_noise = j.at("feature_noise");
  t.recon_weight = j.at("recon_weight");
  t.seed = j.at("seed");
  t.checkpoint_every = j.at("checkpoint_every");
  return t;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::ostream& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(std::istream& in, std::string where) : in_(in), where_(std::move(where)) {}

  void bytes(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw TruncationError("checkpoint " + where_ + " is truncated");
    }
  }
  std::uint64_t uint(int width) {
    unsigned char b[8] = {};
    bytes(reinterpret_cast<char*>(b), static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::string string(std::uint64_t limit) {
    const std::uint64_t n = uint(4);
    if (n > limit) throw FormatError("checkpoint " + where_ + " has an oversized string field");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::istream& in_;
  std::string where_;
};

void put_matrix(std::ostream& out, const std::string& name, const ag::Matrix& m) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (ag::Index r = 0; r < m.rows(); ++r) {
    for (ag::Index c = 0; c < m.cols(); ++c) put_u64(out, std::bit_cast<std::uint64_t>(m(r, c)));
  }
}

std::vector<std::pair<std::string, ag::Matrix*>> optimizer_slots(TrainState& state) {
  std::vector<std::pair<std::string, ag::Matrix*>> out;
  auto add = [&](const std::string& prefix, std::vector<ag::Matrix>& ms) {
    for (std::size_t i = 0; i < ms.size(); ++i) out.emplace_back(prefix + std::to_string(i), &ms[i]);
  };
  add("adam_model/m/", state.model_opt.first_moments());
  add("adam_model/v/", state.model_opt.second_moments());
  add("adam_mu/m/", state.mu_opt.first_moments());
  add("adam_mu/v/", state.mu_opt.second_moments());
  return out;
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  json meta;
  meta["model"] = fusion_to_json(state.model_config.fusion);
  meta["aggregator"] = to_string(state.model_config.aggregator);
  meta["strategy"] = to_string(state.model_config.strategy);
  meta["ccr_enabled"] = state.model_config.ccr_enabled;
  meta["train"] = train_to_json(state.train_config);
  meta["vocab"] = state.vocab.words();
  meta["feature_dim"] = state.feature_dim;
  meta["step"] = state.step;
  meta["adam_model_t"] = state.model_opt.steps();
  meta["adam_mu_t"] = state.mu_opt.steps();
  const std::string meta_text = meta.dump();

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(kCheckpointMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(meta_text.size()));
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

    auto& mutable_state = const_cast<TrainState&>(state);
    const auto params = state.model->named_parameters();
    const auto slots = optimizer_slots(mutable_state);
    put_u32(out, static_cast<std::uint32_t>(params.size() + slots.size()));
    for (const auto& [name, var] : params) put_matrix(out, "param/" + name, var.value());
    for (const auto& [name, m] : slots) put_matrix(out, name, *m);
    out.write(kCheckpointTrailer, 4);
    if (!out) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::unique_ptr<TrainState> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  Reader rd(in, path.string());
  char magic[4];
  rd.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) {
    throw FormatError(path.string() + " is not a checkpoint");
  }
  const auto version = static_cast<std::uint32_t>(rd.uint(4));
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint " + path.string() + " has version " + std::to_string(version) +
                      "; this build reads version " + std::to_string(kCheckpointVersion));
  }
  json meta;
  try {
    meta = json::parse(rd.string(std::uint64_t{1} << 30));
  } catch (const json::parse_error& e) {
    throw FormatError("checkpoint " + path.string() + " has corrupt metadata: " + e.what());
  }

  std::unique_ptr<TrainState> state;
  try {
    ModelConfig mc;
    mc.fusion = fusion_from_json(meta.at("model"));
    mc.aggregator = parse_aggregator(meta.at("aggregator"));
    mc.strategy = parse_strategy(meta.at("strategy"));
    mc.ccr_enabled = meta.at("ccr_enabled");
    state = std::make_unique<TrainState>(mc, train_from_json(meta.at("train")),
                                         Vocabulary::from_words(meta.at("vocab")),
                                         meta.at("feature_dim").get<int>());
    state->step = meta.at("step");
    state->model_opt.set_steps(meta.at("adam_model_t"));
    state->mu_opt.set_steps(meta.at("adam_mu_t"));
  } catch (const json::exception& e) {
    throw FormatError("checkpoint " + path.string() + " has corrupt metadata: " + e.what());
  }

  std::unordered_map<std::string, ag::Matrix*> targets;
  std::vector<ag::Var> keep;
  for (auto& [name, var] : state->model->named_parameters()) {
    keep.push_back(var);
    targets.emplace("param/" + name, &keep.back().mutable_value());
  }
  for (auto& [name, m] : optimizer_slots(*state)) targets.emplace(name, m);

  const auto count = rd.uint(4);
  if (count != targets.size()) {
    throw FormatError("checkpoint " + path.string() + " holds " + std::to_string(count) +
                      " tensors, expected " + std::to_string(targets.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = rd.string(4096);
    const auto it = targets.find(name);
    if (it == targets.end()) throw FormatError("checkpoint has unexpected tensor '" + name + "'");
    ag::Matrix& dst = *it->second;
    const auto rows = rd.uint(4);
    const auto cols = rd.uint(4);
    if (static_cast<ag::Index>(rows) != dst.rows() || static_cast<ag::Index>(cols) != dst.cols()) {
      throw FormatError("checkpoint tensor '" + name + "' has the wrong shape");
    }
    for (ag::Index r = 0; r < dst.rows(); ++r) {
      for (ag::Index c = 0; c < dst.cols(); ++c) dst(r, c) = std::bit_cast<double>(rd.uint(8));
    }
    targets.erase(it);
  }
  char trailer[4];
  rd.bytes(trailer, 4);
  if (!std::equal(trailer, trailer + 4, kCheckpointTrailer) ||
      in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("checkpoint " + path.string() + " has a corrupt trailer");
  }
  return state;
}

}  // namespace ccr
