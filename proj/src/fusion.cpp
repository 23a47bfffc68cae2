#include "ccr/fusion.hpp"

#include "ccr/errors.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ccr {

namespace {

double inverse_softplus(double y) { return std::log(std::expm1(y)); }

double logit(double p) { return std::log(p / (1.0 - p)); }

constexpr double kCenterEps = 1e-6;

// logit of each frame's normalized position, frames taken as bin midpoints.
ag::Matrix location_logits(int frames) {
  ag::Matrix g(frames, 1);
  for (int t = 0; t < frames; ++t) g(t, 0) = logit((t + 0.5) / frames);
  return g;
}

}  // namespace

void FusionConfig::validate() const {
  if (hidden <= 0 || layers <= 0 || heads <= 0 || ff <= 0 || max_frames <= 0 || max_query <= 0) {
    throw ConfigError("fusion: dimensions and counts must be positive");
  }
  if (hidden % heads != 0) {
    throw ConfigError("fusion: hidden size " + std::to_string(hidden) +
                      " is not divisible by head count " + std::to_string(heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("fusion: dropout must lie in [0, 1)");
  if (num_positives < 1) throw ConfigError("fusion: need at least one positive proposal");
  if (!(width_bounds.min > 0.0 && width_bounds.min < width_bounds.max)) {
    throw ConfigError("fusion: need 0 < width min < width max");
  }
  if (!(initial_width > width_bounds.min && initial_width < width_bounds.max)) {
    throw ConfigError("fusion: initial width must lie strictly inside the width bounds");
  }
}

Eigen::MatrixXd video_positions(int frames, int dim) {
  Eigen::MatrixXd pe(frames, dim);
  const int pairs = (dim + 1) / 2;
  for (int t = 0; t < frames; ++t) {
    const double u = frames > 1 ? static_cast<double>(t) / (frames - 1) : 0.0;
    for (int i = 0; i < pairs; ++i) {
      const double freq = std::numbers::pi * std::pow(std::max(frames, 2), static_cast<double>(i) / pairs);
      pe(t, 2 * i) = std::sin(u * freq);
      if (2 * i + 1 < dim) pe(t, 2 * i + 1) = std::cos(u * freq);
    }
  }
  return pe;
}

Eigen::MatrixXd token_positions(int length, int dim) {
  Eigen::MatrixXd pe(length, dim);
  for (int p = 0; p < length; ++p) {
    for (int i = 0; i < dim; i += 2) {
      const double angle = p / std::pow(10000.0, static_cast<double>(i) / dim);
      pe(p, i) = std::sin(angle);
      if (i + 1 < dim) pe(p, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

FusionModel::Attention FusionModel::make_attention(const std::string& prefix, std::mt19937_64& rng) {
  const int d = cfg_.hidden;
  Attention a;
  a.wq = params_.add(prefix + ".wq", xavier_uniform(d, d, rng));
  a.bq = params_.add(prefix + ".bq", ag::Matrix::Zero(1, d));
  a.wk = params_.add(prefix + ".wk", xavier_uniform(d, d, rng));
  a.bk = params_.add(prefix + ".bk", ag::Matrix::Zero(1, d));
  a.wv = params_.add(prefix + ".wv", xavier_uniform(d, d, rng));
  a.bv = params_.add(prefix + ".bv", ag::Matrix::Zero(1, d));
  a.wo = params_.add(prefix + ".wo", xavier_uniform(d, d, rng));
  a.bo = params_.add(prefix + ".bo", ag::Matrix::Zero(1, d));
  return a;
}

FusionModel::Norm FusionModel::make_norm(const std::string& prefix) {
  return Norm{params_.add(prefix + ".gain", ag::Matrix::Ones(1, cfg_.hidden)),
              params_.add(prefix + ".bias", ag::Matrix::Zero(1, cfg_.hidden))};
}

FusionModel::FeedForward FusionModel::make_ff(const std::string& prefix, std::mt19937_64& rng) {
  FeedForward f;
  f.w1 = params_.add(prefix + ".w1", xavier_uniform(cfg_.hidden, cfg_.ff, rng));
  f.b1 = params_.add(prefix + ".b1", ag::Matrix::Zero(1, cfg_.ff));
  f.w2 = params_.add(prefix + ".w2", xavier_uniform(cfg_.ff, cfg_.hidden, rng));
  f.b2 = params_.add(prefix + ".b2", ag::Matrix::Zero(1, cfg_.hidden));
  return f;
}

FusionModel::EncoderLayer FusionModel::make_encoder_layer(const std::string& prefix,
                                                          std::mt19937_64& rng) {
  EncoderLayer l;
  l.self_attn = make_attention(prefix + ".self", rng);
  l.norm1 = make_norm(prefix + ".norm1");
  l.ff = make_ff(prefix + ".ff", rng);
  l.norm2 = make_norm(prefix + ".norm2");
  return l;
}

FusionModel::FusionModel(const FusionConfig& cfg, int vocab_size, int feature_dim,
                         std::uint64_t seed)
    : cfg_(cfg), vocab_size_(vocab_size), feature_dim_(feature_dim) {
  cfg_.validate();
  if (vocab_size <= kFirstWordId) throw ConfigError("fusion: vocabulary has no words");
  if (feature_dim <= 0) throw ConfigError("fusion: feature dimension must be positive");
  std::mt19937_64 rng(seed);
  const int d = cfg_.hidden;
  const int np = cfg_.num_positives;

  word_emb_ = params_.add("word_emb", uniform_matrix(vocab_size, d, 0.1, rng));
  video_w_ = params_.add("video_in.w", xavier_uniform(feature_dim, d, rng));
  video_b_ = params_.add("video_in.b", ag::Matrix::Zero(1, d));
  for (int l = 0; l < cfg_.layers; ++l) {
    query_enc_.push_back(make_encoder_layer("query_enc." + std::to_string(l), rng));
  }
  for (int l = 0; l < cfg_.layers; ++l) {
    video_enc_.push_back(make_encoder_layer("video_enc." + std::to_string(l), rng));
  }
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    DecoderLayer dl;
    dl.self_attn = make_attention(p + ".self", rng);
    dl.norm1 = make_norm(p + ".norm1");
    dl.cross_attn = make_attention(p + ".cross", rng);
    dl.norm2 = make_norm(p + ".norm2");
    dl.ff = make_ff(p + ".ff", rng);
    dl.norm3 = make_norm(p + ".norm3");
    decoder_.push_back(std::move(dl));
  }
  ground_attn_ = make_attention("ground.cross", rng);
  ground_norm_ = make_norm("ground.norm");
  pool_w_ = params_.add("head.pool", xavier_uniform(d, np, rng));
  head_w1_ = params_.add("head.w1", xavier_uniform(d, d, rng));
  head_b1_ = params_.add("head.b1", ag::Matrix::Zero(1, d));
  head_w2_ = params_.add("head.w2", uniform_matrix(d, 2, 0.01, rng));
  head_b2_ = params_.add("head.b2", ag::Matrix::Zero(1, 2));
  // Initial centers spread evenly over the clip; widths start at initial_width.
  ag::Matrix offset(np, 2);
  for (int i = 0; i < np; ++i) {
    offset(i, 0) = logit(static_cast<double>(i + 1) / (np + 1));
    offset(i, 1) = inverse_softplus(cfg_.initial_width);
  }
  head_offset_ = params_.add("head.offset", offset);
  proj_w_ = params_.add("proj.w", xavier_uniform(d, vocab_size, rng));
  proj_b_ = params_.add("proj.b", ag::Matrix::Zero(1, vocab_size));
}

ag::Var FusionModel::attend(const Attention& a, const ag::Var& xq, const ag::Var& xkv) const {
  const ag::Var q = ag::add_row(ag::matmul(xq, a.wq), a.bq);
  const ag::Var k = ag::add_row(ag::matmul(xkv, a.wk), a.bk);
  const ag::Var v = ag::add_row(ag::matmul(xkv, a.wv), a.bv);
  const int dk = cfg_.hidden / cfg_.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<ag::Var> heads;
  heads.reserve(static_cast<std::size_t>(cfg_.heads));
  for (int h = 0; h < cfg_.heads; ++h) {
    const ag::Var qh = ag::slice_cols(q, h * dk, dk);
    const ag::Var kh = ag::slice_cols(k, h * dk, dk);
    const ag::Var vh = ag::slice_cols(v, h * dk, dk);
    const ag::Var attn = ag::softmax_rows(ag::scale(ag::matmul(qh, ag::transpose(kh)), inv_sqrt));
    heads.push_back(ag::matmul(attn, vh));
  }
  const ag::Var merged = cfg_.heads == 1 ? heads.front() : ag::concat_cols(heads);
  return ag::add_row(ag::matmul(merged, a.wo), a.bo);
}

ag::Var FusionModel::feed_forward(const FeedForward& f, const ag::Var& x) const {
  const ag::Var h = ag::gelu(ag::add_row(ag::matmul(x, f.w1), f.b1));
  return ag::add_row(ag::matmul(h, f.w2), f.b2);
}

ag::Var FusionModel::norm(const Norm& n, const ag::Var& x) const {
  return ag::layer_norm_rows(x, n.gain, n.bias);
}

ag::Var FusionModel::drop(const ag::Var& x, const ForwardOptions& opts) const {
  if (!opts.training || cfg_.dropout <= 0.0) return x;
  if (!opts.rng) throw std::logic_error("fusion: training with dropout needs an rng");
  return ag::dropout(x, cfg_.dropout, *opts.rng);
}

ag::Var FusionModel::encoder_layer(const EncoderLayer& l, const ag::Var& x,
                                   const ForwardOptions& opts) const {
  ag::Var y = norm(l.norm1, x + drop(attend(l.self_attn, x, x), opts));
  return norm(l.norm2, y + drop(feed_forward(l.ff, y), opts));
}

void FusionModel::check_inputs(const VideoFeatures& video, const MaskedQuery& query) const {
  if (video.feature_dim() != feature_dim_) {
    throw DataError("video '" + video.video_id + "' has feature dimension " +
                    std::to_string(video.feature_dim()) + ", model expects " +
                    std::to_string(feature_dim_));
  }
  if (video.frame_count() < 2 || video.frame_count() > cfg_.max_frames) {
    throw DataError("video '" + video.video_id + "' has " + std::to_string(video.frame_count()) +
                    " frames, outside [2, " + std::to_string(cfg_.max_frames) + "]");
  }
  if (query.tokens.empty() || static_cast<int>(query.tokens.size()) > cfg_.max_query) {
    throw DataError("query length " + std::to_string(query.tokens.size()) + " outside [1, " +
                    std::to_string(cfg_.max_query) + "]");
  }
  for (int id : query.tokens) {
    if (id < 0 || id >= vocab_size_) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
  }
  if (query.mask_positions.empty()) throw DataError("query has no masked positions");
}

ag::Var FusionModel::video_input(const VideoFeatures& video) const {
  return ag::matmul(ag::constant(video.frames.cast<double>()), video_w_);
}

ag::Var FusionModel::query_states(const MaskedQuery& query, const ForwardOptions& opts) const {
  const int len = static_cast<int>(query.tokens.size());
  ag::Var x = ag::scale(ag::gather_rows(word_emb_, query.tokens), std::sqrt(cfg_.hidden));
  x = x + ag::constant(token_positions(len, cfg_.hidden));
  x = drop(x, opts);
  for (const auto& l : query_enc_) x = encoder_layer(l, x, opts);
  return x;
}

ag::Var FusionModel::video_memory(const ag::Var& projected_frames, const ag::Var& weights,
                                  const ForwardOptions& opts) const {
  // Scaling the projected rows equals projecting the scaled raw frames.
  // No positional encoding here: reconstruction sees what a proposal covers,
  // not where it sits, so it cannot learn to favor fixed locations.
  ag::Var x = ag::add_row(ag::scale_rows(projected_frames, weights), video_b_);
  x = drop(x, opts);
  for (const auto& l : video_enc_) x = encoder_layer(l, x, opts);
  return x;
}

ag::Var FusionModel::decode(const ag::Var& query_states, const ag::Var& memory,
                            std::span<const int> mask_positions, const ForwardOptions& opts) const {
  ag::Var x = query_states;
  for (const auto& l : decoder_) {
    x = norm(l.norm1, x + drop(attend(l.self_attn, x, x), opts));
    x = norm(l.norm2, x + drop(attend(l.cross_attn, x, memory), opts));
    x = norm(l.norm3, x + drop(feed_forward(l.ff, x), opts));
  }
  return ag::gather_rows(x, mask_positions);
}

ProposalHead FusionModel::proposal_head(const ag::Var& full_memory, const ag::Var& query_states,
                                        const ForwardOptions& opts) const {
  const int frames = static_cast<int>(full_memory.rows());
  const ag::Var located = full_memory + ag::constant(video_positions(frames, cfg_.hidden));
  const ag::Var grounded =
      norm(ground_norm_, located + drop(attend(ground_attn_, located, query_states), opts));
  // One attention pooling per positive: N^p x T weights over frames.
  const ag::Var pool = ag::softmax_rows(ag::transpose(ag::matmul(grounded, pool_w_)));
  const ag::Var summary = ag::matmul(pool, grounded);
  const ag::Var h = ag::gelu(ag::add_row(ag::matmul(summary, head_w1_), head_b1_));
  // Center logits lean on where each pooling attends: the pooled location
  // logit moves a proposal toward the frames it selects.
  const ag::Var location = ag::matmul(pool, ag::constant(location_logits(frames)));
  const ag::Var zeros = ag::constant(ag::Matrix::Zero(location.rows(), 1));
  const std::vector<ag::Var> loc_parts{location, zeros};
  const ag::Var raw =
      ag::add_row(ag::matmul(h, head_w2_), head_b2_) + head_offset_ + ag::concat_cols(loc_parts);
  ProposalHead out;
  out.centers = ag::clamp(ag::sigmoid(ag::slice_cols(raw, 0, 1)), kCenterEps, 1.0 - kCenterEps);
  out.widths = ag::clamp(ag::softplus(ag::slice_cols(raw, 1, 1)), cfg_.width_bounds.min,
                         cfg_.width_bounds.max);
  return out;
}

ag::Var FusionModel::project(const ag::Var& hidden) const {
  return ag::add_row(ag::matmul(hidden, proj_w_), proj_b_);
}

FusionOutput FusionModel::encode(const VideoFeatures& video, const MaskedQuery& query,
                                 const TemporalWeights& weights) const {
  check_inputs(video, query);
  if (weights.values.size() != video.frame_count()) {
    throw DataError("temporal weights have " + std::to_string(weights.values.size()) +
                    " entries for " + std::to_string(video.frame_count()) + " frames");
  }
  ag::NoGradGuard no_grad;
  const ForwardOptions eval;
  const ag::Var input = video_input(video);
  const ag::Var qs = query_states(query, eval);
  const ag::Var memory = video_memory(input, ag::constant(weights.values), eval);
  const ag::Var full = video_memory(input, ag::constant(Eigen::VectorXd::Ones(video.frame_count())), eval);
  const ProposalHead head = proposal_head(full, qs, eval);

  FusionOutput out;
  out.masked_hidden = decode(qs, memory, query.mask_positions, eval).value();
  for (int i = 0; i < cfg_.num_positives; ++i) {
    out.proposal_params.emplace_back(head.centers.value()(i, 0), head.widths.value()(i, 0));
  }
  return out;
}

ProposalSet FusionModel::propose(const VideoFeatures& video, const MaskedQuery& query) const {
  check_inputs(video, query);
  ag::NoGradGuard no_grad;
  const ForwardOptions eval;
  const ag::Var input = video_input(video);
  const ag::Var qs = query_states(query, eval);
  const ag::Var full = video_memory(input, ag::constant(Eigen::VectorXd::Ones(video.frame_count())), eval);
  const ProposalHead head = proposal_head(full, qs, eval);

  ProposalSet set;
  for (int i = 0; i < cfg_.num_positives; ++i) {
    const Proposal p{head.centers.value()(i, 0), head.widths.value()(i, 0), ProposalKind::positive};
    set.positives.push_back(p);
    const auto [left, right] = mine_negatives(p, cfg_.mining);
    set.negatives.push_back(left);
    set.negatives.push_back(right);
  }
  set.reference = Proposal{0.5, cfg_.width_bounds.max, ProposalKind::reference};
  return set;
}

Eigen::MatrixXd FusionModel::project(const Eigen::MatrixXd& hidden) const {
  if (hidden.cols() != cfg_.hidden) {
    throw std::invalid_argument("project: expected " + std::to_string(cfg_.hidden) + " columns");
  }
  ag::NoGradGuard no_grad;
  return project(ag::constant(hidden)).value();
}

Eigen::MatrixXd FusionModel::side_hidden(const MaskedQuery& query) const {
  ag::NoGradGuard no_grad;
  const ag::Var qs = query_states(query, ForwardOptions{});
  return ag::gather_rows(qs, query.mask_positions).value();
}

}  // namespace ccr
