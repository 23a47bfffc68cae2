#pragma once

// Cross-modal interaction module and the shared vocabulary projection.
//
// Layout:
//   query encoder   masked-query tokens -> L x D unimodal states (side branch input)
//   video encoder   proposal-scaled frames -> T x D memory
//   decoder         query states attend to the video memory -> masked hidden rows
//   proposal head   full video grounded on the query -> N^p (center, width)
//   projection      D -> |V| logits, one set of weights for both branches

#include "ccr/autograd.hpp"
#include "ccr/data.hpp"
#include "ccr/parameters.hpp"
#include "ccr/proposals.hpp"

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace ccr {

struct FusionConfig {
  int hidden = 32;
  int layers = 2;
  int heads = 2;
  int ff = 64;
  double dropout = 0.0;
  int max_frames = 512;
  int max_query = 32;
  int num_positives = 2;
  WidthBounds width_bounds;
  NegativeMining mining;
  double initial_width = 0.15;

  void validate() const;
};

struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // dropout stream; required when training with dropout
};

struct FusionOutput {
  Eigen::MatrixXd masked_hidden;  // |mask_positions| x D
  std::vector<std::pair<double, double>> proposal_params;  // (center, width) per positive
};

// Differentiable proposal head outputs, each N^p x 1.
struct ProposalHead {
  ag::Var centers;
  ag::Var widths;
};

class FusionModel {
 public:
  FusionModel(const FusionConfig& cfg, int vocab_size, int feature_dim, std::uint64_t seed);

  const FusionConfig& config() const { return cfg_; }
  int vocab_size() const { return vocab_size_; }
  int feature_dim() const { return feature_dim_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // Graph-building forward pieces.
  ag::Var video_input(const VideoFeatures& video) const;  // T x D, unscaled projection
  ag::Var query_states(const MaskedQuery& query, const ForwardOptions& opts) const;
  ag::Var video_memory(const ag::Var& projected_frames, const ag::Var& weights,
                       const ForwardOptions& opts) const;
  ag::Var decode(const ag::Var& query_states, const ag::Var& memory,
                 std::span<const int> mask_positions, const ForwardOptions& opts) const;
  ProposalHead proposal_head(const ag::Var& full_memory, const ag::Var& query_states,
                             const ForwardOptions& opts) const;
  ag::Var project(const ag::Var& hidden) const;

  // Value-level API, evaluation mode.
  FusionOutput encode(const VideoFeatures& video, const MaskedQuery& query,
                      const TemporalWeights& weights) const;
  ProposalSet propose(const VideoFeatures& video, const MaskedQuery& query) const;
  Eigen::MatrixXd project(const Eigen::MatrixXd& hidden) const;
  // Query-only hidden rows at the masked positions.
  Eigen::MatrixXd side_hidden(const MaskedQuery& query) const;

  void check_inputs(const VideoFeatures& video, const MaskedQuery& query) const;

 private:
  struct Attention {
    ag::Var wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct Norm {
    ag::Var gain, bias;
  };
  struct FeedForward {
    ag::Var w1, b1, w2, b2;
  };
  struct EncoderLayer {
    Attention self_attn;
    Norm norm1;
    FeedForward ff;
    Norm norm2;
  };
  struct DecoderLayer {
    Attention self_attn;
    Norm norm1;
    Attention cross_attn;
    Norm norm2;
    FeedForward ff;
    Norm norm3;
  };

  Attention make_attention(const std::string& prefix, std::mt19937_64& rng);
  Norm make_norm(const std::string& prefix);
  FeedForward make_ff(const std::string& prefix, std::mt19937_64& rng);
  EncoderLayer make_encoder_layer(const std::string& prefix, std::mt19937_64& rng);

  ag::Var attend(const Attention& a, const ag::Var& xq, const ag::Var& xkv) const;
  ag::Var feed_forward(const FeedForward& f, const ag::Var& x) const;
  ag::Var norm(const Norm& n, const ag::Var& x) const;
  ag::Var drop(const ag::Var& x, const ForwardOptions& opts) const;
  ag::Var encoder_layer(const EncoderLayer& l, const ag::Var& x, const ForwardOptions& opts) const;

  FusionConfig cfg_;
  int vocab_size_;
  int feature_dim_;
  ParameterStore params_;

  ag::Var word_emb_;
  ag::Var video_w_, video_b_;
  std::vector<EncoderLayer> query_enc_;
  std::vector<EncoderLayer> video_enc_;
  std::vector<DecoderLayer> decoder_;
  Attention ground_attn_;
  Norm ground_norm_;
  ag::Var pool_w_;
  ag::Var head_w1_, head_b1_, head_w2_, head_b2_, head_offset_;
  ag::Var proj_w_, proj_b_;
};

// Sinusoidal encodings. Video rows use normalized time t / (T - 1) so the
// lowest frequency is a half period across the clip; query rows use the
// token index.
Eigen::MatrixXd video_positions(int frames, int dim);
Eigen::MatrixXd token_positions(int length, int dim);

}  // namespace ccr
