#pragma once

// Two-group optimization: the fusion module, projection, embeddings and any
// learned aggregator follow the total loss; mu follows the KL objective alone.

#include "ccr/data.hpp"
#include "ccr/losses.hpp"
#include "ccr/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace ccr {

struct TrainConfig {
  double lr_model = 4e-4;
  double lr_mu = 1e-3;
  int batch_size = 8;
  int steps = 1000;
  double p_mask = 1.0 / 3.0;
  double diversity_lambda = 0.15;
  Margins margins;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  // Std-dev of Gaussian noise added to video features at every step; fresh
  // noise keeps the decoder from memorizing videos by static feature detail.
  double feature_noise = 0.3;
  // Weight of the direct positive + reference reconstruction term added to
  // the total loss; 0 trains on contrastive + query + diversity alone.
  double recon_weight = 1.0;

  void validate() const;
};

// Adam with global-norm gradient clipping over one parameter group.
class Adam {
 public:
  Adam(std::vector<ag::Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void step(const std::vector<ag::Matrix>& grads, double clip_norm);
  void set_lr(double lr) { lr_ = lr; }

  std::int64_t steps() const { return t_; }
  std::vector<ag::Matrix>& first_moments() { return m_; }
  std::vector<ag::Matrix>& second_moments() { return v_; }
  const std::vector<ag::Matrix>& first_moments() const { return m_; }
  const std::vector<ag::Matrix>& second_moments() const { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  std::vector<ag::Var> params_;
  std::vector<ag::Matrix> m_;
  std::vector<ag::Matrix> v_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

struct TrainState {
  TrainState(const ModelConfig& model_cfg, const TrainConfig& train_cfg, Vocabulary vocab,
             int feature_dim);

  ModelConfig model_config;
  TrainConfig train_config;
  Vocabulary vocab;
  int feature_dim;
  std::unique_ptr<CcrModel> model;
  Adam model_opt;
  Adam mu_opt;
  std::int64_t step = 0;
};

struct TrainExample {
  const VideoFeatures* video = nullptr;
  const TokenizedQuery* query = nullptr;
  std::uint64_t mask_seed = 0;
};

// Cross-group gradient magnitudes seen during one step; both are zero when
// the objectives are isolated.
struct GradientProbe {
  double kl_on_model = 0.0;  // max |d kl / d theta| over the model group
  double total_on_mu = 0.0;  // max |d total / d mu|
};

LossBundle train_step(TrainState& state, std::span<const TrainExample> batch,
                      const MaskPolicy& policy, GradientProbe* probe = nullptr);

// Dataset positions for a step: consecutive slices of per-epoch permutations.
struct BatchSlot {
  std::size_t index;
  std::int64_t epoch;
};
std::vector<BatchSlot> batch_slots(std::size_t dataset_size, std::int64_t step, int batch_size,
                                   std::uint64_t seed);
std::uint64_t mask_seed(std::uint64_t seed, std::int64_t epoch, std::size_t pair_index);

struct Sample {
  VideoFeatures video;
  TokenizedQuery query;
};

// Runs steps until state.step reaches `until_step`. on_step sees every bundle.
void train(TrainState& state, std::span<const Sample> data, const MaskPolicy& policy,
           std::int64_t until_step,
           const std::function<void(std::int64_t, const LossBundle&)>& on_step = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
std::unique_ptr<TrainState> load_checkpoint(const std::filesystem::path& path);

}  // namespace ccr
