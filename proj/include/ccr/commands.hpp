#pragma once

// Command implementations behind the `ccr` executable. Each takes a fully
// resolved RunConfig and reports progress on `log`.

#include "ccr/config.hpp"
#include "ccr/infer_eval.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ccr {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

// Data root from the environment (CCR_DATA_ROOT), if set.
std::optional<std::filesystem::path> data_root_from_env();

struct LoadedData {
  std::vector<DatasetRecord> records;
  std::vector<Sample> samples;
  std::vector<std::optional<Span>> gt_spans;
};

LoadedData load_dataset(const std::filesystem::path& manifest, const Vocabulary& vocab, int max_query,
                        const std::optional<std::filesystem::path>& data_root);

// Writes manifest.jsonl and features/<video_id>.fmat under out_dir, which
// must already exist. Returns the manifest path.
std::filesystem::path cmd_synth(const RunConfig& cfg, std::ostream& log);

struct TrainOutputs {
  std::filesystem::path checkpoint;
  std::filesystem::path log_jsonl;
  std::filesystem::path loss_csv;
  std::vector<LossBundle> losses;
};

// Trains to the `steps` budget (continuing from `resume` when set) and writes
// checkpoint.ccrc, train_log.jsonl and loss_curve.csv under out_dir.
TrainOutputs cmd_train(const RunConfig& cfg, std::ostream& log);

struct EvalOutputs {
  EvalReport report;
  std::vector<Prediction> predictions;
};

// Ranks every manifest record with `checkpoint` and writes predictions.jsonl,
// report.txt, report.json and record_ious.csv under out_dir.
EvalOutputs cmd_eval(const RunConfig& cfg, std::ostream& log);

// Ranks one query against one feature file.
Prediction cmd_localize(const RunConfig& cfg, const std::filesystem::path& features,
                        const std::string& query, double duration_s);

struct AblationCell {
  CounterfactualStrategy strategy;
  AggregatorKind aggregator;
  RunConfig config;
  EvalReport report;
  std::string data_hash;  // digest of the training data the cell consumed
};

// Trains and evaluates every strategy x aggregator combination on the same
// data and seed, writing one sub-directory per cell plus ablation.txt and
// ablation.json under out_dir.
std::vector<AblationCell> cmd_ablate(const RunConfig& cfg, std::ostream& log);

std::string format_ablation(const std::vector<AblationCell>& cells);

// Stable digest of a sample set (features and token ids).
std::string dataset_digest(const std::vector<Sample>& samples);

}  // namespace ccr
