#pragma once

// Inference-time proposal ranking (vote winner first, then ascending debiased
// reconstruction loss) and the recall / mean-IoU evaluation metrics.

#include "ccr/data.hpp"
#include "ccr/model.hpp"
#include "ccr/proposals.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ccr {

// Temporal IoU; 0 when the union has zero length. Throws if start > end.
double iou(const Span& a, const Span& b);

// Index of the positive with the largest summed IoU against its peers; ties
// go to the lowest loss, then the lowest index.
std::size_t vote_select(std::span<const Span> segments, std::span<const double> losses);

struct RankedSegment {
  Span segment;
  double score = 0.0;  // debiased reconstruction loss
  Proposal proposal;
};

struct Prediction {
  std::string video_id;
  std::vector<RankedSegment> ranked;
};

// Orders already-scored positives: vote winner first, the rest by ascending
// score (ties by index).
Prediction order_by_vote(std::string video_id, std::vector<RankedSegment> candidates);

struct InferOptions {
  double p_mask = 1.0 / 3.0;
  double gamma = 1.0;
  std::uint64_t seed = 0;
  MaskPolicy policy;
};

struct InferItem {
  const VideoFeatures* video = nullptr;
  const TokenizedQuery* query = nullptr;
  std::uint64_t key = 0;  // mixed with the seed to derive the mask stream
};

// Ranks every item. Items are processed as one batch so the average and
// random_selected strategies see the same batch statistics as in training.
std::vector<Prediction> rank_proposals(const CcrModel& model, std::span<const InferItem> items,
                                       const InferOptions& opts);

// Mean over items and positives of (mean negative CE - positive CE), with
// the CE taken on the debiased logits and on the aggregated logits alone.
// Larger means positives are separated more clearly from their negatives.
// Without the counterfactual subtraction both fields coincide.
struct MarginReport {
  double debiased = 0.0;
  double aggregated = 0.0;
};
MarginReport negative_margins(const CcrModel& model, std::span<const InferItem> items,
                              const InferOptions& opts);

// Single pre-masked query; used by the localize command and by tests that
// recompute scores independently. Uses the model's own mean as the batch
// statistic for the average / random_selected strategies.
Prediction rank_proposals(const CcrModel& model, const VideoFeatures& video,
                          const MaskedQuery& query, double gamma = 1.0);

inline constexpr std::array<int, 2> kRecallAt{1, 5};
inline constexpr std::array<double, 4> kIouThresholds{0.1, 0.3, 0.5, 0.7};

struct EvalReport {
  // recall[a][b]: fraction of records whose best IoU among the top-a
  // predictions exceeds threshold b.
  std::array<std::array<double, kIouThresholds.size()>, kRecallAt.size()> recall{};
  std::array<double, kRecallAt.size()> mean_iou{};
  std::size_t count = 0;
  std::size_t skipped = 0;  // records without ground truth
};

// Per-record IoUs of the ranked predictions against ground truth.
struct RecordIous {
  std::string video_id;
  std::vector<double> ious;
};

EvalReport evaluate(std::span<const Prediction> predictions,
                    std::span<const std::optional<Span>> gt_spans,
                    std::vector<RecordIous>* per_record = nullptr);

// One JSON object per record.
void write_predictions(const std::filesystem::path& path, std::span<const Prediction> predictions);
std::string format_report(const EvalReport& report);
std::string report_json(const EvalReport& report);
EvalReport parse_report_json(const std::string& text);
void write_report(const std::filesystem::path& text_path, const std::filesystem::path& json_path,
                  const EvalReport& report);

}  // namespace ccr
