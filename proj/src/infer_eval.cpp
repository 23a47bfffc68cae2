#include "ccr/infer_eval.hpp"

#include "ccr/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ccr {

using nlohmann::json;

double iou(const Span& a, const Span& b) {
  if (a.start > a.end || b.start > b.end) throw std::invalid_argument("iou: segment start exceeds end");
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = std::max(a.end, b.end) - std::min(a.start, b.start);
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

std::size_t vote_select(std::span<const Span> segments, std::span<const double> losses) {
  if (segments.empty()) throw std::invalid_argument("vote_select: no proposals");
  if (losses.size() != segments.size()) throw std::invalid_argument("vote_select: size mismatch");
  std::size_t best = 0;
  double best_votes = -1.0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    double votes = 0.0;
    for (std::size_t j = 0; j < segments.size(); ++j) {
      if (j != i) votes += iou(segments[i], segments[j]);
    }
    if (votes > best_votes || (votes == best_votes && losses[i] < losses[best])) {
      best = i;
      best_votes = votes;
    }
  }
  return best;
}

Prediction order_by_vote(std::string video_id, std::vector<RankedSegment> candidates) {
  std::vector<Span> segments;
  std::vector<double> losses;
  for (const auto& c : candidates) {
    segments.push_back(c.segment);
    losses.push_back(c.score);
  }
  const std::size_t winner = vote_select(segments, losses);
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (i != winner) rest.push_back(i);
  }
  std::stable_sort(rest.begin(), rest.end(), [&](std::size_t a, std::size_t b) {
    return candidates[a].score < candidates[b].score;
  });
  Prediction out;
  out.video_id = std::move(video_id);
  out.ranked.push_back(candidates[winner]);
  for (std::size_t i : rest) out.ranked.push_back(candidates[i]);
  return out;
}

namespace {

std::vector<RankedSegment> scored_positives(const PairForward& pair, double duration_s, double gamma) {
  std::vector<RankedSegment> out;
  for (const auto& p : pair.positives) {
    out.push_back(RankedSegment{weights_to_segment(p.proposal, duration_s, gamma), p.score.scalar(),
                                p.proposal});
  }
  return out;
}

// Evaluation-mode forward of every item, finished against the batch's
// main-branch summaries. Callers hold a NoGradGuard.
std::vector<PairForward> forward_items(const CcrModel& model, std::span<const InferItem> items,
                                       const InferOptions& opts) {
  PairOptions popts;
  std::vector<PairForward> pairs;
  pairs.reserve(items.size());
  for (const auto& item : items) {
    std::mt19937_64 rng(mix_seed(opts.seed, 0xe7a1, item.key));
    const MaskedQuery mq = mask_query(*item.query, opts.p_mask, rng, opts.policy);
    pairs.push_back(forward_branches(model, *item.video, mq, popts));
  }
  std::vector<Eigen::RowVectorXd> summaries;
  for (const auto& p : pairs) summaries.push_back(p.main_summary());
  std::mt19937_64 select_rng(mix_seed(opts.seed, 0x5e1ec7));
  for (auto& p : pairs) finish_pair(model, p, summaries, &select_rng, popts);
  return pairs;
}

}  // namespace

std::vector<Prediction> rank_proposals(const CcrModel& model, std::span<const InferItem> items,
                                       const InferOptions& opts) {
  ag::NoGradGuard no_grad;
  const std::vector<PairForward> pairs = forward_items(model, items, opts);
  std::vector<Prediction> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    out.push_back(order_by_vote(items[i].video->video_id,
                                scored_positives(pairs[i], items[i].video->duration_s, opts.gamma)));
  }
  return out;
}

MarginReport negative_margins(const CcrModel& model, std::span<const InferItem> items,
                              const InferOptions& opts) {
  if (items.empty()) throw std::invalid_argument("negative_margins: no items");
  ag::NoGradGuard no_grad;
  const std::vector<PairForward> pairs = forward_items(model, items, opts);
  MarginReport out;
  std::size_t n = 0;
  for (const auto& pair : pairs) {
    const std::vector<int>& targets = pair.query.targets;
    auto ce = [&](const ag::Var& logits) { return ag::cross_entropy_rows(logits, targets).scalar(); };
    for (std::size_t j = 0; j < pair.positives.size(); ++j) {
      const RoleOutput& p = pair.positives[j];
      const RoleOutput& n1 = pair.negatives[2 * j];
      const RoleOutput& n2 = pair.negatives[2 * j + 1];
      out.debiased += 0.5 * (ce(n1.debiased) + ce(n2.debiased)) - ce(p.debiased);
      out.aggregated += 0.5 * (ce(n1.aggregated) + ce(n2.aggregated)) - ce(p.aggregated);
      ++n;
    }
  }
  out.debiased /= static_cast<double>(n);
  out.aggregated /= static_cast<double>(n);
  return out;
}

Prediction rank_proposals(const CcrModel& model, const VideoFeatures& video, const MaskedQuery& query,
                          double gamma) {
  ag::NoGradGuard no_grad;
  PairOptions popts;
  PairForward pair = forward_branches(model, video, query, popts);
  const std::vector<Eigen::RowVectorXd> summaries{pair.main_summary()};
  std::mt19937_64 select_rng(0);
  finish_pair(model, pair, summaries, &select_rng, popts);
  return order_by_vote(video.video_id, scored_positives(pair, video.duration_s, gamma));
}

EvalReport evaluate(std::span<const Prediction> predictions,
                    std::span<const std::optional<Span>> gt_spans, std::vector<RecordIous>* per_record) {
  if (predictions.size() != gt_spans.size()) {
    throw std::invalid_argument("evaluate: predictions and ground truth are not aligned");
  }
  EvalReport report;
  for (std::size_t r = 0; r < predictions.size(); ++r) {
    if (!gt_spans[r]) {
      ++report.skipped;
      continue;
    }
    const auto& ranked = predictions[r].ranked;
    if (ranked.empty()) throw std::invalid_argument("evaluate: empty prediction");
    std::vector<double> ious;
    for (const auto& s : ranked) ious.push_back(iou(s.segment, *gt_spans[r]));
    for (std::size_t a = 0; a < kRecallAt.size(); ++a) {
      const std::size_t top = std::min<std::size_t>(static_cast<std::size_t>(kRecallAt[a]), ious.size());
      double best = 0.0, total = 0.0;
      for (std::size_t k = 0; k < top; ++k) {
        best = std::max(best, ious[k]);
        total += ious[k];
      }
      for (std::size_t b = 0; b < kIouThresholds.size(); ++b) {
        if (best > kIouThresholds[b]) report.recall[a][b] += 1.0;
      }
      report.mean_iou[a] += total / static_cast<double>(top);
    }
    ++report.count;
    if (per_record) per_record->push_back(RecordIous{predictions[r].video_id, std::move(ious)});
  }
  if (report.count > 0) {
    const double n = static_cast<double>(report.count);
    for (auto& row : report.recall) {
      for (double& v : row) v /= n;
    }
    for (double& v : report.mean_iou) v /= n;
  }
  return report;
}

void write_predictions(const std::filesystem::path& path, std::span<const Prediction> predictions) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write predictions " + path.string());
  for (const auto& p : predictions) {
    json segments = json::array();
    json scores = json::array();
    for (const auto& r : p.ranked) {
      segments.push_back({r.segment.start, r.segment.end});
      scores.push_back(r.score);
    }
    out << json{{"video_id", p.video_id}, {"segments", segments}, {"scores", scores}}.dump() << '\n';
  }
  if (!out) throw DataError("failed writing predictions " + path.string());
}

namespace {

std::string recall_key(int a, double b) {
  std::ostringstream os;
  os << "R@" << a << ",IoU=" << b;
  return os.str();
}

std::string miou_key(int a) { return "R@" + std::to_string(a) + ",mIoU"; }

}  // namespace

std::string format_report(const EvalReport& report) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << std::left << std::setw(6) << "a";
  for (double b : kIouThresholds) os << std::right << std::setw(10) << ("IoU=" + [&] {
    std::ostringstream t;
    t << b;
    return t.str();
  }());
  os << std::right << std::setw(10) << "mIoU" << '\n';
  for (std::size_t a = 0; a < kRecallAt.size(); ++a) {
    os << std::left << std::setw(6) << ("R@" + std::to_string(kRecallAt[a]));
    for (std::size_t b = 0; b < kIouThresholds.size(); ++b) {
      os << std::right << std::setw(10) << 100.0 * report.recall[a][b];
    }
    os << std::right << std::setw(10) << 100.0 * report.mean_iou[a] << '\n';
  }
  os << "records " << report.count << ", skipped " << report.skipped << '\n';
  return os.str();
}

std::string report_json(const EvalReport& report) {
  json j;
  for (std::size_t a = 0; a < kRecallAt.size(); ++a) {
    for (std::size_t b = 0; b < kIouThresholds.size(); ++b) {
      j[recall_key(kRecallAt[a], kIouThresholds[b])] = 100.0 * report.recall[a][b];
    }
    j[miou_key(kRecallAt[a])] = 100.0 * report.mean_iou[a];
  }
  j["count"] = report.count;
  j["skipped"] = report.skipped;
  return j.dump(2);
}

EvalReport parse_report_json(const std::string& text) {
  EvalReport report;
  try {
    const json j = json::parse(text);
    for (std::size_t a = 0; a < kRecallAt.size(); ++a) {
      for (std::size_t b = 0; b < kIouThresholds.size(); ++b) {
        report.recall[a][b] = j.at(recall_key(kRecallAt[a], kIouThresholds[b])).get<double>() / 100.0;
      }
      report.mean_iou[a] = j.at(miou_key(kRecallAt[a])).get<double>() / 100.0;
    }
    report.count = j.at("count");
    report.skipped = j.at("skipped");
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
  return report;
}

void write_report(const std::filesystem::path& text_path, const std::filesystem::path& json_path,
                  const EvalReport& report) {
  std::ofstream text(text_path);
  if (!text) throw DataError("cannot write report " + text_path.string());
  text << format_report(report);
  std::ofstream js(json_path);
  if (!js) throw DataError("cannot write report " + json_path.string());
  js << report_json(report) << '\n';
}

}  // namespace ccr
