#include "ccr/commands.hpp"

#include "ccr/errors.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace ccr {

namespace fs = std::filesystem;
using nlohmann::json;

std::optional<fs::path> data_root_from_env() {
  if (const char* v = std::getenv("CCR_DATA_ROOT"); v && *v) return fs::path(v);
  return std::nullopt;
}

LoadedData load_dataset(const fs::path& manifest, const Vocabulary& vocab, int max_query,
                        const std::optional<fs::path>& data_root) {
  LoadedData out;
  out.records = read_manifest(manifest, &vocab, max_query);
  const fs::path dir = manifest.parent_path();
  for (const auto& rec : out.records) {
    VideoFeatures video = load_features(resolve_feature_path(rec.feature_path, dir, data_root));
    video.video_id = rec.video_id;
    video.duration_s = rec.duration_s;
    out.samples.push_back(Sample{std::move(video), rec.query});
    out.gt_spans.push_back(rec.gt_span);
  }
  if (out.samples.empty()) throw DataError("manifest " + manifest.string() + " has no records");
  return out;
}

namespace {

fs::path require_dir(const RunConfig& cfg) {
  const fs::path dir = cfg.get("out_dir");
  if (dir.empty() || !fs::is_directory(dir)) {
    throw DataError("output directory '" + dir.string() + "' does not exist");
  }
  return dir;
}

fs::path require_path(const RunConfig& cfg, const std::string& key) {
  const std::string& v = cfg.get(key);
  if (v.empty()) throw ConfigError("config key '" + key + "' must be set");
  return v;
}

json bundle_json(std::int64_t step, const LossBundle& b) {
  return json{{"step", step},
              {"recon_positive", b.recon_positive},
              {"recon_reference", b.recon_reference},
              {"recon_negative1", b.recon_negative1},
              {"recon_negative2", b.recon_negative2},
              {"contrastive", b.contrastive},
              {"query", b.query},
              {"diversity", b.diversity},
              {"total", b.total},
              {"recon", b.recon},
              {"objective", b.objective},
              {"kl", b.kl},
              {"margin_positive", b.margin_positive},
              {"margin_negative", b.margin_negative}};
}

// Trains `state` to its step budget on `data`, streaming logs under dir.
TrainOutputs run_training(TrainState& state, const std::vector<Sample>& data, const MaskPolicy& policy,
                          const fs::path& dir, bool append, std::ostream& log) {
  TrainOutputs out;
  out.checkpoint = dir / "checkpoint.ccrc";
  out.log_jsonl = dir / "train_log.jsonl";
  out.loss_csv = dir / "loss_curve.csv";
  const auto mode = append ? std::ios::app : std::ios::trunc;
  std::ofstream jsonl(out.log_jsonl, mode);
  std::ofstream csv(out.loss_csv, mode);
  if (!jsonl || !csv) throw DataError("cannot write training logs under " + dir.string());
  if (!append) csv << "step,total,contrastive,query,diversity,kl,recon_positive,recon_reference,objective\n";
  csv << std::setprecision(17);

  const TrainConfig& tc = state.train_config;
  const std::int64_t every = tc.checkpoint_every;
  try {
    train(state, data, policy, tc.steps, [&](std::int64_t step, const LossBundle& b) {
      out.losses.push_back(b);
      jsonl << bundle_json(step, b).dump() << '\n';
      csv << step << ',' << b.total << ',' << b.contrastive << ',' << b.query << ',' << b.diversity
          << ',' << b.kl << ',' << b.recon_positive << ',' << b.recon_reference << ',' << b.objective
          << '\n';
      if (every > 0 && (step + 1) % every == 0) {
        save_checkpoint(state, dir / ("checkpoint_step" + std::to_string(step + 1) + ".ccrc"));
      }
      if ((step + 1) % 100 == 0) {
        log << "step " << step + 1 << " objective " << b.objective << " total " << b.total
            << " kl " << b.kl << '\n';
      }
    });
  } catch (const NumericalError&) {
    jsonl.flush();
    csv.flush();
    save_checkpoint(state, dir / "failed_state.ccrc");
    throw;
  }
  save_checkpoint(state, out.checkpoint);
  return out;
}

}  // namespace

fs::path cmd_synth(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const fs::path dir = require_dir(cfg);
  const auto pairs = synth_dataset(cfg.synth());
  fs::create_directories(dir / "features");
  std::vector<DatasetRecord> records;
  for (const auto& p : pairs) {
    DatasetRecord rec = p.record;
    rec.feature_path = "features/" + p.record.feature_path;
    write_features(dir / rec.feature_path, p.video.frames);
    records.push_back(std::move(rec));
  }
  const fs::path manifest = dir / "manifest.jsonl";
  write_manifest(manifest, records);
  log << "wrote " << records.size() << " pairs to " << manifest.string() << '\n';
  return manifest;
}

TrainOutputs cmd_train(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const fs::path dir = require_dir(cfg);
  const fs::path manifest = require_path(cfg, "manifest");

  std::unique_ptr<TrainState> state;
  const bool resume = !cfg.get("resume").empty();
  if (resume) {
    state = load_checkpoint(cfg.get("resume"));
    state->train_config.steps = cfg.train().steps;
    log << "resuming from step " << state->step << '\n';
  } else {
    const Vocabulary vocab = Vocabulary::build(manifest_texts(manifest));
    const auto probe = read_manifest(manifest, &vocab, cfg.model().fusion.max_query);
    if (probe.empty()) throw DataError("manifest " + manifest.string() + " has no records");
    const auto first = load_features(
        resolve_feature_path(probe.front().feature_path, manifest.parent_path(), data_root_from_env()));
    state = std::make_unique<TrainState>(cfg.model(), cfg.train(), vocab,
                                         static_cast<int>(first.feature_dim()));
  }
  const LoadedData data = load_dataset(manifest, state->vocab, state->model_config.fusion.max_query,
                                       data_root_from_env());
  for (const auto& s : data.samples) {
    if (s.video.feature_dim() != state->feature_dim) {
      throw DataError("video " + s.video.video_id + " has feature dimension " +
                      std::to_string(s.video.feature_dim()) + ", expected " +
                      std::to_string(state->feature_dim));
    }
  }
  const MaskPolicy policy = cfg.mask_policy(state->vocab);
  return run_training(*state, data.samples, policy, dir, resume, log);
}

EvalOutputs cmd_eval(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const fs::path dir = require_dir(cfg);
  const fs::path manifest = require_path(cfg, "manifest");
  const auto state = load_checkpoint(require_path(cfg, "checkpoint"));
  const LoadedData data = load_dataset(manifest, state->vocab, state->model_config.fusion.max_query,
                                       data_root_from_env());

  InferOptions opts = cfg.infer();
  opts.policy = cfg.mask_policy(state->vocab);
  std::vector<InferItem> items;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    items.push_back(InferItem{&data.samples[i].video, &data.samples[i].query, i});
  }
  EvalOutputs out;
  out.predictions = rank_proposals(*state->model, items, opts);
  std::vector<RecordIous> per_record;
  out.report = evaluate(out.predictions, data.gt_spans, &per_record);

  write_predictions(dir / "predictions.jsonl", out.predictions);
  write_report(dir / "report.txt", dir / "report.json", out.report);
  std::ofstream csv(dir / "record_ious.csv");
  if (!csv) throw DataError("cannot write " + (dir / "record_ious.csv").string());
  csv << "video_id,rank,iou\n" << std::setprecision(17);
  for (const auto& r : per_record) {
    for (std::size_t k = 0; k < r.ious.size(); ++k) csv << r.video_id << ',' << k + 1 << ',' << r.ious[k] << '\n';
  }
  if (out.report.skipped > 0) {
    log << "warning: " << out.report.skipped << " records without gt_span were skipped\n";
  }
  log << format_report(out.report);
  return out;
}

Prediction cmd_localize(const RunConfig& cfg, const fs::path& features, const std::string& query,
                        double duration_s) {
  cfg.validate();
  const auto state = load_checkpoint(require_path(cfg, "checkpoint"));
  VideoFeatures video = load_features(features);
  video.video_id = features.stem().string();
  video.duration_s = duration_s;
  const TokenizedQuery tq = state->vocab.tokenize(query, state->model_config.fusion.max_query);
  InferOptions opts = cfg.infer();
  opts.policy = cfg.mask_policy(state->vocab);
  const std::vector<InferItem> items{InferItem{&video, &tq, 0}};
  return rank_proposals(*state->model, items, opts).front();
}

std::string dataset_digest(const std::vector<Sample>& samples) {
  // FNV-1a over feature bytes and token ids.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& s : samples) {
    mix(s.video.video_id.data(), s.video.video_id.size());
    mix(s.video.frames.data(), static_cast<std::size_t>(s.video.frames.size()) * sizeof(float));
    mix(s.query.tokens.data(), s.query.tokens.size() * sizeof(int));
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::vector<AblationCell> cmd_ablate(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const fs::path dir = require_dir(cfg);

  // Shared data: the configured manifest, or a synthetic corpus from the seed.
  fs::path manifest = cfg.get("manifest");
  if (manifest.empty()) {
    fs::create_directories(dir / "data");
    RunConfig synth_cfg = cfg;
    synth_cfg.set("out_dir", (dir / "data").string());
    manifest = cmd_synth(synth_cfg, log);
  }

  std::vector<AblationCell> cells;
  for (const auto strategy : {CounterfactualStrategy::uniform, CounterfactualStrategy::average,
                              CounterfactualStrategy::random_selected}) {
    for (const auto aggregator : {AggregatorKind::sigmoid_gate, AggregatorKind::sum_sigmoid,
                                  AggregatorKind::learned_concat}) {
      AblationCell cell{strategy, aggregator, cfg, {}, {}};
      const std::string name = to_string(strategy) + "__" + to_string(aggregator);
      const fs::path cell_dir = dir / name;
      fs::create_directories(cell_dir);
      cell.config.set("strategy", to_string(strategy));
      cell.config.set("aggregator", to_string(aggregator));
      cell.config.set("manifest", manifest.string());
      cell.config.set("out_dir", cell_dir.string());
      cell.config.set("resume", "");
      {
        std::ofstream c(cell_dir / "config.txt");
        c << cell.config.dump();
      }
      log << "cell " << name << '\n';
      const TrainOutputs trained = cmd_train(cell.config, log);
      cell.config.set("checkpoint", trained.checkpoint.string());

      const auto state = load_checkpoint(trained.checkpoint);
      cell.data_hash = dataset_digest(
          load_dataset(manifest, state->vocab, state->model_config.fusion.max_query, data_root_from_env())
              .samples);
      cell.report = cmd_eval(cell.config, log).report;
      cells.push_back(std::move(cell));
    }
  }

  std::ofstream txt(dir / "ablation.txt");
  txt << format_ablation(cells);
  json j = json::array();
  for (const auto& c : cells) {
    j.push_back({{"strategy", to_string(c.strategy)},
                 {"aggregator", to_string(c.aggregator)},
                 {"data_hash", c.data_hash},
                 {"report", json::parse(report_json(c.report))}});
  }
  std::ofstream js(dir / "ablation.json");
  js << j.dump(2) << '\n';
  if (!txt || !js) throw DataError("cannot write ablation tables under " + dir.string());
  log << format_ablation(cells);
  return cells;
}

std::string format_ablation(const std::vector<AblationCell>& cells) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  auto table = [&](const std::string& title, auto metric) {
    os << title << '\n' << std::left << std::setw(18) << "strategy";
    for (const auto a : {AggregatorKind::sigmoid_gate, AggregatorKind::sum_sigmoid,
                         AggregatorKind::learned_concat}) {
      os << std::right << std::setw(16) << to_string(a);
    }
    os << '\n';
    for (const auto s : {CounterfactualStrategy::uniform, CounterfactualStrategy::average,
                         CounterfactualStrategy::random_selected}) {
      os << std::left << std::setw(18) << to_string(s);
      for (const auto a : {AggregatorKind::sigmoid_gate, AggregatorKind::sum_sigmoid,
                           AggregatorKind::learned_concat}) {
        std::string v = "-";
        for (const auto& c : cells) {
          if (c.strategy == s && c.aggregator == a) {
            std::ostringstream t;
            t << std::fixed << std::setprecision(2) << 100.0 * metric(c.report);
            v = t.str();
          }
        }
        os << std::right << std::setw(16) << v;
      }
      os << '\n';
    }
    os << '\n';
  };
  table("R@1,IoU=0.5", [](const EvalReport& r) { return r.recall[0][2]; });
  table("R@1,IoU=0.3", [](const EvalReport& r) { return r.recall[0][1]; });
  table("R@1,mIoU", [](const EvalReport& r) { return r.mean_iou[0]; });
  return os.str();
}

}  // namespace ccr
