#include "ccr/commands.hpp"
#include "ccr/errors.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace ccr;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ccr_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// A desk-scale configuration that keeps every command fast.
RunConfig tiny(const fs::path& out) {
  return RunConfig::parse(
      "synth_pairs = 6\nframes = 10\nfeature_dim = 5\nvocab_size = 14\nquery_length = 4\n"
      "hidden = 8\nff = 16\nlayers = 1\nbatch_size = 2\nsteps = 4\nout_dir = " +
      out.string() + "\n");
}

std::map<std::string, std::string> as_map(const RunConfig& c) {
  std::map<std::string, std::string> m;
  for (const auto& k : RunConfig::keys()) m[k.name] = c.get(k.name);
  return m;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CCR_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("RunConfig: parsing, comments, defaults and unknown keys") {
  const RunConfig c = RunConfig::parse("# comment\n seed = 7  # trailing\n\nstrategy=average\n");
  CHECK(c.get_u64("seed") == 7);
  CHECK(c.get("strategy") == "average");
  CHECK(c.get("aggregator") == "sigmoid_gate");
  CHECK_THROWS_AS(RunConfig::parse("no_such_key = 1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("seed 7\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("strategy = sideways\n").validate(), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("steps = -3\n").validate(), ConfigError);
  for (const auto& k : RunConfig::keys()) {
    INFO(k.name);
    CHECK_FALSE(k.doc.empty());
  }
  CHECK(as_map(RunConfig::parse(c.dump())) == as_map(c));
  CHECK_NOTHROW(RunConfig{}.validate());
}

TEST_CASE("cmd_synth: a fixed seed writes byte-identical files") {
  const fs::path a = fresh_dir("synth_a");
  const fs::path b = fresh_dir("synth_b");
  std::ostringstream log;
  const fs::path ma = cmd_synth(tiny(a), log);
  const fs::path mb = cmd_synth(tiny(b), log);
  CHECK(slurp(ma) == slurp(mb));
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a / "features")) {
    CHECK(slurp(e.path()) == slurp(b / "features" / e.path().filename()));
    ++files;
  }
  CHECK(files == 6);
}

TEST_CASE("cmd_synth: a missing output directory is an error") {
  std::ostringstream log;
  RunConfig c = tiny(fs::temp_directory_path() / "ccr_test_cli" / "does_not_exist");
  fs::remove_all(c.get("out_dir"));
  CHECK_THROWS_AS(cmd_synth(c, log), DataError);
}

TEST_CASE("cmd_synth: the bias flag shows up in the written corpus") {
  for (const double beta : {0.0, 1.0}) {
    const fs::path dir = fresh_dir("synth_bias");
    RunConfig c = tiny(dir);
    c.set("synth_pairs", "200");
    c.set("bias", beta == 0.0 ? "0" : "1");
    std::ostringstream log;
    const fs::path manifest = cmd_synth(c, log);
    const Vocabulary vocab = synth_vocabulary(c.get_int("vocab_size"));
    const BiasedPair pair;
    int with_pair = 0, with_first = 0;
    for (const auto& rec : read_manifest(manifest, &vocab, 32)) {
      const auto& t = rec.query.tokens;
      bool has_first = false, has_pair = false;
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] != pair.first) continue;
        has_first = true;
        if (i + 1 < t.size() && t[i + 1] == pair.second) has_pair = true;
      }
      with_first += has_first;
      with_pair += has_pair;
    }
    if (beta == 1.0) {
      CHECK(with_pair == 200);
    } else {
      // Only chance co-occurrences remain.
      CHECK(static_cast<double>(with_pair) / std::max(1, with_first) < 0.3);
    }
  }
}

TEST_CASE("cmd_train: a zero-step budget checkpoints the initial state") {
  const fs::path dir = fresh_dir("train_zero");
  std::ostringstream log;
  RunConfig c = tiny(dir);
  c.set("manifest", cmd_synth(c, log).string());
  c.set("steps", "0");
  const TrainOutputs out = cmd_train(c, log);
  CHECK(out.losses.empty());
  const auto saved = load_checkpoint(out.checkpoint);
  const TrainState fresh(c.model(), c.train(), saved->vocab, saved->feature_dim);
  const auto a = saved->model->named_parameters();
  const auto b = fresh.model->named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.value() == b[i].second.value());
  CHECK(saved->step == 0);
}

TEST_CASE("cmd_train: resuming reproduces the uninterrupted losses") {
  const fs::path data = fresh_dir("resume_data");
  std::ostringstream log;
  RunConfig base = tiny(data);
  const fs::path manifest = cmd_synth(base, log);
  base.set("manifest", manifest.string());
  base.set("steps", "8");

  RunConfig full = base;
  full.set("out_dir", fresh_dir("resume_full").string());
  const TrainOutputs uninterrupted = cmd_train(full, log);

  RunConfig first = base;
  first.set("out_dir", fresh_dir("resume_part").string());
  first.set("steps", "3");
  const TrainOutputs head = cmd_train(first, log);
  RunConfig second = first;
  second.set("steps", "8");
  second.set("resume", head.checkpoint.string());
  const TrainOutputs tail = cmd_train(second, log);

  REQUIRE(head.losses.size() + tail.losses.size() == uninterrupted.losses.size());
  for (std::size_t i = 0; i < uninterrupted.losses.size(); ++i) {
    const LossBundle& r = i < head.losses.size() ? head.losses[i] : tail.losses[i - head.losses.size()];
    CHECK(r.objective == uninterrupted.losses[i].objective);
    CHECK(r.kl == uninterrupted.losses[i].kl);
  }
  // The appended log has one row per step.
  std::ifstream csv(fs::path(first.get("out_dir")) / "loss_curve.csv");
  int rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  CHECK(rows == 1 + 8);
}

TEST_CASE("cmd_eval: report files mirror the metrics and match an independent recount") {
  const fs::path dir = fresh_dir("eval");
  std::ostringstream log;
  RunConfig c = tiny(dir);
  c.set("manifest", cmd_synth(c, log).string());
  c.set("checkpoint", cmd_train(c, log).checkpoint.string());
  const EvalOutputs out = cmd_eval(c, log);

  const Vocabulary vocab = synth_vocabulary(c.get_int("vocab_size"));
  const auto records = read_manifest(c.get("manifest"), &vocab, 32);
  std::vector<std::vector<double>> ious;
  for (std::size_t r = 0; r < records.size(); ++r) {
    std::vector<double> row;
    for (const auto& s : out.predictions[r].ranked) {
      row.push_back(oracle::iou(s.segment.start, s.segment.end, records[r].gt_span->start, records[r].gt_span->end));
    }
    ious.push_back(row);
  }
  for (std::size_t a = 0; a < kRecallAt.size(); ++a) {
    for (std::size_t b = 0; b < kIouThresholds.size(); ++b) {
      const auto m = oracle::recall_at(ious, kRecallAt[a], kIouThresholds[b]);
      CHECK(out.report.recall[a][b] == doctest::Approx(m.recall).epsilon(1e-12));
      CHECK(out.report.mean_iou[a] == doctest::Approx(m.miou).epsilon(1e-12));
    }
  }
  const EvalReport mirrored = parse_report_json(slurp(dir / "report.json"));
  for (std::size_t a = 0; a < kRecallAt.size(); ++a) {
    CHECK(mirrored.mean_iou[a] == doctest::Approx(out.report.mean_iou[a]).epsilon(1e-14));
    for (std::size_t b = 0; b < kIouThresholds.size(); ++b) {
      CHECK(mirrored.recall[a][b] == doctest::Approx(out.report.recall[a][b]).epsilon(1e-14));
    }
  }
  CHECK(mirrored.count == out.report.count);
  CHECK(slurp(dir / "report.txt") == format_report(out.report));
  CHECK(fs::exists(dir / "predictions.jsonl"));
  CHECK(fs::exists(dir / "record_ious.csv"));
}

TEST_CASE("evaluate: injected ground-truth predictions score 100% everywhere") {
  std::vector<Prediction> preds;
  std::vector<std::optional<Span>> gts;
  for (int r = 0; r < 5; ++r) {
    const Span gt{1.0 + r, 3.0 + 2 * r};
    Prediction p;
    p.ranked.push_back(RankedSegment{gt, 0.0, {}});
    preds.push_back(p);
    gts.emplace_back(gt);
  }
  const EvalReport report = evaluate(preds, gts);
  for (double v : report.recall[0]) CHECK(v == 1.0);
  CHECK(report.mean_iou[0] == 1.0);
}

TEST_CASE("cmd_ablate: a 3x3 grid over shared data, differing only in the swept keys") {
  const fs::path dir = fresh_dir("ablate");
  std::ostringstream log;
  RunConfig c = tiny(dir);
  c.set("steps", "2");
  const auto cells = cmd_ablate(c, log);
  REQUIRE(cells.size() == 9);
  std::set<std::pair<std::string, std::string>> combos;
  // out_dir and checkpoint name where each cell writes; they are outputs, not settings.
  const std::set<std::string> swept{"strategy", "aggregator", "out_dir", "checkpoint"};
  const auto reference = as_map(cells.front().config);
  for (const auto& cell : cells) {
    combos.emplace(to_string(cell.strategy), to_string(cell.aggregator));
    CHECK(cell.config.get("strategy") == to_string(cell.strategy));
    CHECK(cell.config.get("aggregator") == to_string(cell.aggregator));
    for (const auto& [k, v] : as_map(cell.config)) {
      if (!swept.contains(k)) CHECK(v == reference.at(k));
    }
    CHECK(cell.data_hash == cells.front().data_hash);
  }
  CHECK(combos.size() == 9);
  CHECK(fs::exists(dir / "ablation.txt"));
  CHECK(fs::exists(dir / "ablation.json"));
  CHECK(format_ablation(cells).find("random_selected") != std::string::npos);
}

TEST_CASE("ccr binary: exit codes") {
  const fs::path dir = fresh_dir("binary");
  CHECK(run_cli("config") == kExitOk);
  CHECK(run_cli("config --no_such_key 3") == kExitConfig);
  CHECK(run_cli("config --strategy sideways") == kExitConfig);
  CHECK(run_cli("synth --out_dir " + (dir / "missing").string()) == kExitData);
  CHECK(run_cli("synth --synth_pairs 3 --frames 8 --out_dir " + dir.string()) == kExitOk);
  CHECK(fs::exists(dir / "manifest.jsonl"));
  CHECK(run_cli("train --steps 0 --manifest " + (dir / "nowhere.jsonl").string() + " --out_dir " + dir.string()) ==
        kExitData);
}
