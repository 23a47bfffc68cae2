#include "ccr/errors.hpp"
#include "ccr/trainer.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

using namespace ccr;
namespace fs = std::filesystem;

namespace {

struct Setup {
  SynthConfig synth;
  ModelConfig model;
  TrainConfig train;
  std::vector<Sample> samples;

  Setup() {
    synth.n_pairs = 6;
    synth.frames = 12;
    synth.feature_dim = 6;
    synth.vocab_size = 16;
    synth.query_length = 5;
    for (auto& p : synth_dataset(synth)) samples.push_back(Sample{p.video, p.record.query});
    model.fusion.hidden = 8;
    model.fusion.ff = 16;
    model.fusion.layers = 1;
    train.batch_size = 3;
    train.lr_model = 2e-3;
    train.lr_mu = 1e-2;
  }

  std::unique_ptr<TrainState> state() const {
    return std::make_unique<TrainState>(model, train, synth_vocabulary(synth.vocab_size), synth.feature_dim);
  }

  std::vector<TrainExample> fixed_batch() const {
    std::vector<TrainExample> b;
    for (std::size_t i = 0; i < 3; ++i) b.push_back(TrainExample{&samples[i].video, &samples[i].query, 100 + i});
    return b;
  }
};

std::vector<ag::Matrix> snapshot(const CcrModel& m) {
  std::vector<ag::Matrix> out;
  for (const auto& [name, v] : m.named_parameters()) out.push_back(v.value());
  return out;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ccr_test_trainer";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<double> totals(TrainState& s, std::span<const Sample> data, std::int64_t until) {
  std::vector<double> out;
  train(s, data, MaskPolicy{}, until, [&](std::int64_t, const LossBundle& b) { out.push_back(b.objective); });
  return out;
}

}  // namespace

TEST_CASE("train_step: both learning rates zero leave every parameter bit-identical") {
  Setup su;
  su.train.lr_model = 0.0;
  su.train.lr_mu = 0.0;
  auto s = su.state();
  const auto before = snapshot(*s->model);
  const auto batch = su.fixed_batch();
  for (int i = 0; i < 3; ++i) train_step(*s, batch, MaskPolicy{});
  CHECK(snapshot(*s->model) == before);
}

TEST_CASE("train_step: group isolation") {
  Setup su;
  SUBCASE("model rate zero: only mu changes") {
    su.train.lr_model = 0.0;
    auto s = su.state();
    const auto names = s->model->named_parameters();
    const auto before = snapshot(*s->model);
    const auto batch = su.fixed_batch();
    for (int i = 0; i < 5; ++i) train_step(*s, batch, MaskPolicy{});
    const auto after = snapshot(*s->model);
    for (std::size_t i = 0; i < names.size(); ++i) {
      INFO(names[i].first);
      if (names[i].first == "ccr/mu") {
        CHECK(after[i] != before[i]);
      } else {
        CHECK(after[i] == before[i]);
      }
    }
  }
  SUBCASE("mu rate zero: mu never changes") {
    su.train.lr_mu = 0.0;
    auto s = su.state();
    const double mu0 = s->model->head().mu().scalar();
    const auto batch = su.fixed_batch();
    for (int i = 0; i < 5; ++i) train_step(*s, batch, MaskPolicy{});
    CHECK(s->model->head().mu().scalar() == mu0);
  }
  SUBCASE("gradient probes: kl reaches no model parameter, the objective never reaches mu") {
    auto s = su.state();
    const auto batch = su.fixed_batch();
    for (int i = 0; i < 5; ++i) {
      GradientProbe probe;
      train_step(*s, batch, MaskPolicy{}, &probe);
      CHECK(probe.kl_on_model == 0.0);
      CHECK(probe.total_on_mu == 0.0);
    }
  }
}

TEST_CASE("train_step: the loss bundle is internally consistent") {
  Setup su;
  auto s = su.state();
  const LossBundle b = train_step(*s, su.fixed_batch(), MaskPolicy{});
  CHECK(b.finite());
  CHECK(b.total == b.contrastive + b.query + b.diversity);
  CHECK(b.objective == doctest::Approx(b.total + su.train.recon_weight * b.recon).epsilon(1e-14));
  CHECK(b.contrastive >= 0.0);
  CHECK(b.kl >= 0.0);
  CHECK(s->step == 1);
  CHECK_THROWS(train_step(*s, std::span<const TrainExample>{}, MaskPolicy{}));
}

TEST_CASE("train_step: 200 steps on a fixed batch reduce the smoothed loss") {
  Setup su;
  auto s = su.state();
  const auto batch = su.fixed_batch();
  std::vector<double> loss;
  for (int i = 0; i < 200; ++i) loss.push_back(train_step(*s, batch, MaskPolicy{}).total);
  const double first = std::accumulate(loss.begin(), loss.begin() + 20, 0.0) / 20.0;
  const double last = std::accumulate(loss.end() - 20, loss.end(), 0.0) / 20.0;
  MESSAGE("smoothed loss " << first << " -> " << last);
  CHECK(last < first);
}

TEST_CASE("train: identical config and seed give identical loss traces") {
  Setup su;
  auto a = su.state();
  auto b = su.state();
  CHECK(totals(*a, su.samples, 8) == totals(*b, su.samples, 8));
  CHECK(snapshot(*a->model) == snapshot(*b->model));
}

TEST_CASE("batch_slots: each epoch visits every pair exactly once") {
  std::multiset<std::size_t> seen;
  for (std::int64_t step = 0; step < 5; ++step) {
    for (const auto& slot : batch_slots(10, step, 4, 7)) {
      if (slot.epoch == 0) seen.insert(slot.index);
    }
  }
  CHECK(seen.size() == 10);
  CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 10);
  CHECK(mask_seed(1, 0, 3) != mask_seed(1, 1, 3));
}

TEST_CASE("checkpoint: save then load restores parameters, optimizer state and configs") {
  Setup su;
  su.model.aggregator = AggregatorKind::learned_concat;
  auto s = su.state();
  totals(*s, su.samples, 3);
  const fs::path path = temp_path("roundtrip.ccrc");
  save_checkpoint(*s, path);
  const auto back = load_checkpoint(path);
  CHECK(back->step == 3);
  CHECK(snapshot(*back->model) == snapshot(*s->model));
  CHECK(back->model_opt.first_moments() == s->model_opt.first_moments());
  CHECK(back->model_opt.second_moments() == s->model_opt.second_moments());
  CHECK(back->mu_opt.first_moments() == s->mu_opt.first_moments());
  CHECK(back->model_opt.steps() == s->model_opt.steps());
  CHECK(back->model_config.aggregator == AggregatorKind::learned_concat);
  CHECK(back->train_config.lr_model == su.train.lr_model);
  CHECK(back->train_config.feature_noise == su.train.feature_noise);
  CHECK(back->vocab.words() == s->vocab.words());
  CHECK(back->feature_dim == su.synth.feature_dim);
}

TEST_CASE("checkpoint: resuming reproduces the uninterrupted run exactly") {
  Setup su;
  auto full = su.state();
  const auto uninterrupted = totals(*full, su.samples, 20);

  auto part = su.state();
  auto trace = totals(*part, su.samples, 10);
  const fs::path path = temp_path("resume.ccrc");
  save_checkpoint(*part, path);
  part.reset();
  auto resumed = load_checkpoint(path);
  const auto rest = totals(*resumed, su.samples, 20);
  trace.insert(trace.end(), rest.begin(), rest.end());
  CHECK(trace == uninterrupted);
  CHECK(snapshot(*resumed->model) == snapshot(*full->model));
}

TEST_CASE("checkpoint: corrupt, truncated and wrong-version files are refused") {
  Setup su;
  auto s = su.state();
  const fs::path path = temp_path("good.ccrc");
  save_checkpoint(*s, path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  const auto write = [](const fs::path& p, const std::string& data) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
  };

  const fs::path truncated = temp_path("truncated.ccrc");
  write(truncated, bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(truncated), TruncationError);

  const fs::path magic = temp_path("magic.ccrc");
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  write(magic, bad_magic);
  CHECK_THROWS_AS(load_checkpoint(magic), FormatError);

  const fs::path version = temp_path("version.ccrc");
  std::string bad_version = bytes;
  bad_version[4] = static_cast<char>(kCheckpointVersion + 1);
  write(version, bad_version);
  try {
    load_checkpoint(version);
    FAIL("version mismatch accepted");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  const fs::path trailer = temp_path("trailer.ccrc");
  std::string bad_trailer = bytes;
  bad_trailer.back() = '?';
  write(trailer, bad_trailer);
  CHECK_THROWS_AS(load_checkpoint(trailer), FormatError);

  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ccrc")), DataError);
}

TEST_CASE("TrainConfig::validate rejects invalid settings") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lr_model = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.p_mask = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.feature_noise = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
