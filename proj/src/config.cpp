#include "ccr/config.hpp"

#include "ccr/errors.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace ccr {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::vector<ConfigKey>& RunConfig::keys() {
  static const std::vector<ConfigKey> k = {
      {"seed", "0", "global seed for data, initialization, masking and batch order"},
      // synthetic corpus
      {"synth_pairs", "100", "number of synthetic video-query pairs"},
      {"frames", "32", "synthetic frames per video (T)"},
      {"feature_dim", "16", "synthetic frame feature dimension (Dv)"},
      {"vocab_size", "40", "synthetic vocabulary size including reserved ids"},
      {"query_length", "6", "synthetic query length in tokens"},
      {"bias", "0.0", "probability that a synthetic query carries the planted word pair (beta)"},
      {"min_span", "0.2", "shortest planted segment as a fraction of the video"},
      {"max_span", "0.4", "longest planted segment as a fraction of the video"},
      {"noise", "0.3", "standard deviation of synthetic frame noise"},
      {"distractors", "false", "fill synthetic backgrounds with latents of non-query words"},
      // model
      {"hidden", "32", "model width (D)"},
      {"layers", "2", "transformer layers per encoder / decoder stack"},
      {"heads", "2", "attention heads"},
      {"ff", "64", "feed-forward inner width"},
      {"dropout", "0.0", "dropout rate during training"},
      {"max_frames", "512", "longest accepted video in frames"},
      {"max_query", "32", "longest query in tokens; longer queries are truncated"},
      {"num_positives", "2", "positive proposals per pair (N^p)"},
      {"sigma_min", "0.01", "lower bound on proposal width"},
      {"sigma_max", "1.0", "upper bound on proposal width"},
      {"initial_width", "0.15", "proposal width at initialization"},
      {"neg_shift", "3.0", "negative-center shift in widths (delta)"},
      {"neg_edge", "0.01", "negative centers are clamped to [edge, 1 - edge]"},
      {"neg_min_width", "0.1", "width floor used for the negative shift"},
      {"gamma", "1.0", "segment half-length in widths when converting a proposal to a span"},
      {"strategy", "uniform", "counterfactual knowledge: uniform | average | random_selected"},
      {"aggregator", "sigmoid_gate", "branch aggregation: sigmoid_gate | sum_sigmoid | learned_concat"},
      {"ccr", "true", "apply the counterfactual subtraction (false ablates it)"},
      // training
      {"lr_model", "4e-4", "learning rate of the fusion module, projection and aggregator"},
      {"lr_mu", "1e-3", "learning rate of the counterfactual scalar mu"},
      {"batch_size", "8", "pairs per step"},
      {"steps", "1000", "training step budget"},
      {"p_mask", "0.3333333333333333", "per-token masking probability"},
      {"lambda", "0.15", "diversity target on positive-proposal overlap"},
      {"alpha_p", "0.2", "margin against the whole-video reference"},
      {"alpha_n", "0.1", "margin against each negative"},
      {"clip_norm", "5.0", "global gradient-norm clip"},
      {"feature_noise", "0.3", "std-dev of fresh Gaussian noise added to video features each step"},
      {"recon_weight", "1.0", "weight of the direct positive + reference reconstruction term"},
      {"checkpoint_every", "0", "write a checkpoint every N steps (0 disables)"},
      {"stoplist", "default", "words never masked: default | none | path to a word-per-line file"},
      // paths
      {"manifest", "", "dataset manifest (JSON lines)"},
      {"out_dir", "out", "directory for outputs"},
      {"checkpoint", "", "checkpoint to evaluate or localize with"},
      {"resume", "", "checkpoint to continue training from"},
  };
  return k;
}

RunConfig::RunConfig() {
  for (const auto& k : keys()) values_[k.name] = k.default_value;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

}  // namespace

int RunConfig::get_int(const std::string& key) const { return parse_number<int>(key, get(key)); }
double RunConfig::get_double(const std::string& key) const {
  return parse_number<double>(key, get(key));
}
std::uint64_t RunConfig::get_u64(const std::string& key) const {
  return parse_number<std::uint64_t>(key, get(key));
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "' expects true or false, got '" + v + "'");
}

std::string RunConfig::dump() const {
  std::ostringstream os;
  for (const auto& k : keys()) os << k.name << " = " << values_.at(k.name) << '\n';
  return os.str();
}

SynthConfig RunConfig::synth() const {
  SynthConfig s;
  s.n_pairs = get_int("synth_pairs");
  s.frames = get_int("frames");
  s.feature_dim = get_int("feature_dim");
  s.vocab_size = get_int("vocab_size");
  s.query_length = get_int("query_length");
  s.bias_strength = get_double("bias");
  s.min_span = get_double("min_span");
  s.max_span = get_double("max_span");
  s.noise = get_double("noise");
  s.distractors = get_bool("distractors");
  s.seed = get_u64("seed");
  return s;
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  FusionConfig& f = m.fusion;
  f.hidden = get_int("hidden");
  f.layers = get_int("layers");
  f.heads = get_int("heads");
  f.ff = get_int("ff");
  f.dropout = get_double("dropout");
  f.max_frames = get_int("max_frames");
  f.max_query = get_int("max_query");
  f.num_positives = get_int("num_positives");
  f.width_bounds.min = get_double("sigma_min");
  f.width_bounds.max = get_double("sigma_max");
  f.initial_width = get_double("initial_width");
  f.mining.shift = get_double("neg_shift");
  f.mining.edge = get_double("neg_edge");
  f.mining.min_width = get_double("neg_min_width");
  m.strategy = parse_strategy(get("strategy"));
  m.aggregator = parse_aggregator(get("aggregator"));
  m.ccr_enabled = get_bool("ccr");
  return m;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.lr_model = get_double("lr_model");
  t.lr_mu = get_double("lr_mu");
  t.batch_size = get_int("batch_size");
  t.steps = get_int("steps");
  t.p_mask = get_double("p_mask");
  t.diversity_lambda = get_double("lambda");
  t.margins.positive = get_double("alpha_p");
  t.margins.negative = get_double("alpha_n");
  t.clip_norm = get_double("clip_norm");
  t.feature_noise = get_double("feature_noise");
  t.recon_weight = get_double("recon_weight");
  t.seed = get_u64("seed");
  t.checkpoint_every = get_int("checkpoint_every");
  return t;
}

InferOptions RunConfig::infer() const {
  InferOptions o;
  o.p_mask = get_double("p_mask");
  o.gamma = get_double("gamma");
  o.seed = get_u64("seed");
  if (!(o.gamma > 0.0)) throw ConfigError("gamma must be positive");
  return o;
}

MaskPolicy RunConfig::mask_policy(const Vocabulary& vocab) const {
  const std::string& v = get("stoplist");
  if (v == "none") return MaskPolicy{};
  if (v == "default") return MaskPolicy::with_stopwords(vocab, default_stoplist());
  std::ifstream in(v);
  if (!in) throw ConfigError("cannot read stoplist " + v);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return MaskPolicy::with_stopwords(vocab, words);
}

void RunConfig::validate() const {
  ccr::validate(synth());
  model().fusion.validate();
  train().validate();
  (void)infer();
}

}  // namespace ccr
