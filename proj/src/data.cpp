#include "ccr/data.hpp"

#include "ccr/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace ccr {

namespace {

constexpr char kMagic[4] = {'F', 'M', 'A', 'T'};

std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void write_u32_le(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::string word_name(int id) {
  std::ostringstream os;
  os << 'w' << std::setw(3) << std::setfill('0') << id;
  return os.str();
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<mask>");
  add("<unk>");
}

void Vocabulary::add(const std::string& word) {
  if (index_.contains(word)) return;
  index_.emplace(word, static_cast<int>(words_.size()));
  words_.push_back(word);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  std::set<std::string> distinct;
  for (const auto& t : texts) {
    for (auto& w : split_words(t)) distinct.insert(std::move(w));
  }
  Vocabulary vocab;
  for (const auto& w : distinct) vocab.add(w);
  return vocab;
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  if (words.size() < 3 || words[0] != "<pad>" || words[1] != "<mask>" || words[2] != "<unk>") {
    throw FormatError("vocabulary must start with <pad>, <mask>, <unk>");
  }
  Vocabulary vocab;
  for (std::size_t i = 3; i < words.size(); ++i) vocab.add(words[i]);
  if (vocab.size() != static_cast<int>(words.size())) {
    throw FormatError("vocabulary contains duplicate words");
  }
  return vocab;
}

int Vocabulary::id(const std::string& word) const {
  const auto it = index_.find(word);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocabulary id " + std::to_string(id));
  return words_[static_cast<std::size_t>(id)];
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (std::ispunct(c)) {
      continue;
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

TokenizedQuery Vocabulary::tokenize(const std::string& text, int max_len) const {
  TokenizedQuery q;
  q.text = text;
  for (const auto& w : split_words(text)) {
    if (static_cast<int>(q.tokens.size()) >= max_len) break;
    q.tokens.push_back(id(w));
  }
  if (q.tokens.empty()) throw DataError("query has no tokens: \"" + text + "\"");
  return q;
}

// ---------------------------------------------------------------------------
// Masking

std::vector<std::string> default_stoplist() {
  return {"a",   "an",  "the", "is",   "are",  "was", "of",  "to",   "in",   "on",
          "at",  "and", "or",  "with", "by",   "for", "from", "into", "his", "her",
          "its", "their", "then", "while", "as", "it", "that", "this"};
}

MaskPolicy MaskPolicy::with_stopwords(const Vocabulary& vocab,
                                      const std::vector<std::string>& stoplist) {
  MaskPolicy policy;
  for (const auto& w : stoplist) {
    const int id = vocab.id(w);
    if (id != kUnkId) policy.excluded.insert(id);
  }
  return policy;
}

MaskedQuery mask_query(const TokenizedQuery& query, double p_mask, std::mt19937_64& rng,
                       const MaskPolicy& policy) {
  if (!(p_mask >= 0.0 && p_mask <= 1.0)) {
    throw std::invalid_argument("mask_query: p_mask must lie in [0, 1]");
  }
  std::vector<int> maskable;
  for (std::size_t i = 0; i < query.tokens.size(); ++i) {
    if (policy.maskable(query.tokens[i])) maskable.push_back(static_cast<int>(i));
  }
  if (maskable.empty()) throw DataError("mask_query: query has no maskable tokens");

  MaskedQuery out;
  out.tokens = query.tokens;
  std::bernoulli_distribution draw(p_mask);
  for (int pos : maskable) {
    if (draw(rng)) out.mask_positions.push_back(pos);
  }
  if (out.mask_positions.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, maskable.size() - 1);
    out.mask_positions.push_back(maskable[pick(rng)]);
  }
  for (int pos : out.mask_positions) {
    out.targets.push_back(query.tokens[static_cast<std::size_t>(pos)]);
    out.tokens[static_cast<std::size_t>(pos)] = kMaskId;
  }
  return out;
}

// ---------------------------------------------------------------------------
// FMAT files

void validate_features(const VideoFeatures& video) {
  if (video.frames.rows() < 2) {
    throw DataError("video '" + video.video_id + "' has " + std::to_string(video.frames.rows()) +
                    " frames; at least 2 are required");
  }
  if (video.frames.cols() < 1) throw DataError("video '" + video.video_id + "' has no features");
  if (!video.frames.allFinite()) {
    throw DataError("video '" + video.video_id + "' contains non-finite feature values");
  }
  if (!(video.duration_s > 0.0)) throw DataError("video '" + video.video_id + "' has no duration");
}

VideoFeatures load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file " + path.string());
  unsigned char header[12];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(header)) ||
      !std::equal(kMagic, kMagic + 4, reinterpret_cast<const char*>(header))) {
    throw FormatError("bad FMAT header in " + path.string());
  }
  const std::uint32_t rows = read_u32_le(header + 4);
  const std::uint32_t cols = read_u32_le(header + 8);
  const std::size_t count = static_cast<std::size_t>(rows) * cols;
  if (rows < 2) {
    throw DataError("feature file " + path.string() + " declares " + std::to_string(rows) +
                    " rows; at least 2 frames are required");
  }
  const auto file_bytes = std::filesystem::file_size(path);
  if (file_bytes != sizeof(header) + count * 4) {
    throw TruncationError("feature file " + path.string() + " holds " +
                          std::to_string(file_bytes - sizeof(header)) + " payload bytes, header declares " +
                          std::to_string(rows) + "x" + std::to_string(cols) + " floats");
  }

  std::vector<unsigned char> payload(count * 4);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(in.gcount()) != payload.size()) {
    throw TruncationError("short read on feature file " + path.string());
  }

  VideoFeatures video;
  video.video_id = path.stem().string();
  video.frames.resize(rows, cols);
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) {
      const std::size_t k = (static_cast<std::size_t>(r) * cols + c) * 4;
      video.frames(r, c) = std::bit_cast<float>(read_u32_le(payload.data() + k));
    }
  }
  video.duration_s = static_cast<double>(rows);
  validate_features(video);
  return video;
}

void write_features(const std::filesystem::path& path, const Eigen::MatrixXf& frames) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write feature file " + path.string());
  out.write(kMagic, 4);
  write_u32_le(out, static_cast<std::uint32_t>(frames.rows()));
  write_u32_le(out, static_cast<std::uint32_t>(frames.cols()));
  for (Eigen::Index r = 0; r < frames.rows(); ++r) {
    for (Eigen::Index c = 0; c < frames.cols(); ++c) {
      write_u32_le(out, std::bit_cast<std::uint32_t>(frames(r, c)));
    }
  }
  if (!out) throw DataError("failed writing feature file " + path.string());
}

std::unordered_map<std::string, Eigen::VectorXf> load_pretrained_embeddings(
    const std::filesystem::path& fmat_path, const std::filesystem::path& vocab_path) {
  const VideoFeatures table = load_features(fmat_path);
  std::ifstream in(vocab_path);
  if (!in) throw DataError("cannot open embedding vocabulary " + vocab_path.string());
  std::unordered_map<std::string, Eigen::VectorXf> out;
  std::string line;
  Eigen::Index row = 0;
  while (std::getline(in, line)) {
    if (row >= table.frames.rows()) {
      throw DataError("embedding vocabulary has more words than the matrix has rows");
    }
    const auto words = split_words(line);
    if (!words.empty()) out.emplace(words.front(), table.frames.row(row).transpose());
    ++row;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

std::vector<DatasetRecord> read_manifest(const std::filesystem::path& path, const Vocabulary* vocab,
                                         int max_len) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::vector<DatasetRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where + ": " + e.what());
    }
    DatasetRecord rec;
    try {
      rec.video_id = j.at("video_id").get<std::string>();
      rec.feature_path = j.at("feature_path").get<std::string>();
      rec.query.text = j.at("query").get<std::string>();
      rec.duration_s = j.at("duration_s").get<double>();
      if (j.contains("gt_span") && !j["gt_span"].is_null()) {
        const auto& s = j["gt_span"];
        if (!s.is_array() || s.size() != 2) throw FormatError(where + ": gt_span must be [start, end]");
        rec.gt_span = Span{s[0].get<double>(), s[1].get<double>()};
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    if (!(rec.duration_s > 0.0)) throw DataError(where + ": duration_s must be positive");
    if (rec.gt_span && !(rec.gt_span->start >= 0.0 && rec.gt_span->start < rec.gt_span->end &&
                         rec.gt_span->end <= rec.duration_s)) {
      throw DataError(where + ": gt_span outside [0, duration_s] or empty");
    }
    if (vocab) rec.query = vocab->tokenize(rec.query.text, max_len);
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<std::string> manifest_texts(const std::filesystem::path& path) {
  std::vector<std::string> texts;
  for (const auto& rec : read_manifest(path, nullptr, 0)) texts.push_back(rec.query.text);
  return texts;
}

void write_manifest(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& rec : records) {
    nlohmann::json j;
    j["video_id"] = rec.video_id;
    j["feature_path"] = rec.feature_path;
    j["query"] = rec.query.text;
    if (rec.gt_span) j["gt_span"] = {rec.gt_span->start, rec.gt_span->end};
    j["duration_s"] = rec.duration_s;
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("failed writing manifest " + path.string());
}

std::filesystem::path resolve_feature_path(const std::string& feature_path,
                                           const std::filesystem::path& manifest_dir,
                                           const std::optional<std::filesystem::path>& data_root) {
  const std::filesystem::path p(feature_path);
  if (p.is_absolute()) return p;
  return (data_root ? *data_root : manifest_dir) / p;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

void validate(const SynthConfig& cfg) {
  if (cfg.n_pairs <= 0 || cfg.frames <= 0 || cfg.feature_dim <= 0 || cfg.query_length <= 0) {
    throw ConfigError("synth: counts must be positive");
  }
  if (cfg.frames < 2) throw ConfigError("synth: at least 2 frames are required");
  if (cfg.vocab_size < 8) {
    throw ConfigError("synth: vocab_size must be at least 8 (reserved ids plus content words)");
  }
  if (!(cfg.bias_strength >= 0.0 && cfg.bias_strength <= 1.0)) {
    throw ConfigError("synth: bias_strength must lie in [0, 1]");
  }
  if (cfg.bias_strength > 0.0 && cfg.query_length < 2) {
    throw ConfigError("synth: a biased pair needs query_length >= 2");
  }
  if (!(cfg.min_span > 0.0 && cfg.min_span <= cfg.max_span && cfg.max_span <= 1.0)) {
    throw ConfigError("synth: need 0 < min_span <= max_span <= 1");
  }
  if (!(cfg.noise >= 0.0)) throw ConfigError("synth: noise must be non-negative");
}

Vocabulary synth_vocabulary(int vocab_size) {
  std::vector<std::string> words{"<pad>", "<mask>", "<unk>"};
  for (int id = kFirstWordId; id < vocab_size; ++id) words.push_back(word_name(id));
  return Vocabulary::from_words(words);
}

std::vector<SynthPair> synth_dataset(const SynthConfig& cfg) {
  validate(cfg);
  const int content = cfg.vocab_size - kFirstWordId;
  const BiasedPair biased;

  std::mt19937_64 latent_rng(mix_seed(cfg.seed, 0x1a7e47));
  std::normal_distribution<double> unit(0.0, 1.0);
  Eigen::MatrixXd latents(cfg.vocab_size, cfg.feature_dim);
  for (Eigen::Index i = 0; i < latents.size(); ++i) latents(i) = unit(latent_rng);

  std::vector<SynthPair> out;
  out.reserve(static_cast<std::size_t>(cfg.n_pairs));
  for (int n = 0; n < cfg.n_pairs; ++n) {
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x5eed, static_cast<std::uint64_t>(n)));
    std::uniform_int_distribution<int> word(kFirstWordId, kFirstWordId + content - 1);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    std::vector<int> tokens(static_cast<std::size_t>(cfg.query_length));
    for (auto& t : tokens) t = word(rng);
    if (u01(rng) < cfg.bias_strength) {
      std::uniform_int_distribution<int> at(0, cfg.query_length - 2);
      const auto p = static_cast<std::size_t>(at(rng));
      tokens[p] = biased.first;
      tokens[p + 1] = biased.second;
    }

    const int T = cfg.frames;
    const double frac = cfg.min_span + (cfg.max_span - cfg.min_span) * u01(rng);
    const int len = std::clamp(static_cast<int>(std::lround(frac * T)), 2, T);
    std::uniform_int_distribution<int> start_dist(0, T - len);
    const int start = start_dist(rng);

    // Background frames show unrelated content: runs of segment-chunk length
    // carrying latents of words absent from the query.
    std::vector<int> distractors;
    for (int w = kFirstWordId; w < cfg.vocab_size; ++w) {
      if (std::find(tokens.begin(), tokens.end(), w) == tokens.end()) distractors.push_back(w);
    }
    std::uniform_int_distribution<std::size_t> pick(0, distractors.size() - 1);
    const int run = std::max(1, len / cfg.query_length);

    // Every segment frame carries one latent shared with the query: the
    // norm-preserving sum of its word latents.
    Eigen::RowVectorXd shared = Eigen::RowVectorXd::Zero(cfg.feature_dim);
    for (int w : tokens) shared += latents.row(w);
    shared /= std::sqrt(static_cast<double>(tokens.size()));

    Eigen::MatrixXd frames(T, cfg.feature_dim);
    int background_word = -1;
    for (int t = 0; t < T; ++t) {
      for (int d = 0; d < cfg.feature_dim; ++d) frames(t, d) = cfg.noise * unit(rng);
      if (t >= start && t < start + len) {
        frames.row(t) += shared;
      } else if (cfg.distractors) {
        const int offset = t < start ? t : t - (start + len);
        if (offset % run == 0) background_word = distractors[pick(rng)];
        frames.row(t) += latents.row(background_word);
      }
    }

    SynthPair pair;
    pair.video.video_id = "synth_" + std::to_string(n);
    pair.video.frames = frames.cast<float>();
    pair.video.duration_s = static_cast<double>(T);

    std::string text;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) text += ' ';
      text += word_name(tokens[i]);
    }
    pair.record.video_id = pair.video.video_id;
    pair.record.feature_path = pair.video.video_id + ".fmat";
    pair.record.query = TokenizedQuery{tokens, text};
    pair.record.duration_s = pair.video.duration_s;
    const double scale = pair.video.duration_s / static_cast<double>(T - 1);
    pair.record.gt_span = Span{start * scale, (start + len - 1) * scale};
    out.push_back(std::move(pair));
  }
  return out;
}

}  // namespace ccr
