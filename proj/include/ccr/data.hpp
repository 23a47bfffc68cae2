#pragma once

// Feature files, tokenization, query masking, manifests and the synthetic
// corpus generator.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ccr {

inline constexpr int kPadId = 0;
inline constexpr int kMaskId = 1;
inline constexpr int kUnkId = 2;
inline constexpr int kFirstWordId = 3;

struct VideoFeatures {
  std::string video_id;
  Eigen::MatrixXf frames;  // T x Dv
  double duration_s = 1.0;

  Eigen::Index frame_count() const { return frames.rows(); }
  Eigen::Index feature_dim() const { return frames.cols(); }
};

struct TokenizedQuery {
  std::vector<int> tokens;
  std::string text;
};

struct MaskedQuery {
  std::vector<int> tokens;          // MASK id at every masked position
  std::vector<int> mask_positions;  // strictly increasing
  std::vector<int> targets;         // original ids at mask_positions
};

struct Span {
  double start = 0.0;
  double end = 0.0;
};

struct DatasetRecord {
  std::string video_id;
  std::string feature_path;
  TokenizedQuery query;
  std::optional<Span> gt_span;
  double duration_s = 1.0;
};

struct SynthConfig {
  int n_pairs = 100;
  int frames = 32;
  int feature_dim = 16;
  int vocab_size = 40;
  int query_length = 6;
  double bias_strength = 0.0;
  std::uint64_t seed = 0;
  // Fraction of the video covered by the planted segment.
  double min_span = 0.2;
  double max_span = 0.4;
  double noise = 0.3;
  // Background frames carry latents of words absent from the query.
  bool distractors = false;
};

struct SynthPair {
  DatasetRecord record;
  VideoFeatures video;
};

// Ids of the planted co-occurring word pair: a biased query contains `first`
// immediately followed by `second`.
struct BiasedPair {
  int first = kFirstWordId;
  int second = kFirstWordId + 1;
};

class Vocabulary {
 public:
  Vocabulary();

  // Reserved ids plus every distinct word in `texts`, sorted.
  static Vocabulary build(const std::vector<std::string>& texts);
  static Vocabulary from_words(const std::vector<std::string>& words);

  int id(const std::string& word) const;
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  // Lowercase, strip punctuation, split on whitespace, truncate to max_len.
  TokenizedQuery tokenize(const std::string& text, int max_len) const;

 private:
  void add(const std::string& word);

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

std::vector<std::string> split_words(const std::string& text);

// Token ids that may be masked: everything except PAD, MASK and stopwords.
struct MaskPolicy {
  std::set<int> excluded{kPadId, kMaskId};

  static MaskPolicy with_stopwords(const Vocabulary& vocab, const std::vector<std::string>& stoplist);
  bool maskable(int id) const { return !excluded.contains(id); }
};

std::vector<std::string> default_stoplist();

// Masks each maskable position independently with probability p_mask; if none
// is drawn, one maskable position is chosen uniformly instead.
MaskedQuery mask_query(const TokenizedQuery& query, double p_mask, std::mt19937_64& rng,
                       const MaskPolicy& policy = {});

VideoFeatures load_features(const std::filesystem::path& path);
void write_features(const std::filesystem::path& path, const Eigen::MatrixXf& frames);
void validate_features(const VideoFeatures& video);

// Word embedding import: rows of an FMAT file keyed by a newline-separated
// vocabulary list. Returns word -> row vector for words found in both.
std::unordered_map<std::string, Eigen::VectorXf> load_pretrained_embeddings(
    const std::filesystem::path& fmat_path, const std::filesystem::path& vocab_path);

std::vector<DatasetRecord> read_manifest(const std::filesystem::path& path, const Vocabulary* vocab,
                                         int max_len);
void write_manifest(const std::filesystem::path& path, const std::vector<DatasetRecord>& records);
std::vector<std::string> manifest_texts(const std::filesystem::path& path);

// Resolves a record's feature path against the manifest directory, or the
// data root when one is set.
std::filesystem::path resolve_feature_path(const std::string& feature_path,
                                           const std::filesystem::path& manifest_dir,
                                           const std::optional<std::filesystem::path>& data_root);

void validate(const SynthConfig& cfg);
Vocabulary synth_vocabulary(int vocab_size);
std::vector<SynthPair> synth_dataset(const SynthConfig& cfg);

// splitmix64 finalizer; combines seeds into independent stream seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c);

}  // namespace ccr
