#pragma once

// Flat key = value run configuration shared by every command. Each key has a
// documented default; unknown keys are rejected.

#include "ccr/data.hpp"
#include "ccr/infer_eval.hpp"
#include "ccr/model.hpp"
#include "ccr/trainer.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ccr {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string doc;
};

class RunConfig {
 public:
  RunConfig();

  // Every recognized key, in documentation order.
  static const std::vector<ConfigKey>& keys();

  // Lines are `key = value`; `#` starts a comment; blank lines are ignored.
  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;

  // Every key with its current value, one `key = value` line each.
  std::string dump() const;

  SynthConfig synth() const;
  ModelConfig model() const;
  TrainConfig train() const;
  InferOptions infer() const;
  MaskPolicy mask_policy(const Vocabulary& vocab) const;

  // Checks every typed view; throws ConfigError on the first violation.
  void validate() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace ccr
