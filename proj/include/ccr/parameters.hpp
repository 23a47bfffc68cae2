#pragma once

#include "ccr/autograd.hpp"

#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace ccr {

// Ordered collection of named trainable matrices. Entries are graph leaves;
// copies of the returned Vars alias the stored parameter.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    ag::Var var;
  };

  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  ag::Var add(const std::string& name, ag::Matrix init);
  const ag::Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

ag::Matrix xavier_uniform(ag::Index rows, ag::Index cols, std::mt19937_64& rng);
ag::Matrix uniform_matrix(ag::Index rows, ag::Index cols, double bound, std::mt19937_64& rng);

}  // namespace ccr
