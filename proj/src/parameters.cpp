#include "ccr/parameters.hpp"

#include <cmath>
#include <stdexcept>

namespace ccr {

ag::Var ParameterStore::add(const std::string& name, ag::Matrix init) {
  if (index_.contains(name)) throw std::logic_error("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, ag::Var(std::move(init), true)});
  return entries_.back().var;
}

const ag::Var& ParameterStore::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return entries_[it->second].var;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.var.value().size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

ag::Matrix uniform_matrix(ag::Index rows, ag::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  ag::Matrix m(rows, cols);
  for (ag::Index i = 0; i < m.size(); ++i) m(i) = u(rng);
  return m;
}

ag::Matrix xavier_uniform(ag::Index rows, ag::Index cols, std::mt19937_64& rng) {
  return uniform_matrix(rows, cols, std::sqrt(6.0 / static_cast<double>(rows + cols)), rng);
}

}  // namespace ccr
