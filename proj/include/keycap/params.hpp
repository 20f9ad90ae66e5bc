#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "keycap/tensor.hpp"

namespace keycap {

// Named tensors in insertion order. Iteration order is the serialization
// order, so it must not depend on hashing.
class Parameters {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  // Same names and shapes, all zeros.
  Parameters zeros_like() const;

  friend bool operator==(const Parameters& a, const Parameters& b);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Xavier/Glorot uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
Tensor xavier_uniform(std::size_t fan_out, std::size_t fan_in, SeededRng& rng);

// Lazily registers parameters as graph leaves, one Var per name.
class ParamBinding {
 public:
  ParamBinding(Graph& graph, const Parameters& params) : graph_(graph), params_(params) {}

  Var operator()(const std::string& name);
  bool has(const std::string& name) const { return params_.contains(name); }
  Graph& graph() { return graph_; }

  // Adds this graph's gradients into `into` (which has the layout of params).
  void accumulate_gradients(Parameters& into, double weight = 1.0) const;

 private:
  Graph& graph_;
  const Parameters& params_;
  std::unordered_map<std::string, Var> vars_;
};

}  // namespace keycap
