#include "keycap/params.hpp"

#include <cmath>

#include "keycap/error.hpp"

namespace keycap {

void Parameters::add(std::string name, Tensor value) {
  if (index_.count(name)) throw InputError("duplicate parameter name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(value)});
}

Tensor& Parameters::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("unknown parameter '" + name + "'");
  return entries_[it->second].value;
}

const Tensor& Parameters::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("unknown parameter '" + name + "'");
  return entries_[it->second].value;
}

std::size_t Parameters::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

Parameters Parameters::zeros_like() const {
  Parameters out;
  for (const auto& e : entries_) out.add(e.name, Tensor::zeros(e.value.shape()));
  return out;
}

bool operator==(const Parameters& a, const Parameters& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) return false;
  }
  return true;
}

Tensor xavier_uniform(std::size_t fan_out, std::size_t fan_in, SeededRng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return random_uniform({fan_out, fan_in}, -bound, bound, rng);
}

Var ParamBinding::operator()(const std::string& name) {
  auto it = vars_.find(name);
  if (it != vars_.end()) return it->second;
  Var v = graph_.parameter(params_.at(name));
  vars_.emplace(name, v);
  return v;
}

void ParamBinding::accumulate_gradients(Parameters& into, double weight) const {
  for (const auto& [name, var] : vars_) {
    Tensor& dst = into.at(name);
    const Tensor g = graph_.grad(var);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += weight * g[i];
  }
}

}  // namespace keycap
