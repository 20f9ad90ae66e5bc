#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "keycap/error.hpp"

namespace keycap {

struct BeamHypothesis {
  std::vector<std::size_t> tokens;  // generated ids, excluding <start>; ends with <end> when finished
  double log_prob = 0.0;            // cumulative
  bool finished = false;
};

struct SearchOptions {
  std::size_t beams = 1;
  std::size_t max_len = 50;  // generated tokens, <end> included
  std::size_t start_token = 0;
  std::size_t end_token = 0;
  bool length_normalized = false;
};

// A step model exposes
//   using State = ...;
//   State initial() const;
//   std::pair<std::vector<double>, State> step(const State&, std::size_t token) const;
// where the vector holds log-probabilities of every next token.

namespace detail {

inline double beam_score(const BeamHypothesis& h, bool length_normalized) {
  if (!length_normalized || h.tokens.empty()) return h.log_prob;
  return h.log_prob / static_cast<double>(h.tokens.size());
}

// Higher score first; ties go to the shorter, then lexicographically smaller sequence.
inline bool better(const BeamHypothesis& a, const BeamHypothesis& b, bool length_normalized) {
  const double sa = beam_score(a, length_normalized), sb = beam_score(b, length_normalized);
  if (sa != sb) return sa > sb;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

}  // namespace detail

// Argmax decoding; ties go to the lowest token id.
template <typename Model>
BeamHypothesis greedy_search(const Model& model, const SearchOptions& opts) {
  BeamHypothesis hyp;
  auto state = model.initial();
  std::size_t prev = opts.start_token;
  while (hyp.tokens.size() < opts.max_len) {
    auto [log_probs, next] = model.step(state, prev);
    std::size_t best = 0;
    double best_total = -std::numeric_limits<double>::infinity();
    for (std::size_t tok = 0; tok < log_probs.size(); ++tok) {
      const double total = hyp.log_prob + log_probs[tok];
      if (total > best_total) {
        best_total = total;
        best = tok;
      }
    }
    hyp.tokens.push_back(best);
    hyp.log_prob = best_total;
    state = std::move(next);
    prev = best;
    if (best == opts.end_token) {
      hyp.finished = true;
      break;
    }
  }
  return hyp;
}

// Length-capped beam search over cumulative log-probabilities. Hypotheses
// that emit <end> are retired; unfinished ones reaching max_len compete with
// the retired ones for the final pick.
template <typename Model>
BeamHypothesis beam_search(const Model& model, const SearchOptions& opts) {
  if (opts.beams < 1) throw InputError("beam_search: beams must be >= 1");
  if (opts.max_len < 1) throw InputError("beam_search: max_len must be >= 1");
  using State = typename Model::State;

  struct Live {
    BeamHypothesis hyp;
    State state;
  };
  struct Candidate {
    BeamHypothesis hyp;
    std::size_t parent;
  };

  std::vector<Live> live;
  live.push_back({BeamHypothesis{}, model.initial()});
  std::vector<BeamHypothesis> done;
  const bool norm = opts.length_normalized;

  for (std::size_t depth = 0; depth < opts.max_len && !live.empty(); ++depth) {
    std::vector<Candidate> candidates;
    std::vector<State> next_states;
    next_states.reserve(live.size());
    for (std::size_t p = 0; p < live.size(); ++p) {
      const std::size_t prev = live[p].hyp.tokens.empty() ? opts.start_token : live[p].hyp.tokens.back();
      auto [log_probs, next] = model.step(live[p].state, prev);
      next_states.push_back(std::move(next));
      for (std::size_t tok = 0; tok < log_probs.size(); ++tok) {
        Candidate c{live[p].hyp, p};
        c.hyp.tokens.push_back(tok);
        c.hyp.log_prob += log_probs[tok];
        c.hyp.finished = tok == opts.end_token;
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(opts.beams, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [norm](const Candidate& a, const Candidate& b) { return detail::better(a.hyp, b.hyp, norm); });
    std::vector<Live> next_live;
    for (std::size_t i = 0; i < keep; ++i) {
      Candidate& c = candidates[i];
      if (c.hyp.finished) {
        done.push_back(std::move(c.hyp));
      } else {
        next_live.push_back({std::move(c.hyp), next_states[c.parent]});
      }
    }
    live = std::move(next_live);

    // Extending a hypothesis never raises its total log-probability, so once
    // the best retired one matches the best live one nothing can overtake it.
    if (!norm && !done.empty() && !live.empty()) {
      double best_done = -std::numeric_limits<double>::infinity();
      for (const auto& d : done) best_done = std::max(best_done, d.log_prob);
      double best_live = -std::numeric_limits<double>::infinity();
      for (const auto& l : live) best_live = std::max(best_live, l.hyp.log_prob);
      if (best_done >= best_live) live.clear();
    }
  }
  for (auto& l : live) done.push_back(std::move(l.hyp));
  return *std::min_element(done.begin(), done.end(), [norm](const BeamHypothesis& a, const BeamHypothesis& b) {
    return detail::better(a, b, norm);
  });
}

}  // namespace keycap
