#pragma once

// Helpers shared by the unit tests and the acceptance runner: a finite
// difference checker and independent brute-force reference implementations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "keycap/beam.hpp"
#include "keycap/encoder.hpp"
#include "keycap/model.hpp"
#include "keycap/metrics.hpp"
#include "keycap/params.hpp"
#include "keycap/tensor.hpp"

namespace support {

using keycap::Graph;
using keycap::Tensor;
using keycap::Var;

using Builder = std::function<Var(Graph&, std::span<const Var>)>;

inline Tensor random_tensor(keycap::Shape shape, keycap::SeededRng& rng, double lo = -1.0, double hi = 1.0) {
  return keycap::random_uniform(std::move(shape), lo, hi, rng);
}

// Reduces a non-scalar output to a scalar with fixed random weights so every
// output element contributes to the checked gradient.
inline Var weighted_sum(Graph& g, Var out, const Tensor& weights) {
  if (out.value().size() == 1) return out;
  return keycap::sum(keycap::mul(out, g.constant(weights)));
}

struct GradResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
};

// Gradients whose true value is identically zero (a key bias under softmax
// shift invariance, say) leave only rounding noise on both sides; the floor
// keeps noise/noise from reading as a large relative error.
inline constexpr double kGradNormFloor = 1e-6;

// Norm-wise relative error ||a - n|| / max(||a|| + ||n||, floor) per input,
// with n from central differences of step h.
inline GradResult check_gradients(const Builder& f, const std::vector<Tensor>& inputs, std::uint64_t seed = 7,
                                  double h = 1e-5) {
  Tensor weights;
  auto evaluate = [&](const std::vector<Tensor>& xs, bool with_grad, std::vector<Tensor>* grads) {
    Graph g(with_grad);
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(g.variable(x));
    Var out = f(g, vars);
    if (weights.empty()) {
      keycap::SeededRng rng(seed);
      weights = random_tensor(out.shape(), rng, 0.5, 1.5);
    }
    Var loss = weighted_sum(g, out, weights);
    if (grads) {
      g.backward(loss);
      for (const auto& v : vars) grads->push_back(g.grad(v));
    }
    return loss.value().item();
  };

  std::vector<Tensor> analytic;
  evaluate(inputs, true, &analytic);
  GradResult result;
  std::vector<Tensor> xs = inputs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
    for (std::size_t i = 0; i < xs[k].size(); ++i) {
      const double orig = xs[k][i];
      xs[k][i] = orig + h;
      const double up = evaluate(xs, false, nullptr);
      xs[k][i] = orig - h;
      const double down = evaluate(xs, false, nullptr);
      xs[k][i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][i];
      diff_sq += (a - numeric) * (a - numeric);
      a_sq += a * a;
      n_sq += numeric * numeric;
    }
    const double rel = std::sqrt(diff_sq) / std::max(std::sqrt(a_sq) + std::sqrt(n_sq), kGradNormFloor);
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_input = k;
    }
  }
  return result;
}

struct OpCase {
  std::string name;
  Builder build;
  std::vector<Tensor> inputs;
};

// One case per differentiable operation, inputs kept away from kinks.
inline std::vector<OpCase> op_cases(std::uint64_t seed) {
  using namespace keycap;
  SeededRng rng(seed);
  auto r = [&](Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor(std::move(s), rng, lo, hi); };
  auto away_from_zero = [&](Shape s) {
    Tensor t = r(std::move(s));
    for (double& v : t.data()) v = v < 0 ? v - 0.2 : v + 0.2;
    return t;
  };
  const std::vector<std::size_t> labels3 = {2, 0, 1};
  const std::vector<std::size_t> ids = {3, 0, 3, 1};
  std::vector<OpCase> cases;
  cases.push_back({"matmul", [](Graph&, std::span<const Var> v) { return matmul(v[0], v[1]); }, {r({3, 4}), r({4, 2})}});
  cases.push_back({"linear", [](Graph&, std::span<const Var> v) { return linear(v[0], v[1], v[2]); },
                   {r({3, 4}), r({5, 4}), r({5})}});
  cases.push_back({"linear_nobias", [](Graph&, std::span<const Var> v) { return linear(v[0], v[1]); },
                   {r({2, 3}), r({4, 3})}});
  cases.push_back({"transpose", [](Graph&, std::span<const Var> v) { return transpose(v[0]); }, {r({3, 2})}});
  cases.push_back({"add", [](Graph&, std::span<const Var> v) { return add(v[0], v[1]); }, {r({2, 3}), r({2, 3})}});
  cases.push_back({"add_bias", [](Graph&, std::span<const Var> v) { return add(v[0], v[1]); }, {r({2, 3}), r({3})}});
  cases.push_back({"sub", [](Graph&, std::span<const Var> v) { return sub(v[0], v[1]); }, {r({2, 3}), r({2, 3})}});
  cases.push_back({"mul", [](Graph&, std::span<const Var> v) { return mul(v[0], v[1]); }, {r({2, 3}), r({2, 3})}});
  cases.push_back({"scale", [](Graph&, std::span<const Var> v) { return scale(v[0], -1.7); }, {r({2, 3})}});
  cases.push_back({"tanh", [](Graph&, std::span<const Var> v) { return keycap::tanh(v[0]); }, {r({2, 3}, -2, 2)}});
  cases.push_back({"sigmoid", [](Graph&, std::span<const Var> v) { return sigmoid(v[0]); }, {r({2, 3}, -3, 3)}});
  cases.push_back({"gelu", [](Graph&, std::span<const Var> v) { return gelu(v[0]); }, {r({2, 3}, -3, 3)}});
  cases.push_back({"relu", [](Graph&, std::span<const Var> v) { return relu(v[0]); }, {away_from_zero({2, 3})}});
  cases.push_back({"log", [](Graph&, std::span<const Var> v) { return keycap::log(v[0]); }, {r({2, 3}, 0.2, 2.0)}});
  cases.push_back({"sum", [](Graph&, std::span<const Var> v) { return sum(v[0]); }, {r({2, 3})}});
  cases.push_back({"reshape", [](Graph&, std::span<const Var> v) { return reshape(v[0], {3, 2}); }, {r({2, 3})}});
  cases.push_back({"concat_lastdim", [](Graph&, std::span<const Var> v) { return concat_lastdim({v[0], v[1]}); },
                   {r({2, 3}), r({2, 2})}});
  cases.push_back({"concat_rows", [](Graph&, std::span<const Var> v) { return concat_rows(v); },
                   {r({1, 3}), r({2, 3})}});
  cases.push_back({"slice_lastdim", [](Graph&, std::span<const Var> v) { return slice_lastdim(v[0], 1, 2); },
                   {r({3, 4})}});
  cases.push_back({"row", [](Graph&, std::span<const Var> v) { return row(v[0], 1); }, {r({3, 4})}});
  cases.push_back({"repeat_rows", [](Graph&, std::span<const Var> v) { return repeat_rows(v[0], 3); }, {r({1, 4})}});
  cases.push_back({"embedding_lookup", [ids](Graph&, std::span<const Var> v) { return embedding_lookup(v[0], ids); },
                   {r({5, 3})}});
  cases.push_back({"softmax_lastdim", [](Graph&, std::span<const Var> v) { return softmax_lastdim(v[0]); },
                   {r({3, 4}, -2, 2)}});
  cases.push_back({"layer_norm", [](Graph&, std::span<const Var> v) { return layer_norm(v[0], v[1], v[2], 1e-5); },
                   {r({3, 5}), r({5}, 0.5, 1.5), r({5})}});
  cases.push_back({"masked_fill", [](Graph&, std::span<const Var> v) {
                     return softmax_lastdim(masked_fill(v[0], Mask{true, true, false, true}));
                   },
                   {r({4, 4})}});
  cases.push_back({"mean_rows", [](Graph&, std::span<const Var> v) { return mean_rows(v[0], Mask{true, false, true}); },
                   {r({3, 4})}});
  cases.push_back({"categorical_cross_entropy", [labels3](Graph&, std::span<const Var> v) {
                     return categorical_cross_entropy(v[0], labels3, Mask{true, true, false});
                   },
                   {r({3, 4}, 0.1, 1.0)}});
  cases.push_back({"softmax_cross_entropy", [labels3](Graph&, std::span<const Var> v) {
                     return softmax_cross_entropy(v[0], labels3);
                   },
                   {r({3, 4}, -2, 2)}});
  return cases;
}

// ---- brute-force metric references ----

using Tokens = std::vector<std::string>;

inline Tokens random_sentence(keycap::SeededRng& rng, std::size_t min_len, std::size_t max_len,
                              std::size_t alphabet = 4) {
  static const char* words[] = {"a", "b", "c", "d", "e", "f", "g", "h"};
  const std::size_t len = min_len + rng.below(max_len - min_len + 1);
  Tokens out;
  for (std::size_t i = 0; i < len; ++i) out.push_back(words[rng.below(alphabet)]);
  return out;
}

// All n-grams, duplicates included, in order of appearance.
inline std::vector<Tokens> all_ngrams(const Tokens& s, std::size_t n) {
  std::vector<Tokens> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) out.emplace_back(s.begin() + i, s.begin() + i + n);
  return out;
}

inline std::size_t occurrences(const std::vector<Tokens>& grams, const Tokens& g) {
  return static_cast<std::size_t>(std::count(grams.begin(), grams.end(), g));
}

inline double bleu_bruteforce(const Tokens& cand, const std::vector<Tokens>& refs, std::size_t max_n = 4) {
  if (cand.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto cg = all_ngrams(cand, n);
    if (cg.empty()) return 0.0;
    std::size_t matched = 0;
    // Each distinct candidate n-gram is counted once, at its first position.
    for (std::size_t i = 0; i < cg.size(); ++i) {
      if (std::find(cg.begin(), cg.begin() + i, cg[i]) != cg.begin() + i) continue;
      std::size_t max_ref = 0;
      for (const auto& r : refs) max_ref = std::max(max_ref, occurrences(all_ngrams(r, n), cg[i]));
      matched += std::min(occurrences(cg, cg[i]), max_ref);
    }
    if (matched == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched) / static_cast<double>(cg.size()));
  }
  const double c = static_cast<double>(cand.size());
  double r = static_cast<double>(refs.front().size());
  for (const auto& ref : refs) {
    const double len = static_cast<double>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

// Exhaustive subsequence enumeration of a (|a| <= ~16).
inline std::size_t lcs_bruteforce(const Tokens& a, const Tokens& b) {
  std::size_t best = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << a.size()); ++mask) {
    Tokens sub;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (mask >> i & 1) sub.push_back(a[i]);
    }
    if (sub.size() <= best) continue;
    std::size_t j = 0;
    for (const auto& t : b) {
      if (j < sub.size() && sub[j] == t) ++j;
    }
    if (j == sub.size()) best = sub.size();
  }
  return best;
}

inline double rouge_l_bruteforce(const Tokens& cand, const std::vector<Tokens>& refs, double beta = 1.2) {
  double best = 0.0;
  for (const auto& ref : refs) {
    if (cand.empty() || ref.empty()) continue;
    const double lcs = static_cast<double>(lcs_bruteforce(cand, ref));
    if (lcs == 0) continue;
    const double r = lcs / static_cast<double>(ref.size());
    const double p = lcs / static_cast<double>(cand.size());
    best = std::max(best, (1 + beta * beta) * r * p / (r + beta * beta * p));
  }
  return best;
}

struct Alignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

// Every partial matching of equal tokens; keeps max matches, then min chunks.
inline Alignment meteor_align_bruteforce(const Tokens& cand, const Tokens& ref) {
  Alignment best;
  bool have = false;
  std::vector<long> to_ref(cand.size(), -1);
  std::vector<bool> used(ref.size(), false);
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == cand.size()) {
      std::size_t matches = 0, chunks = 0;
      long prev_c = -2, prev_r = -2;
      for (std::size_t k = 0; k < cand.size(); ++k) {
        if (to_ref[k] < 0) continue;
        ++matches;
        if (!(static_cast<long>(k) == prev_c + 1 && to_ref[k] == prev_r + 1)) ++chunks;
        prev_c = static_cast<long>(k);
        prev_r = to_ref[k];
      }
      if (!have || matches > best.matches || (matches == best.matches && chunks < best.chunks)) {
        best = {matches, chunks};
        have = true;
      }
      return;
    }
    rec(i + 1);
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (used[j] || ref[j] != cand[i]) continue;
      used[j] = true;
      to_ref[i] = static_cast<long>(j);
      rec(i + 1);
      to_ref[i] = -1;
      used[j] = false;
    }
  };
  rec(0);
  return best;
}

inline double meteor_bruteforce(const Tokens& cand, const Tokens& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  const Alignment a = meteor_align_bruteforce(cand, ref);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(cand.size());
  const double r = m / static_cast<double>(ref.size());
  const double f = 10 * p * r / (r + 9 * p);
  const double frag = static_cast<double>(a.chunks) / m;
  return f * (1 - 0.5 * frag * frag * frag);
}

// TF-IDF cosine from first principles: vectors are built over the explicit
// list of distinct n-grams of both sides.
inline double cider_bruteforce(const Tokens& cand, const std::vector<Tokens>& refs,
                               const std::vector<std::vector<Tokens>>& corpus, std::size_t max_n = 4) {
  const double n_docs = static_cast<double>(corpus.size());
  auto idf = [&](const Tokens& g, std::size_t n) {
    std::size_t df = 0;
    for (const auto& image_refs : corpus) {
      bool present = false;
      for (const auto& r : image_refs) present = present || occurrences(all_ngrams(r, n), g) > 0;
      df += present;
    }
    return std::log(n_docs / static_cast<double>(std::max<std::size_t>(1, df)));
  };
  double total = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto cg = all_ngrams(cand, n);
    double per_ref = 0.0;
    for (const auto& ref : refs) {
      const auto rg = all_ngrams(ref, n);
      std::vector<Tokens> keys;
      for (const auto& g : cg) {
        if (std::find(keys.begin(), keys.end(), g) == keys.end()) keys.push_back(g);
      }
      for (const auto& g : rg) {
        if (std::find(keys.begin(), keys.end(), g) == keys.end()) keys.push_back(g);
      }
      double dot = 0.0, nc = 0.0, nr = 0.0;
      for (const auto& g : keys) {
        const double w = idf(g, n);
        const double vc = cg.empty() ? 0.0 : w * static_cast<double>(occurrences(cg, g)) / static_cast<double>(cg.size());
        const double vr = rg.empty() ? 0.0 : w * static_cast<double>(occurrences(rg, g)) / static_cast<double>(rg.size());
        dot += vc * vr;
        nc += vc * vc;
        nr += vr * vr;
      }
      if (nc > 0 && nr > 0) per_ref += dot / (std::sqrt(nc) * std::sqrt(nr));
    }
    total += per_ref / static_cast<double>(refs.size());
  }
  return total / static_cast<double>(max_n);
}

// ---- straight-line encoder transcription (single head, single block) ----

using Matrix = std::vector<std::vector<double>>;

inline Matrix rows_of(const Tensor& t) {
  Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    for (std::size_t c = 0; c < t.dim(1); ++c) m[r][c] = t.at(r, c);
  }
  return m;
}

inline double act(double v, keycap::Activation a) {
  switch (a) {
    case keycap::Activation::gelu: return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    case keycap::Activation::tanh: return std::tanh(v);
    case keycap::Activation::relu: return v > 0 ? v : 0.0;
  }
  return v;
}

// Output of the block for every position, before pooling. Every id is
// treated as a real token.
inline Matrix encoder_reference(const keycap::EncoderConfig& cfg, const keycap::Parameters& p,
                                const std::vector<std::size_t>& ids) {
  const std::string b = "encoder.block0.";
  const Tensor& table = p.at("embed.tokens");
  const Tensor& pos = p.at("encoder.positional");
  const std::size_t len = ids.size(), e = cfg.embed_size, h = cfg.hidden_size, f = cfg.ffn_size;

  // x_n = W_e k_n (+ position)
  Matrix x(len, std::vector<double>(e));
  for (std::size_t n = 0; n < len; ++n) {
    for (std::size_t j = 0; j < e; ++j) x[n][j] = table.at(ids[n], j) + (cfg.positional ? pos.at(n, j) : 0.0);
  }
  auto project = [&](const std::string& w, const std::string& bias) {
    const Tensor& W = p.at(b + w);
    const Tensor& B = p.at(b + bias);
    Matrix out(len, std::vector<double>(h));
    for (std::size_t n = 0; n < len; ++n) {
      for (std::size_t o = 0; o < h; ++o) {
        double acc = B[o];
        for (std::size_t j = 0; j < e; ++j) acc += W.at(o, j) * x[n][j];
        out[n][o] = acc;
      }
    }
    return out;
  };
  const Matrix Q = project("wq", "bq"), K = project("wk", "bk"), V = project("wv", "bv");

  // softmax(m(QKᵀ / sqrt(d_k))) V, masking j > i.
  Matrix att(len, std::vector<double>(h, 0.0));
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<double> s(i + 1);
    for (std::size_t j = 0; j <= i; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < h; ++c) dot += Q[i][c] * K[j][c];
      s[j] = dot / std::sqrt(static_cast<double>(h));
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double& v : s) z += (v = std::exp(v - mx));
    for (std::size_t j = 0; j <= i; ++j) {
      for (std::size_t c = 0; c < h; ++c) att[i][c] += s[j] / z * V[j][c];
    }
  }

  // LayerNorm
  const Tensor& gain = p.at(b + "ln_gain");
  const Tensor& lnb = p.at(b + "ln_bias");
  Matrix zn(len, std::vector<double>(h));
  for (std::size_t i = 0; i < len; ++i) {
    double mean = 0.0;
    for (double v : att[i]) mean += v;
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (double v : att[i]) var += (v - mean) * (v - mean);
    var /= static_cast<double>(h);
    for (std::size_t c = 0; c < h; ++c) zn[i][c] = gain[c] * (att[i][c] - mean) / std::sqrt(var + cfg.eps) + lnb[c];
  }

  // F = σ(W1 z + b1) W2 + b2
  const Tensor& W1 = p.at(b + "w1");
  const Tensor& B1 = p.at(b + "b1");
  const Tensor& W2 = p.at(b + "w2");
  const Tensor& B2 = p.at(b + "b2");
  Matrix out(len, std::vector<double>(h));
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<double> hid(f);
    for (std::size_t k = 0; k < f; ++k) {
      double acc = B1[k];
      for (std::size_t c = 0; c < h; ++c) acc += W1.at(k, c) * zn[i][c];
      hid[k] = act(acc, cfg.activation);
    }
    for (std::size_t c = 0; c < h; ++c) {
      double acc = B2[c];
      for (std::size_t k = 0; k < f; ++k) acc += W2.at(c, k) * hid[k];
      out[i][c] = acc;
    }
  }
  return out;
}

inline double max_abs_diff(const Matrix& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r) {
    for (std::size_t c = 0; c < a[r].size(); ++c) worst = std::max(worst, std::abs(a[r][c] - b.at(r, c)));
  }
  return worst;
}

// ---- decoding oracles ----

// Log-probabilities depend on the whole prefix through a seeded hash, so
// greedy choices are often not globally optimal.
class ToyStepModel {
 public:
  using State = std::vector<std::size_t>;

  ToyStepModel(std::size_t vocab, std::uint64_t seed, double sharpness = 2.0)
      : vocab_(vocab), seed_(seed), sharpness_(sharpness) {}

  State initial() const { return {}; }

  std::pair<std::vector<double>, State> step(const State& prefix, std::size_t token) const {
    State next = prefix;
    next.push_back(token);
    std::uint64_t h = seed_ * 0x9e3779b97f4a7c15ULL + 1;
    for (std::size_t t : next) h = (h ^ (t + 0x51ed27)) * 0x100000001b3ULL;
    keycap::SeededRng rng(h);
    std::vector<double> logits(vocab_);
    for (double& l : logits) l = sharpness_ * rng.normal();
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    for (double& l : logits) l = l - mx - std::log(z);
    return {logits, next};
  }

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
  double sharpness_;
};

// Every sequence that ends in <end> within max_len, or reaches max_len
// without it; best by the same ranking beam_search uses.
template <typename Model>
keycap::BeamHypothesis exhaustive_search(const Model& model, const keycap::SearchOptions& opts) {
  keycap::BeamHypothesis best;
  bool have = false;
  std::function<void(const keycap::BeamHypothesis&, const typename Model::State&)> rec =
      [&](const keycap::BeamHypothesis& hyp, const typename Model::State& state) {
        const bool terminal = hyp.finished || hyp.tokens.size() == opts.max_len;
        if (terminal) {
          if (!have || keycap::detail::better(hyp, best, opts.length_normalized)) best = hyp;
          have = true;
          return;
        }
        const std::size_t prev = hyp.tokens.empty() ? opts.start_token : hyp.tokens.back();
        auto [log_probs, next] = model.step(state, prev);
        for (std::size_t tok = 0; tok < log_probs.size(); ++tok) {
          keycap::BeamHypothesis child = hyp;
          child.tokens.push_back(tok);
          child.log_prob += log_probs[tok];
          child.finished = tok == opts.end_token;
          rec(child, next);
        }
      };
  rec(keycap::BeamHypothesis{}, model.initial());
  return best;
}

// Central differences over every parameter scalar of the model loss;
// returns the worst norm-wise relative error over parameter tensors.
inline double model_gradient_error(keycap::CaptionModel& model, const keycap::Example& ex, double h = 1e-5,
                                   std::string* worst_name = nullptr) {
  using namespace keycap;
  Graph g;
  ParamBinding bind(g, model.parameters());
  auto fwd = model.forward(bind, ex);
  g.backward(fwd.tf.loss);
  Parameters grads = model.parameters().zeros_like();
  bind.accumulate_gradients(grads);
  double worst = 0.0;
  for (std::size_t k = 0; k < model.parameters().size(); ++k) {
    Tensor& value = model.parameters().entries()[k].value;
    const Tensor& analytic = grads.entries()[k].value;
    double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      value[i] = orig + h;
      const double up = model.loss(ex);
      value[i] = orig - h;
      const double down = model.loss(ex);
      value[i] = orig;
      const double numeric = (up - down) / (2 * h);
      diff_sq += (analytic[i] - numeric) * (analytic[i] - numeric);
      a_sq += analytic[i] * analytic[i];
      n_sq += numeric * numeric;
    }
    const double rel = std::sqrt(diff_sq) / std::max(std::sqrt(a_sq) + std::sqrt(n_sq), kGradNormFloor);
    if (rel > worst) {
      worst = rel;
      if (worst_name) *worst_name = model.parameters().entries()[k].name;
    }
  }
  return worst;
}

// Micro model used by gradient and decoding checks.
inline keycap::ModelConfig micro_config(std::size_t vocab = 12) {
  keycap::ModelConfig cfg;
  cfg.encoder.embed_size = 8;
  cfg.encoder.hidden_size = 8;
  cfg.encoder.num_blocks = 1;
  cfg.encoder.num_heads = 2;
  cfg.encoder.ffn_size = 8;
  cfg.encoder.output_size = 6;
  cfg.encoder.max_keyword_len = 6;
  cfg.generator.image_feature_size = 4;
  cfg.generator.word_embed_size = 8;
  cfg.generator.lstm_hidden = 8;
  cfg.generator.max_gen_len = 6;
  cfg.finalize(vocab);
  return cfg;
}

// Random weights everywhere so zero-initialised tensors are exercised too.
inline void randomize(keycap::Parameters& p, std::uint64_t seed, double scale = 0.5) {
  keycap::SeededRng rng(seed);
  for (auto& e : p.entries()) {
    for (double& v : e.value.data()) v = rng.uniform(-scale, scale);
  }
}

inline keycap::Example random_example(std::size_t vocab, std::size_t image_size, std::size_t kw_len,
                                      std::size_t caption_len, keycap::SeededRng& rng) {
  keycap::Example ex;
  ex.id = "x";
  const std::size_t used_kw = 1 + rng.below(kw_len);
  ex.keywords.ids.assign(kw_len, keycap::kPad);
  for (std::size_t i = 0; i < used_kw; ++i) ex.keywords.ids[i] = keycap::kSeparator + rng.below(vocab - keycap::kSeparator);
  ex.keywords.true_length = used_kw;
  const std::size_t used = 2 + rng.below(caption_len - 1);
  ex.caption.ids.assign(caption_len, keycap::kPad);
  ex.caption.ids[0] = keycap::kStart;
  for (std::size_t i = 1; i + 1 < used; ++i) ex.caption.ids[i] = keycap::kSeparator + 1 + rng.below(vocab - keycap::kSeparator - 1);
  ex.caption.ids[used - 1] = keycap::kEnd;
  ex.caption.true_length = used;
  ex.image = random_tensor({1, image_size}, rng);
  return ex;
}

}  // namespace support
