#include "keycap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "keycap/error.hpp"

namespace keycap {

std::size_t NGramCounts::total() const {
  std::size_t n = 0;
  for (const auto& [gram, c] : counts) n += c;
  return n;
}

NGramCounts ngram_counts(std::span<const std::string> tokens, std::size_t n) {
  if (n == 0) throw InputError("ngram_counts: order must be >= 1");
  NGramCounts out;
  out.order = n;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++out.counts[Tokens(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                        tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return out;
}

// ---- BLEU ----

BleuStats& BleuStats::operator+=(const BleuStats& other) {
  if (matches.size() != other.matches.size()) throw InputError("BleuStats: mismatched max_n");
  for (std::size_t i = 0; i < matches.size(); ++i) {
    matches[i] += other.matches[i];
    totals[i] += other.totals[i];
  }
  candidate_length += other.candidate_length;
  reference_length += other.reference_length;
  return *this;
}

BleuStats bleu_stats(std::span<const std::string> candidate, std::span<const Tokens> references, std::size_t max_n) {
  if (references.empty()) throw InputError("bleu: no references");
  if (max_n == 0) throw InputError("bleu: max_n must be >= 1");
  BleuStats stats;
  stats.matches.assign(max_n, 0);
  stats.totals.assign(max_n, 0);
  stats.candidate_length = candidate.size();

  std::size_t best_len = references[0].size();
  for (const auto& ref : references) {
    const auto diff = [&](std::size_t len) {
      return len > candidate.size() ? len - candidate.size() : candidate.size() - len;
    };
    if (diff(ref.size()) < diff(best_len) || (diff(ref.size()) == diff(best_len) && ref.size() < best_len)) {
      best_len = ref.size();
    }
  }
  stats.reference_length = best_len;

  for (std::size_t n = 1; n <= max_n; ++n) {
    const NGramCounts cand = ngram_counts(candidate, n);
    std::map<Tokens, std::size_t> max_ref;
    for (const auto& ref : references) {
      for (const auto& [gram, c] : ngram_counts(ref, n).counts) {
        auto& slot = max_ref[gram];
        slot = std::max(slot, c);
      }
    }
    for (const auto& [gram, c] : cand.counts) {
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) stats.matches[n - 1] += std::min(c, it->second);
    }
    stats.totals[n - 1] = cand.total();
  }
  return stats;
}

double bleu_from_stats(const BleuStats& stats, const BleuOptions& opts) {
  const std::size_t max_n = opts.max_n;
  if (max_n == 0 || max_n > stats.matches.size()) throw InputError("bleu: max_n outside collected statistics");
  if (stats.candidate_length == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (stats.totals[n] == 0) return 0.0;
    double p = static_cast<double>(stats.matches[n]) / static_cast<double>(stats.totals[n]);
    if (stats.matches[n] == 0) {
      if (opts.smoothing_epsilon <= 0) return 0.0;
      p = opts.smoothing_epsilon / static_cast<double>(stats.totals[n]);
    }
    log_sum += std::log(p) / static_cast<double>(max_n);
  }
  const double c = static_cast<double>(stats.candidate_length);
  const double r = static_cast<double>(stats.reference_length);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum);
}

double bleu(std::span<const std::string> candidate, std::span<const Tokens> references, const BleuOptions& opts) {
  return bleu_from_stats(bleu_stats(candidate, references, opts.max_n), opts);
}

// ---- CIDEr ----

CiderScorer::CiderScorer(std::span<const std::vector<Tokens>> corpus_refs, std::size_t max_n)
    : max_n_(max_n), corpus_size_(corpus_refs.size()) {
  if (corpus_refs.empty()) throw InputError("cider: corpus must contain at least one item");
  if (max_n == 0) throw InputError("cider: max_n must be >= 1");
  for (const auto& refs : corpus_refs) {
    std::set<Tokens> seen;
    for (const auto& ref : refs) {
      for (std::size_t n = 1; n <= max_n; ++n) {
        for (const auto& [gram, c] : ngram_counts(ref, n).counts) seen.insert(gram);
      }
    }
    for (const auto& gram : seen) ++document_frequency_[gram];
  }
}

double CiderScorer::idf(const Tokens& ngram) const {
  auto it = document_frequency_.find(ngram);
  const double df = it == document_frequency_.end() ? 0.0 : static_cast<double>(it->second);
  return std::log(static_cast<double>(corpus_size_) / std::max(1.0, df));
}

std::map<Tokens, double> CiderScorer::weights(std::span<const std::string> tokens, std::size_t n) const {
  const NGramCounts counts = ngram_counts(tokens, n);
  const double total = static_cast<double>(counts.total());
  std::map<Tokens, double> out;
  for (const auto& [gram, c] : counts.counts) out.emplace(gram, static_cast<double>(c) / total * idf(gram));
  return out;
}

double CiderScorer::score(std::span<const std::string> candidate, std::span<const Tokens> references) const {
  if (references.empty()) throw InputError("cider: item has no references");
  double total = 0.0;
  for (std::size_t n = 1; n <= max_n_; ++n) {
    const auto cand = weights(candidate, n);
    double cand_norm = 0.0;
    for (const auto& [gram, w] : cand) cand_norm += w * w;
    cand_norm = std::sqrt(cand_norm);
    double per_n = 0.0;
    for (const auto& ref : references) {
      const auto rw = weights(ref, n);
      double ref_norm = 0.0, dot = 0.0;
      for (const auto& [gram, w] : rw) {
        ref_norm += w * w;
        auto it = cand.find(gram);
        if (it != cand.end()) dot += w * it->second;
      }
      ref_norm = std::sqrt(ref_norm);
      if (cand_norm > 0 && ref_norm > 0) per_n += dot / (cand_norm * ref_norm);
    }
    total += per_n / static_cast<double>(references.size()) / static_cast<double>(max_n_);
  }
  return total;
}

double cider(std::span<const std::string> candidate, std::span<const Tokens> references,
             std::span<const std::vector<Tokens>> corpus_refs, std::size_t max_n) {
  return CiderScorer(corpus_refs, max_n).score(candidate, references);
}

// ---- ROUGE-L ----

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::span<const std::string> candidate, std::span<const Tokens> references, double beta) {
  if (references.empty()) throw InputError("rouge_l: no references");
  double best = 0.0;
  for (const auto& ref : references) {
    if (ref.empty()) throw InputError("rouge_l: empty reference");
    if (candidate.empty()) continue;
    const double lcs = static_cast<double>(lcs_length(ref, candidate));
    if (lcs == 0) continue;
    const double recall = lcs / static_cast<double>(ref.size());
    const double precision = lcs / static_cast<double>(candidate.size());
    const double b2 = beta * beta;
    best = std::max(best, (1 + b2) * recall * precision / (recall + b2 * precision));
  }
  return best;
}

// ---- METEOR ----

namespace {

// Depth-first branch and bound over candidate positions. Every alignment it
// visits has the maximum number of matches; it minimises the chunk count.
class ChunkSearch {
 public:
  static constexpr std::size_t kNodeBudget = 2'000'000;

  ChunkSearch(std::span<const std::string> cand, std::span<const std::string> ref) : cand_(cand), ref_(ref) {
    std::unordered_map<std::string, std::size_t> word_ids;
    std::vector<std::size_t> cand_count, ref_count;
    auto word_id = [&](const std::string& w) {
      auto [it, inserted] = word_ids.emplace(w, word_ids.size());
      if (inserted) {
        cand_count.push_back(0);
        ref_count.push_back(0);
      }
      return it->second;
    };
    cand_word_.resize(cand.size());
    for (std::size_t i = 0; i < cand.size(); ++i) {
      cand_word_[i] = word_id(cand[i]);
      ++cand_count[cand_word_[i]];
    }
    std::vector<std::size_t> ref_word(ref.size());
    for (std::size_t j = 0; j < ref.size(); ++j) {
      ref_word[j] = word_id(ref[j]);
      ++ref_count[ref_word[j]];
    }
    skips_left_.resize(cand_count.size());
    for (std::size_t w = 0; w < cand_count.size(); ++w) {
      const std::size_t m = std::min(cand_count[w], ref_count[w]);
      matches_ += m;
      skips_left_[w] = cand_count[w] - m;
    }
    options_.resize(cand.size());
    for (std::size_t i = 0; i < cand.size(); ++i) {
      for (std::size_t j = 0; j < ref.size(); ++j) {
        if (ref_word[j] == cand_word_[i]) options_[i].push_back(j);
      }
    }
    used_.assign(ref.size(), false);
  }

  MeteorAlignment run() {
    MeteorAlignment out;
    out.matches = matches_;
    if (matches_ == 0) return out;
    best_ = std::numeric_limits<std::size_t>::max();
    dfs(0, kNone, 0);
    out.chunks = best_;
    out.exact = nodes_ <= kNodeBudget;
    return out;
  }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  // prev_ref: reference position matched by candidate position i - 1, or kNone.
  void dfs(std::size_t i, std::size_t prev_ref, std::size_t chunks) {
    if (chunks >= best_) return;
    if (++nodes_ > kNodeBudget && best_ != std::numeric_limits<std::size_t>::max()) return;
    if (i == cand_.size()) {
      best_ = chunks;
      return;
    }
    const std::size_t w = cand_word_[i];
    // Continuing the current chunk is free, so try it first.
    if (prev_ref != kNone && prev_ref + 1 < ref_.size() && !used_[prev_ref + 1] &&
        ref_[prev_ref + 1] == cand_[i]) {
      used_[prev_ref + 1] = true;
      dfs(i + 1, prev_ref + 1, chunks);
      used_[prev_ref + 1] = false;
    }
    if (skips_left_[w] > 0) {
      --skips_left_[w];
      dfs(i + 1, kNone, chunks);
      ++skips_left_[w];
    }
    for (std::size_t j : options_[i]) {
      if (used_[j] || (prev_ref != kNone && j == prev_ref + 1)) continue;
      used_[j] = true;
      dfs(i + 1, j, chunks + 1);
      used_[j] = false;
    }
  }

  std::span<const std::string> cand_, ref_;
  std::vector<std::size_t> cand_word_;
  std::vector<std::size_t> skips_left_;
  std::vector<std::vector<std::size_t>> options_;
  std::vector<bool> used_;
  std::size_t matches_ = 0;
  std::size_t best_ = 0;
  std::size_t nodes_ = 0;
};

}  // namespace

MeteorAlignment meteor_align(std::span<const std::string> candidate, std::span<const std::string> reference) {
  return ChunkSearch(candidate, reference).run();
}

double meteor_score(std::size_t candidate_len, std::size_t reference_len, const MeteorAlignment& alignment) {
  if (candidate_len == 0 || reference_len == 0 || alignment.matches == 0) return 0.0;
  const double m = static_cast<double>(alignment.matches);
  const double precision = m / static_cast<double>(candidate_len);
  const double recall = m / static_cast<double>(reference_len);
  const double fmean = 10 * precision * recall / (recall + 9 * precision);
  const double frag = static_cast<double>(alignment.chunks) / m;
  return fmean * (1.0 - 0.5 * frag * frag * frag);
}

double meteor(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  return meteor_score(candidate.size(), reference.size(), meteor_align(candidate, reference));
}

double meteor(std::span<const std::string> candidate, std::span<const Tokens> references) {
  double best = 0.0;
  for (const auto& ref : references) best = std::max(best, meteor(candidate, std::span<const std::string>(ref)));
  return best;
}

// ---- report ----

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["bleu_1"] = bleu_1;
  j["bleu_2"] = bleu_2;
  j["bleu_3"] = bleu_3;
  j["bleu_4"] = bleu_4;
  j["bleu_avg"] = bleu_avg;
  j["cider"] = cider;
  j["rouge_l"] = rouge_l;
  j["meteor"] = meteor;
  j["corpus_size"] = corpus_size;
  return j.dump(2) + "\n";
}

MetricReport MetricReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MetricReport r;
  r.bleu_1 = j.at("bleu_1").get<double>();
  r.bleu_2 = j.at("bleu_2").get<double>();
  r.bleu_3 = j.at("bleu_3").get<double>();
  r.bleu_4 = j.at("bleu_4").get<double>();
  r.bleu_avg = j.at("bleu_avg").get<double>();
  r.cider = j.at("cider").get<double>();
  r.rouge_l = j.at("rouge_l").get<double>();
  r.meteor = j.at("meteor").get<double>();
  r.corpus_size = j.at("corpus_size").get<std::size_t>();
  return r;
}

MetricReport corpus_report(std::span<const ScoredPair> pairs, const BleuOptions& bleu_opts) {
  if (pairs.empty()) throw InputError("corpus_report: no items");
  BleuStats pooled;
  pooled.matches.assign(4, 0);
  pooled.totals.assign(4, 0);
  std::vector<std::vector<Tokens>> corpus;
  corpus.reserve(pairs.size());
  for (const auto& p : pairs) corpus.push_back(p.references);
  const CiderScorer cider_scorer(corpus);

  MetricReport r;
  r.corpus_size = pairs.size();
  for (const auto& p : pairs) {
    pooled += bleu_stats(p.candidate, p.references, 4);
    r.cider += cider_scorer.score(p.candidate, p.references);
    r.rouge_l += rouge_l(p.candidate, p.references);
    r.meteor += meteor(p.candidate, std::span<const Tokens>(p.references));
  }
  const double n = static_cast<double>(pairs.size());
  r.cider /= n;
  r.rouge_l /= n;
  r.meteor /= n;
  double* bleus[] = {&r.bleu_1, &r.bleu_2, &r.bleu_3, &r.bleu_4};
  for (std::size_t k = 1; k <= 4; ++k) {
    BleuOptions o = bleu_opts;
    o.max_n = k;
    *bleus[k - 1] = bleu_from_stats(pooled, o);
  }
  r.bleu_avg = (r.bleu_1 + r.bleu_2 + r.bleu_3 + r.bleu_4) / 4.0;
  return r;
}

double mean_sentence_bleu(std::span<const ScoredPair> pairs, const BleuOptions& opts) {
  if (pairs.empty()) throw InputError("mean_sentence_bleu: no items");
  double total = 0.0;
  for (const auto& p : pairs) total += bleu(p.candidate, p.references, opts);
  return total / static_cast<double>(pairs.size());
}

}  // namespace keycap
