#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace keycap {

using Tokens = std::vector<std::string>;

struct NGramCounts {
  std::size_t order = 0;
  std::map<Tokens, std::size_t> counts;

  std::size_t total() const;
};

NGramCounts ngram_counts(std::span<const std::string> tokens, std::size_t n);

// Clipped n-gram statistics of one candidate, indexed by n - 1.
struct BleuStats {
  std::vector<std::size_t> matches;
  std::vector<std::size_t> totals;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;  // effective r: closest reference, ties to the shorter

  BleuStats& operator+=(const BleuStats& other);
};

struct BleuOptions {
  std::size_t max_n = 4;
  // 0 disables smoothing; otherwise a zero match count becomes epsilon.
  double smoothing_epsilon = 0.0;
};

BleuStats bleu_stats(std::span<const std::string> candidate, std::span<const Tokens> references, std::size_t max_n);
double bleu_from_stats(const BleuStats& stats, const BleuOptions& opts = {});
double bleu(std::span<const std::string> candidate, std::span<const Tokens> references, const BleuOptions& opts = {});

// TF-IDF n-gram cosine similarity with document frequencies taken over the
// reference sets of a whole corpus.
class CiderScorer {
 public:
  explicit CiderScorer(std::span<const std::vector<Tokens>> corpus_refs, std::size_t max_n = 4);

  double score(std::span<const std::string> candidate, std::span<const Tokens> references) const;
  double idf(const Tokens& ngram) const;
  std::size_t corpus_size() const { return corpus_size_; }

 private:
  std::map<Tokens, double> weights(std::span<const std::string> tokens, std::size_t n) const;

  std::size_t max_n_;
  std::size_t corpus_size_;
  std::map<Tokens, std::size_t> document_frequency_;
};

double cider(std::span<const std::string> candidate, std::span<const Tokens> references,
             std::span<const std::vector<Tokens>> corpus_refs, std::size_t max_n = 4);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

// LCS F-measure; the maximum over references.
double rouge_l(std::span<const std::string> candidate, std::span<const Tokens> references, double beta = 1.2);

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  bool exact = true;  // false when the search budget ran out before proving optimality
};

// Exact-surface unigram alignment: maximum matches, then fewest chunks.
MeteorAlignment meteor_align(std::span<const std::string> candidate, std::span<const std::string> reference);
double meteor_score(std::size_t candidate_len, std::size_t reference_len, const MeteorAlignment& alignment);
double meteor(std::span<const std::string> candidate, std::span<const std::string> reference);
// Best score over references.
double meteor(std::span<const std::string> candidate, std::span<const Tokens> references);

struct MetricReport {
  double bleu_1 = 0, bleu_2 = 0, bleu_3 = 0, bleu_4 = 0;
  double bleu_avg = 0;
  double cider = 0;
  double rouge_l = 0;
  double meteor = 0;
  std::size_t corpus_size = 0;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
};

struct ScoredPair {
  Tokens candidate;
  std::vector<Tokens> references;
};

// Corpus-level BLEU-1..4 (pooled clipped counts and lengths); CIDEr, ROUGE-L
// and METEOR averaged over items. CIDEr document frequencies come from the
// references of `pairs` itself.
MetricReport corpus_report(std::span<const ScoredPair> pairs, const BleuOptions& bleu_opts = {});

// Average of sentence-level BLEU-max_n.
double mean_sentence_bleu(std::span<const ScoredPair> pairs, const BleuOptions& opts = {});

}  // namespace keycap
