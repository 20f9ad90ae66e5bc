#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace keycap {

// Reserved ids. kSeparator joins multi-word keywords into one sequence.
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kUnk = 1;
inline constexpr std::size_t kStart = 2;
inline constexpr std::size_t kEnd = 3;
inline constexpr std::size_t kSeparator = 4;
inline constexpr std::size_t kNumSpecials = 4;

// Lower-cased alphabetic tokens. Non-letters inside a whitespace-delimited
// word are dropped ("OD-2021" -> "od"); words left empty are skipped.
std::vector<std::string> preprocess(std::string_view text);

using Corpus = std::vector<std::vector<std::string>>;

class Vocabulary {
 public:
  // Tokens seen fewer than min_count times map to <unk>. Ids are assigned by
  // descending count, then lexicographically.
  static Vocabulary build(const Corpus& corpus, std::size_t min_count = 2);

  static Vocabulary read(std::istream& in);
  static Vocabulary load(const std::string& path);
  void write(std::ostream& out) const;
  void save(const std::string& path) const;
  std::string serialize() const;
  // CRC32 of serialize().
  std::uint32_t fingerprint() const;

  std::size_t size() const { return tokens_.size(); }
  std::size_t id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(std::size_t id) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  explicit Vocabulary(std::vector<std::string> tokens);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct EncodedSequence {
  std::vector<std::size_t> ids;  // exactly max_len entries
  std::size_t true_length = 0;   // entries before padding

  std::span<const std::size_t> used() const { return {ids.data(), true_length}; }
};

// With add_bounds the sequence is wrapped in <start> ... <end>; on truncation
// <start> is kept and the last slot is forced to <end>.
EncodedSequence encode(const Vocabulary& vocab, std::span<const std::string> tokens, std::size_t max_len,
                       bool add_bounds);

// Inverse of encode: drops <pad>/<start> and stops at <end>.
std::vector<std::string> decode(const Vocabulary& vocab, std::span<const std::size_t> ids);

// Keyword phrases are preprocessed and joined with the separator token.
std::vector<std::string> keyword_tokens(std::span<const std::string> keywords);

std::string join_tokens(std::span<const std::string> tokens);

}  // namespace keycap
