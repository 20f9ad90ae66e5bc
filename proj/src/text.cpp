#include "keycap/text.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <zlib.h>

#include "keycap/error.hpp"

namespace keycap {

namespace {

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> specials{"<pad>", "<unk>", "<start>", "<end>"};
  return specials;
}

constexpr std::string_view kSeparatorToken = "<sep>";

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

}  // namespace

std::vector<std::string> preprocess(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char c : text) {
    if (is_space(c)) {
      flush();
    } else if (c >= 'A' && c <= 'Z') {
      current.push_back(static_cast<char>(c - 'A' + 'a'));
    } else if (c >= 'a' && c <= 'z') {
      current.push_back(c);
    }
  }
  flush();
  return tokens;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], i).second) {
      throw InputError("vocabulary: duplicate token '" + tokens_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::build(const Corpus& corpus, std::size_t min_count) {
  if (corpus.empty()) throw InputError("build_vocabulary: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& sentence : corpus) {
    for (const auto& tok : sentence) ++counts[tok];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : counts) {
    if (n < min_count || tok == kSeparatorToken) continue;
    if (std::find(special_tokens().begin(), special_tokens().end(), tok) != special_tokens().end()) continue;
    kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = special_tokens();
  tokens.emplace_back(kSeparatorToken);
  for (auto& [tok, n] : kept) tokens.push_back(std::move(tok));
  return Vocabulary(std::move(tokens));
}

std::size_t Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size()) {
    throw IndexError("vocabulary: id " + std::to_string(id) + " out of range for size " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

void Vocabulary::write(std::ostream& out) const {
  for (const auto& tok : tokens_) out << tok << '\n';
}

std::string Vocabulary::serialize() const {
  std::ostringstream out;
  write(out);
  return out.str();
}

std::uint32_t Vocabulary::fingerprint() const {
  const std::string text = serialize();
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size())));
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write vocabulary to " + path);
  write(out);
}

Vocabulary Vocabulary::read(std::istream& in) {
  std::vector<std::string> tokens;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno <= kNumSpecials && line != special_tokens()[lineno - 1]) {
      throw DataError("vocabulary header expects '" + special_tokens()[lineno - 1] + "', got '" + line + "'", lineno);
    }
    if (line.empty()) throw DataError("vocabulary: empty token", lineno);
    tokens.push_back(line);
  }
  if (tokens.size() <= kNumSpecials || tokens[kSeparator] != kSeparatorToken) {
    throw DataError("vocabulary: missing special-token header or separator");
  }
  return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read vocabulary from " + path);
  return read(in);
}

EncodedSequence encode(const Vocabulary& vocab, std::span<const std::string> tokens, std::size_t max_len,
                       bool add_bounds) {
  if (max_len == 0 || (add_bounds && max_len < 2)) {
    throw InputError("encode: max_len " + std::to_string(max_len) + " too small");
  }
  EncodedSequence seq;
  seq.ids.reserve(max_len);
  if (add_bounds) seq.ids.push_back(kStart);
  for (const auto& tok : tokens) {
    if (seq.ids.size() == max_len) break;
    seq.ids.push_back(vocab.id(tok));
  }
  if (add_bounds) {
    if (seq.ids.size() == max_len) {
      seq.ids.back() = kEnd;
    } else {
      seq.ids.push_back(kEnd);
    }
  }
  seq.true_length = seq.ids.size();
  seq.ids.resize(max_len, kPad);
  return seq;
}

std::vector<std::string> decode(const Vocabulary& vocab, std::span<const std::size_t> ids) {
  std::vector<std::string> out;
  for (std::size_t id : ids) {
    if (id == kEnd) break;
    if (id == kPad || id == kStart) continue;
    out.push_back(vocab.token(id));
  }
  return out;
}

std::vector<std::string> keyword_tokens(std::span<const std::string> keywords) {
  std::vector<std::string> out;
  for (const auto& kw : keywords) {
    auto toks = preprocess(kw);
    if (toks.empty()) continue;
    if (!out.empty()) out.emplace_back(kSeparatorToken);
    out.insert(out.end(), toks.begin(), toks.end());
  }
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace keycap
