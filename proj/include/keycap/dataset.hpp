#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace keycap {

enum class Split { train, val, test };

Split parse_split(std::string_view name);
std::string_view split_name(Split s);

struct SampleRecord {
  std::string id;
  // Exactly one of image_feature / pixels is non-empty.
  std::vector<double> image_feature;
  std::vector<double> pixels;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::string> keywords;
  std::string description;
  std::optional<Split> split;

  bool has_pixels() const { return !pixels.empty(); }
  const std::vector<double>& image() const { return has_pixels() ? pixels : image_feature; }
};

// One JSON object per line; blank lines are skipped. Throws DataError
// carrying the 1-based line number. Records without a split are assigned
// one by assign_splits(split_seed).
std::vector<SampleRecord> parse_dataset(std::istream& in, std::uint64_t split_seed = 0);
std::vector<SampleRecord> load_dataset(const std::string& path, std::uint64_t split_seed = 0);

// Records whose split is unset are ordered by a seeded hash of their id; the
// first floor(0.6n) become train, the next floor(0.2n) val, the rest test.
void assign_splits(std::vector<SampleRecord>& records, std::uint64_t seed);

std::string record_to_json(const SampleRecord& r);

std::vector<const SampleRecord*> records_in(const std::vector<SampleRecord>& records, Split s);

// Toy corpus. Each record names one disease keyword whose description
// template is fixed; the image feature is a noisy one-hot over an attribute
// (eye side and severity) that only the image reveals and that appears in
// the description. Byte-identical output for equal (n, seed).
inline constexpr std::size_t kSynthImageSize = 8;
std::string synth_generate(std::size_t n, std::uint64_t seed);
void synth_write(const std::string& path, std::size_t n, std::uint64_t seed);

}  // namespace keycap
