#include "keycap/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "keycap/error.hpp"
#include "keycap/tensor.hpp"

namespace keycap {

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw DataError("unknown split '" + std::string(name) + "' (expected train, val or test)");
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

namespace {

using json = nlohmann::json;

std::vector<double> number_array(const json& obj, const char* field, std::size_t line) {
  const json& v = obj.at(field);
  if (!v.is_array() || v.empty()) throw DataError(std::string("field '") + field + "' must be a nonempty array", line);
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& x : v) {
    if (!x.is_number()) throw DataError(std::string("field '") + field + "' must contain only numbers", line);
    out.push_back(x.get<double>());
    if (!std::isfinite(out.back())) throw DataError(std::string("field '") + field + "' has a non-finite value", line);
  }
  return out;
}

std::size_t positive_int(const json& obj, const char* field, std::size_t line) {
  if (!obj.contains(field)) throw DataError(std::string("missing field '") + field + "'", line);
  const json& v = obj.at(field);
  if (!v.is_number_integer() || v.get<long long>() <= 0) {
    throw DataError(std::string("field '") + field + "' must be a positive integer", line);
  }
  return v.get<std::size_t>();
}

std::string nonempty_string(const json& obj, const char* field, std::size_t line) {
  if (!obj.contains(field)) throw DataError(std::string("missing field '") + field + "'", line);
  const json& v = obj.at(field);
  if (!v.is_string()) throw DataError(std::string("field '") + field + "' must be a string", line);
  std::string s = v.get<std::string>();
  if (s.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw DataError(std::string("field '") + field + "' must be nonempty", line);
  }
  return s;
}

SampleRecord parse_record(const std::string& text, std::size_t line) {
  json obj;
  try {
    obj = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("malformed JSON: ") + e.what(), line);
  }
  if (!obj.is_object()) throw DataError("record must be a JSON object", line);

  SampleRecord r;
  r.id = nonempty_string(obj, "id", line);
  r.description = nonempty_string(obj, "description", line);

  if (!obj.contains("keywords")) throw DataError("missing field 'keywords'", line);
  const json& kw = obj.at("keywords");
  if (!kw.is_array() || kw.empty()) throw DataError("field 'keywords' must be a nonempty array", line);
  for (const auto& k : kw) {
    if (!k.is_string() || k.get<std::string>().empty()) {
      throw DataError("field 'keywords' must contain nonempty strings", line);
    }
    r.keywords.push_back(k.get<std::string>());
  }

  const bool has_feature = obj.contains("image_feature");
  const bool has_pixels = obj.contains("pixels");
  if (has_feature == has_pixels) throw DataError("exactly one of 'image_feature' or 'pixels' is required", line);
  if (has_feature) {
    r.image_feature = number_array(obj, "image_feature", line);
  } else {
    r.pixels = number_array(obj, "pixels", line);
    r.width = positive_int(obj, "width", line);
    r.height = positive_int(obj, "height", line);
    if (r.width * r.height != r.pixels.size()) {
      throw DataError("'pixels' has " + std::to_string(r.pixels.size()) + " values but width*height is " +
                          std::to_string(r.width * r.height),
                      line);
    }
  }

  if (obj.contains("split")) {
    const json& s = obj.at("split");
    if (!s.is_string()) throw DataError("field 'split' must be a string", line);
    try {
      r.split = parse_split(s.get<std::string>());
    } catch (const DataError& e) {
      throw DataError(e.what(), line);
    }
  }
  return r;
}

// FNV-1a, then a splitmix64 finaliser keyed by the seed.
std::uint64_t id_hash(const std::string& id, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : id) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = h + seed + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<SampleRecord> parse_dataset(std::istream& in, std::uint64_t split_seed) {
  std::vector<SampleRecord> records;
  std::unordered_set<std::string> seen;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    SampleRecord r = parse_record(text, line);
    if (!seen.insert(r.id).second) throw DataError("duplicate id '" + r.id + "'", line);
    records.push_back(std::move(r));
  }
  if (records.empty()) throw DataError("dataset has no records");
  assign_splits(records, split_seed);
  return records;
}

std::vector<SampleRecord> load_dataset(const std::string& path, std::uint64_t split_seed) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path);
  return parse_dataset(in, split_seed);
}

void assign_splits(std::vector<SampleRecord>& records, std::uint64_t seed) {
  std::vector<std::pair<std::uint64_t, SampleRecord*>> pending;
  for (auto& r : records) {
    if (!r.split) pending.emplace_back(id_hash(r.id, seed), &r);
  }
  std::sort(pending.begin(), pending.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : a.second->id < b.second->id;
  });
  const std::size_t n = pending.size();
  const std::size_t n_train = n * 6 / 10;
  const std::size_t n_val = n * 2 / 10;
  for (std::size_t i = 0; i < n; ++i) {
    pending[i].second->split = i < n_train ? Split::train : i < n_train + n_val ? Split::val : Split::test;
  }
}

std::string record_to_json(const SampleRecord& r) {
  nlohmann::ordered_json obj;
  obj["id"] = r.id;
  if (r.has_pixels()) {
    obj["pixels"] = r.pixels;
    obj["width"] = r.width;
    obj["height"] = r.height;
  } else {
    obj["image_feature"] = r.image_feature;
  }
  obj["keywords"] = r.keywords;
  obj["description"] = r.description;
  if (r.split) obj["split"] = split_name(*r.split);
  return obj.dump();
}

std::vector<const SampleRecord*> records_in(const std::vector<SampleRecord>& records, Split s) {
  std::vector<const SampleRecord*> out;
  for (const auto& r : records) {
    if (r.split == s) out.push_back(&r);
  }
  return out;
}

namespace {

struct Disease {
  const char* keyword;
  const char* finding;  // follows "<side> eye shows <severity>"
};

constexpr std::array<Disease, 4> kDiseases{{
    {"drusen", "drusen deposits scattered around the macula"},
    {"glaucoma", "optic disc cupping with thinning of the rim"},
    {"macular edema", "retinal thickening with fluid in the fovea"},
    {"retinal detachment", "separation of the peripheral retina from the wall"},
}};

constexpr std::array<const char*, 2> kSides{"left", "right"};
constexpr std::array<const char*, 2> kSeverities{"mild", "severe"};

}  // namespace

std::string synth_generate(std::size_t n, std::uint64_t seed) {
  if (n < 4) throw InputError("synth_generate: n must be >= 4");
  SeededRng rng(seed);
  const std::size_t n_attr = kSides.size() * kSeverities.size();
  // Cycle through every (disease, attribute) pair so small corpora are
  // balanced, then shuffle which record gets which pair.
  std::vector<std::size_t> combos(n);
  for (std::size_t i = 0; i < n; ++i) combos[i] = i % (kDiseases.size() * n_attr);
  rng.shuffle(combos);

  std::ostringstream out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t disease = combos[i] % kDiseases.size();
    const std::size_t attr = combos[i] / kDiseases.size();
    const std::size_t side = attr / kSeverities.size();
    const std::size_t severity = attr % kSeverities.size();

    SampleRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "synth-%05zu", i);
    r.id = id;
    r.keywords = {kDiseases[disease].keyword};
    r.description = std::string(kSides[side]) + " eye shows " + kSeverities[severity] + " " + kDiseases[disease].finding;
    r.image_feature.assign(kSynthImageSize, 0.0);
    r.image_feature[attr] = 1.0;
    for (double& v : r.image_feature) v += 0.05 * rng.normal();
    out << record_to_json(r) << '\n';
  }
  return out.str();
}

void synth_write(const std::string& path, std::size_t n, std::uint64_t seed) {
  const std::string text = synth_generate(n, seed);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  out << text;
  if (!out) throw InputError("failed writing " + path);
}

}  // namespace keycap
