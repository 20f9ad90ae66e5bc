#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "keycap/model.hpp"
#include "keycap/training.hpp"

namespace keycap {

struct ConfigKey {
  std::string_view name;
  std::string_view default_value;
  std::string_view help;
};

// Every recognised key with its default.
std::span<const ConfigKey> config_keys();

// Flat key=value settings with dotted keys. '#' starts a comment line.
class Config {
 public:
  Config();  // all defaults

  static Config parse(std::istream& in);
  static Config load(const std::string& path);

  void set(std::string_view key, std::string value);
  const std::string& get(std::string_view key) const;
  std::size_t get_size(std::string_view key) const;
  std::uint64_t get_u64(std::string_view key) const;
  double get_double(std::string_view key) const;
  bool get_bool(std::string_view key) const;

  // Sorted key=value lines; parse(echo()) round-trips.
  std::string echo() const;

 private:
  std::map<std::string, std::string, std::less<>> values_;
};

struct RunConfig {
  ModelConfig model;  // vocab_size left at 0 until a vocabulary exists
  TrainConfig train;
  std::size_t max_caption_len = 50;
  std::size_t min_count = 2;
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  std::size_t beams = 3;
  double bleu_smoothing = 0.0;

  std::string dataset_path;
  std::string vocab_path;
  std::string checkpoint_path;
  std::string log_path;
  std::string captions_path;
  std::string report_path;
  // Evaluate these captions instead of decoding with the checkpoint.
  std::string eval_captions_path;

  std::size_t synth_n = 64;
  std::uint64_t synth_seed = 0;

  std::string echo;  // the Config it came from

  static RunConfig from(const Config& c);
};

}  // namespace keycap
