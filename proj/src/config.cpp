#include "keycap/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "keycap/error.hpp"

namespace keycap {

namespace {

constexpr ConfigKey kKeys[] = {
    {"seed", "0", "model initialisation and shuffling seed"},
    {"dataset.path", "data.jsonl", "line-delimited JSON dataset"},
    {"dataset.split_seed", "0", "seed for assigning splits to unsplit records"},
    {"vocab.path", "vocab.txt", "vocabulary file written by train"},
    {"vocab.min_count", "2", "rarer tokens map to <unk>"},
    {"text.max_keyword_len", "16", "keyword sequence length incl. padding"},
    {"text.max_caption_len", "50", "caption length incl. <start>/<end>"},
    {"model.embed_size", "64", "token embedding width"},
    {"model.hidden_size", "64", "attention width"},
    {"model.num_blocks", "2", "masked self-attention blocks"},
    {"model.num_heads", "2", "attention heads"},
    {"model.ffn_size", "128", "feed-forward inner width"},
    {"model.keyword_size", "64", "keyword representation width"},
    {"model.reinforce_layers", "2", "fully-connected layers after pooling"},
    {"model.activation", "gelu", "gelu|tanh|relu"},
    {"model.pooling", "mean", "mean|last"},
    {"model.residual", "false", "pre-norm residual blocks"},
    {"model.positional", "true", "learned positional embedding"},
    {"model.layer_norm_eps", "1e-5", "layer norm epsilon"},
    {"model.image_feature_size", "8", "image feature width"},
    {"model.word_embed_size", "64", "caption word embedding width"},
    {"model.lstm_hidden", "256", "LSTM state width"},
    {"model.bidirectional", "false", "reverse LSTM during training"},
    {"model.share_embeddings", "true", "caption words reuse the keyword token table"},
    {"model.pixel_hidden", "64", "hidden width of the pixel encoder"},
    {"train.epochs", "2", "passes over the training split"},
    {"train.batch_size", "64", "examples per update"},
    {"train.learning_rate", "1e-3", "Adam step size"},
    {"train.beta1", "0.9", "Adam first-moment decay"},
    {"train.beta2", "0.999", "Adam second-moment decay"},
    {"train.eps", "1e-8", "Adam denominator epsilon"},
    {"train.grad_clip", "0", "global gradient norm limit, 0 disables"},
    {"train.log", "train.log", "training log file"},
    {"checkpoint.path", "model.kcap", "checkpoint file"},
    {"decode.beams", "3", "beam width"},
    {"decode.max_len", "50", "maximum generated tokens"},
    {"decode.length_normalized", "false", "rank beams by mean log-probability"},
    {"generate.captions", "captions.tsv", "generated captions output"},
    {"evaluate.report", "report.json", "metric report output"},
    {"evaluate.captions", "", "score this captions file instead of decoding"},
    {"evaluate.bleu_smoothing", "0", "add-epsilon BLEU smoothing"},
    {"synth.n", "64", "records to generate"},
    {"synth.seed", "0", "synthetic corpus seed"},
};

const ConfigKey* find_key(std::string_view name) {
  for (const auto& k : kKeys) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(std::string_view key, const std::string& text) {
  T v{};
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError("config key '" + std::string(key) + "': '" + text + "' is not a valid number");
  }
  return v;
}

}  // namespace

std::span<const ConfigKey> config_keys() { return kKeys; }

Config::Config() {
  for (const auto& k : kKeys) values_.emplace(std::string(k.name), std::string(k.default_value));
}

Config Config::parse(std::istream& in) {
  Config c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    try {
      c.set(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse(in);
}

void Config::set(std::string_view key, std::string value) {
  if (!find_key(key)) throw ConfigError("unknown config key '" + std::string(key) + "'");
  values_.find(key)->second = std::move(value);
}

const std::string& Config::get(std::string_view key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  return it->second;
}

std::size_t Config::get_size(std::string_view key) const { return parse_number<std::size_t>(key, get(key)); }
std::uint64_t Config::get_u64(std::string_view key) const { return parse_number<std::uint64_t>(key, get(key)); }

double Config::get_double(std::string_view key) const {
  // from_chars for double is missing from older libstdc++, so go through strtod.
  const std::string& text = get(key);
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size()) {
    throw ConfigError("config key '" + std::string(key) + "': '" + text + "' is not a valid number");
  }
  return v;
}

bool Config::get_bool(std::string_view key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + std::string(key) + "': '" + v + "' is not true/false");
}

std::string Config::echo() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

RunConfig RunConfig::from(const Config& c) {
  RunConfig r;
  r.seed = c.get_u64("seed");
  r.split_seed = c.get_u64("dataset.split_seed");
  r.dataset_path = c.get("dataset.path");
  r.vocab_path = c.get("vocab.path");
  r.min_count = c.get_size("vocab.min_count");
  r.max_caption_len = c.get_size("text.max_caption_len");

  EncoderConfig& enc = r.model.encoder;
  enc.max_keyword_len = c.get_size("text.max_keyword_len");
  enc.embed_size = c.get_size("model.embed_size");
  enc.hidden_size = c.get_size("model.hidden_size");
  enc.num_blocks = c.get_size("model.num_blocks");
  enc.num_heads = c.get_size("model.num_heads");
  enc.ffn_size = c.get_size("model.ffn_size");
  enc.output_size = c.get_size("model.keyword_size");
  enc.reinforce_layers = c.get_size("model.reinforce_layers");
  try {
    enc.activation = parse_activation(c.get("model.activation"));
  } catch (const Error& e) {
    throw ConfigError(std::string("model.activation: ") + e.what());
  }
  const std::string& pooling = c.get("model.pooling");
  if (pooling == "mean") {
    enc.pooling = Pooling::mean;
  } else if (pooling == "last") {
    enc.pooling = Pooling::last;
  } else {
    throw ConfigError("model.pooling: '" + pooling + "' is not mean|last");
  }
  enc.residual = c.get_bool("model.residual");
  enc.positional = c.get_bool("model.positional");
  enc.eps = c.get_double("model.layer_norm_eps");

  GeneratorConfig& gen = r.model.generator;
  gen.image_feature_size = c.get_size("model.image_feature_size");
  gen.keyword_size = enc.output_size;
  gen.word_embed_size = c.get_size("model.word_embed_size");
  gen.lstm_hidden = c.get_size("model.lstm_hidden");
  gen.bidirectional_training = c.get_bool("model.bidirectional");
  gen.share_embeddings = c.get_bool("model.share_embeddings");
  gen.pixel_hidden = c.get_size("model.pixel_hidden");
  gen.max_gen_len = c.get_size("decode.max_len");
  gen.length_normalized = c.get_bool("decode.length_normalized");

  TrainConfig& tr = r.train;
  tr.epochs = c.get_size("train.epochs");
  tr.batch_size = c.get_size("train.batch_size");
  tr.learning_rate = c.get_double("train.learning_rate");
  tr.beta1 = c.get_double("train.beta1");
  tr.beta2 = c.get_double("train.beta2");
  tr.eps = c.get_double("train.eps");
  tr.grad_clip = c.get_double("train.grad_clip");
  tr.seed = r.seed;
  tr.validate();

  r.log_path = c.get("train.log");
  r.checkpoint_path = c.get("checkpoint.path");
  r.beams = c.get_size("decode.beams");
  if (r.beams < 1) throw ConfigError("decode.beams must be >= 1");
  r.captions_path = c.get("generate.captions");
  r.report_path = c.get("evaluate.report");
  r.eval_captions_path = c.get("evaluate.captions");
  r.bleu_smoothing = c.get_double("evaluate.bleu_smoothing");
  if (r.bleu_smoothing < 0) throw ConfigError("evaluate.bleu_smoothing must be >= 0");
  r.synth_n = c.get_size("synth.n");
  r.synth_seed = c.get_u64("synth.seed");
  r.echo = c.echo();
  return r;
}

}  // namespace keycap
