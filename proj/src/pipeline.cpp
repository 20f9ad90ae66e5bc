#include "keycap/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "keycap/error.hpp"

namespace keycap {

Vocabulary build_vocabulary(std::span<const SampleRecord* const> records, std::size_t min_count) {
  Corpus corpus;
  for (const SampleRecord* r : records) {
    corpus.push_back(keyword_tokens(r->keywords));
    corpus.push_back(preprocess(r->description));
  }
  return Vocabulary::build(corpus, min_count);
}

ModelConfig model_config_for(const RunConfig& run, const Vocabulary& vocab,
                             std::span<const SampleRecord* const> records) {
  ModelConfig cfg = run.model;
  if (records.empty()) throw DataError("no records to size the model from");
  const SampleRecord& first = *records.front();
  for (const SampleRecord* r : records) {
    if (r->has_pixels() != first.has_pixels() || r->image().size() != first.image().size()) {
      throw DataError("record '" + r->id + "' has an image input of " + std::to_string(r->image().size()) +
                      " values but '" + first.id + "' has " + std::to_string(first.image().size()));
    }
  }
  if (first.has_pixels()) {
    cfg.generator.pixel_input_size = first.pixels.size();
  } else if (first.image_feature.size() != cfg.generator.image_feature_size) {
    throw DataError("dataset image_feature has " + std::to_string(first.image_feature.size()) +
                    " values but model.image_feature_size is " + std::to_string(cfg.generator.image_feature_size));
  }
  cfg.finalize(vocab.size());
  return cfg;
}

Example prepare_example(const SampleRecord& r, const Vocabulary& vocab, const RunConfig& run) {
  Example ex;
  ex.id = r.id;
  const auto kw = keyword_tokens(r.keywords);
  if (kw.empty()) throw DataError("record '" + r.id + "' has no alphabetic keyword tokens");
  ex.keywords = encode(vocab, kw, run.model.encoder.max_keyword_len, false);
  ex.caption = encode(vocab, preprocess(r.description), run.max_caption_len, true);
  ex.image = Tensor::matrix(1, r.image().size(), r.image());
  return ex;
}

std::vector<Example> prepare_examples(std::span<const SampleRecord* const> records, const Vocabulary& vocab,
                                      const RunConfig& run) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const SampleRecord* r : records) out.push_back(prepare_example(*r, vocab, run));
  return out;
}

std::vector<GeneratedCaption> generate_captions(const CaptionModel& model, const Vocabulary& vocab,
                                                std::span<const Example> examples, std::size_t beams) {
  std::vector<GeneratedCaption> out;
  out.reserve(examples.size());
  for (const Example& ex : examples) {
    const Tensor phi = model.image_feature(ex.image);
    const Tensor kw = model.keyword_representation(ex.keywords.ids);
    out.push_back({ex.id, caption_tokens(vocab, model.beam_search(phi, kw, beams))});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

std::string format_captions(std::span<const GeneratedCaption> captions) {
  std::string out;
  for (const auto& c : captions) out += c.id + "\t" + join_tokens(c.tokens) + "\n";
  return out;
}

std::map<std::string, std::vector<std::string>> parse_captions(std::istream& in) {
  std::map<std::string, std::vector<std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) throw DataError("captions: expected '<id>\\t<caption>'", lineno);
    const std::string id = line.substr(0, tab);
    if (!out.emplace(id, preprocess(std::string_view(line).substr(tab + 1))).second) {
      throw DataError("captions: duplicate id '" + id + "'", lineno);
    }
  }
  return out;
}

MetricReport evaluate_captions(const std::map<std::string, std::vector<std::string>>& candidates,
                               std::span<const SampleRecord* const> records, const BleuOptions& opts) {
  if (records.empty()) throw DataError("evaluate: no records to score");
  std::vector<ScoredPair> pairs;
  pairs.reserve(records.size());
  for (const SampleRecord* r : records) {
    auto it = candidates.find(r->id);
    if (it == candidates.end()) throw DataError("evaluate: no caption for record '" + r->id + "'");
    pairs.push_back({it->second, {preprocess(r->description)}});
  }
  return corpus_report(pairs, opts);
}

namespace {

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  out << text;
  if (!out) throw InputError("failed writing " + path);
}

struct Splits {
  std::vector<SampleRecord> records;
  std::vector<const SampleRecord*> train, val, test;
};

Splits load_splits(const RunConfig& run) {
  Splits s;
  s.records = load_dataset(run.dataset_path, run.split_seed);
  s.train = records_in(s.records, Split::train);
  s.val = records_in(s.records, Split::val);
  s.test = records_in(s.records, Split::test);
  return s;
}

}  // namespace

LoadedModel load_model(const RunConfig& run, std::span<const SampleRecord* const> records) {
  std::ifstream probe(run.checkpoint_path, std::ios::binary);
  if (!probe) throw InputError("checkpoint not found: " + run.checkpoint_path + " (run train first)");
  probe.close();
  Vocabulary vocab = Vocabulary::load(run.vocab_path);
  Checkpoint ckpt = load_checkpoint(run.checkpoint_path);
  if (ckpt.vocab_fingerprint != vocab.fingerprint()) {
    throw ConfigError("vocabulary " + run.vocab_path + " does not match the one checkpoint " + run.checkpoint_path +
                      " was trained with");
  }
  ModelConfig cfg = model_config_for(run, vocab, records);
  return {std::move(vocab), CaptionModel(cfg, std::move(ckpt.params))};
}

TrainResult cmd_train(const RunConfig& run, std::ostream& out) {
  Splits s = load_splits(run);
  if (s.train.empty()) throw DataError("dataset has no train records");
  if (s.val.empty()) throw DataError("dataset has no val records");
  const Vocabulary vocab = build_vocabulary(s.train, run.min_count);
  const ModelConfig cfg = model_config_for(run, vocab, s.train);
  const auto train_set = prepare_examples(s.train, vocab, run);
  const auto val_set = prepare_examples(s.val, vocab, run);

  CaptionModel model(cfg, run.seed);
  out << "records=" << s.records.size() << " train=" << s.train.size() << " val=" << s.val.size()
      << " test=" << s.test.size() << " vocab=" << vocab.size()
      << " params=" << model.parameters().scalar_count() << "\n";
  std::ofstream log(run.log_path, std::ios::binary);
  if (!log) throw InputError("cannot write " + run.log_path);
  TrainResult result = train(model, train_set, val_set, run.train, [&](const LogRecord& r) {
    log << r.format() << "\n";
    if (r.val_loss) out << r.format() << "\n";
  });
  result.best.vocab_fingerprint = vocab.fingerprint();
  result.best.config = run.echo;
  vocab.save(run.vocab_path);
  save_checkpoint(result.best, run.checkpoint_path);
  out << "best_epoch=" << result.best_epoch << " best_val_loss=" << result.best_val_loss
      << " checkpoint=" << run.checkpoint_path << "\n";
  return result;
}

void cmd_generate(const RunConfig& run, std::ostream& out) {
  Splits s = load_splits(run);
  if (s.test.empty()) throw DataError("dataset has no test records");
  LoadedModel m = load_model(run, s.test);
  const auto examples = prepare_examples(s.test, m.vocab, run);
  const auto captions = generate_captions(m.model, m.vocab, examples, run.beams);
  write_file(run.captions_path, format_captions(captions));
  out << "captions=" << captions.size() << " beams=" << run.beams << " output=" << run.captions_path << "\n";
}

MetricReport cmd_evaluate(const RunConfig& run, std::ostream& out) {
  Splits s = load_splits(run);
  if (s.test.empty()) throw DataError("dataset has no test records");
  std::map<std::string, std::vector<std::string>> candidates;
  if (!run.eval_captions_path.empty()) {
    std::ifstream in(run.eval_captions_path);
    if (!in) throw DataError("cannot open captions " + run.eval_captions_path);
    candidates = parse_captions(in);
  } else {
    LoadedModel m = load_model(run, s.test);
    const auto examples = prepare_examples(s.test, m.vocab, run);
    for (auto& c : generate_captions(m.model, m.vocab, examples, run.beams)) {
      candidates.emplace(std::move(c.id), std::move(c.tokens));
    }
  }
  BleuOptions opts;
  opts.smoothing_epsilon = run.bleu_smoothing;
  const MetricReport report = evaluate_captions(candidates, s.test, opts);
  write_file(run.report_path, report.to_json() + "\n");
  out << report.to_json() << "\n";
  return report;
}

void cmd_synth(const RunConfig& run, std::ostream& out) {
  synth_write(run.dataset_path, run.synth_n, run.synth_seed);
  out << "records=" << run.synth_n << " seed=" << run.synth_seed << " output=" << run.dataset_path << "\n";
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ContractError*>(&e)) return 1;
  if (dynamic_cast<const Error*>(&e)) return 2;
  return 1;
}

}  // namespace keycap
