#pragma once

#include <exception>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "keycap/config.hpp"
#include "keycap/dataset.hpp"
#include "keycap/metrics.hpp"
#include "keycap/model.hpp"
#include "keycap/text.hpp"
#include "keycap/training.hpp"

namespace keycap {

// Keyword and description tokens of the given records.
Vocabulary build_vocabulary(std::span<const SampleRecord* const> records, std::size_t min_count);

// Fills in the vocabulary size and the image input width implied by the
// records; a feature-length mismatch with the config is a DataError.
ModelConfig model_config_for(const RunConfig& run, const Vocabulary& vocab,
                             std::span<const SampleRecord* const> records);

Example prepare_example(const SampleRecord& r, const Vocabulary& vocab, const RunConfig& run);
std::vector<Example> prepare_examples(std::span<const SampleRecord* const> records, const Vocabulary& vocab,
                                      const RunConfig& run);

struct GeneratedCaption {
  std::string id;
  std::vector<std::string> tokens;
};

// Decodes each record with `beams`; result is sorted by id.
std::vector<GeneratedCaption> generate_captions(const CaptionModel& model, const Vocabulary& vocab,
                                                std::span<const Example> examples, std::size_t beams);

// `<id>\t<caption>` lines.
std::string format_captions(std::span<const GeneratedCaption> captions);
std::map<std::string, std::vector<std::string>> parse_captions(std::istream& in);

// Scores candidates against each record's preprocessed description. Every
// record needs a candidate.
MetricReport evaluate_captions(const std::map<std::string, std::vector<std::string>>& candidates,
                               std::span<const SampleRecord* const> records, const BleuOptions& opts = {});

// Weights plus the vocabulary they were trained with.
struct LoadedModel {
  Vocabulary vocab;
  CaptionModel model;
};
LoadedModel load_model(const RunConfig& run, std::span<const SampleRecord* const> records);

// Commands. Each writes the files named by the config; progress lines go to out.
TrainResult cmd_train(const RunConfig& run, std::ostream& out);
void cmd_generate(const RunConfig& run, std::ostream& out);
MetricReport cmd_evaluate(const RunConfig& run, std::ostream& out);
void cmd_synth(const RunConfig& run, std::ostream& out);

// 1 config/usage, 2 data, 3 numeric.
int exit_code_for(const std::exception& e);

}  // namespace keycap
