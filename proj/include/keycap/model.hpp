#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "keycap/beam.hpp"
#include "keycap/decoder.hpp"
#include "keycap/encoder.hpp"
#include "keycap/params.hpp"
#include "keycap/text.hpp"

namespace keycap {

struct ModelConfig {
  EncoderConfig encoder;
  GeneratorConfig generator;

  // Propagates the shared sizes (vocabulary, F_k) and validates everything.
  void finalize(std::size_t vocab_size);
};

// One prepared training/inference item.
struct Example {
  std::string id;
  EncodedSequence keywords;
  EncodedSequence caption;
  Tensor image;  // F_img features, or raw pixels when the model has a pixel encoder
};

struct StepOutput {
  Tensor probs;                    // [1×V]
  std::vector<double> log_probs;   // log-softmax of the logits
  LstmState state;
};

class CaptionModel {
 public:
  CaptionModel(ModelConfig cfg, std::uint64_t seed);
  // Adopts existing weights; names and shapes must match the config.
  CaptionModel(ModelConfig cfg, Parameters params);

  const ModelConfig& config() const { return cfg_; }
  const Parameters& parameters() const { return params_; }
  Parameters& parameters() { return params_; }

  struct Forward {
    Var keyword_repr;  // [1×F_k]
    Var phi;           // [1×F_img]
    TeacherForced tf;
  };
  Forward forward(ParamBinding& bind, const Example& ex) const;
  // Teacher-forced loss without building gradients.
  double loss(const Example& ex) const;

  Tensor keyword_representation(std::span<const std::size_t> keyword_ids) const;  // [F_k]
  Tensor image_feature(const Tensor& image) const;                                // [F_img]

  StepOutput decode_step(const LstmState& state, const Tensor& e, const Tensor& k_fused,
                         std::size_t prev_token) const;

  SearchOptions search_options(std::size_t beams) const;
  BeamHypothesis greedy_decode(const Tensor& phi, const Tensor& keyword_repr) const;
  BeamHypothesis beam_search(const Tensor& phi, const Tensor& keyword_repr, std::size_t beams) const;

  // Adapter exposing the generator to greedy_search/beam_search.
  class Stepper {
   public:
    using State = LstmState;
    Stepper(const CaptionModel& model, const Tensor& phi, const Tensor& keyword_repr);
    State initial() const;
    std::pair<std::vector<double>, State> step(const State& state, std::size_t token) const;

   private:
    const CaptionModel& model_;
    Tensor e_;
    Tensor k_fused_;
  };

 private:
  ModelConfig cfg_;
  Parameters params_;
};

// Generated ids → caption tokens, with <end> and specials stripped.
std::vector<std::string> caption_tokens(const Vocabulary& vocab, const BeamHypothesis& hyp);

}  // namespace keycap
