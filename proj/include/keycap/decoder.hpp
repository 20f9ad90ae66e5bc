#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "keycap/params.hpp"
#include "keycap/tensor.hpp"

namespace keycap {

struct GeneratorConfig {
  std::size_t vocab_size = 0;
  std::size_t image_feature_size = 8;  // F_img
  std::size_t keyword_size = 64;       // F_k, must match the encoder output
  std::size_t word_embed_size = 64;    // E
  std::size_t lstm_hidden = 256;
  std::size_t max_gen_len = 50;
  // Adds a reverse-direction LSTM during teacher forcing only; inference
  // always runs forward-only with the reverse half of the state zeroed.
  bool bidirectional_training = false;
  // Reuse the keyword encoder's token table for caption words.
  bool share_embeddings = true;
  // Rank beam hypotheses by mean instead of total log-probability.
  bool length_normalized = false;
  // > 0: images arrive as raw pixel vectors of this length and pass through a
  // two-layer tanh perceptron to produce the F_img feature.
  std::size_t pixel_input_size = 0;
  std::size_t pixel_hidden = 64;

  void validate() const;
  std::size_t context_size() const { return keyword_size + image_feature_size; }
  std::size_t lstm_input_size() const { return 2 * word_embed_size + context_size(); }
};

std::string generator_word_table(const GeneratorConfig& cfg);

void init_generator_parameters(const GeneratorConfig& cfg, Parameters& params, SeededRng& rng);

// φ(I) from raw pixels; identity when pixel_input_size == 0.
Var image_features(const GeneratorConfig& cfg, ParamBinding& bind, Var image);

// e = W_d · φ(I), [1×E]. No bias.
Var project_image(Var w_d, Var phi);

// k_fused = [keyword_repr ; φ(I)].
Var fuse(Var keyword_repr, Var phi);

struct LstmState {
  Tensor h;  // [1×H]
  Tensor c;  // [1×H]
};

LstmState zero_state(const GeneratorConfig& cfg);

struct CellOutput {
  Var h;
  Var c;
};

// One LSTM step given the precomputed input projection W_ih·u + b ([1×4H]).
// Gate layout is input, forget, candidate, output.
CellOutput lstm_cell(Var input_proj, Var h, Var c, Var w_hh);

struct StepVars {
  Var logits;  // [1×V]
  Var probs;   // [1×V]
  CellOutput state;
};

// Consumes [e, k_fused, x_t] where x_t embeds prev_token.
StepVars decode_step(const GeneratorConfig& cfg, ParamBinding& bind, Var h, Var c, Var e, Var k_fused,
                     std::size_t prev_token);

struct TeacherForced {
  Var probs;  // [T×V], row t predicts caption[t + 1]
  Var loss;   // mean categorical cross-entropy over the T predictions
  std::size_t predictions = 0;
};

// caption holds the used (unpadded) ids, <start> ... <end>.
TeacherForced teacher_forced_forward(const GeneratorConfig& cfg, ParamBinding& bind, Var e, Var k_fused,
                                     std::span<const std::size_t> caption);

}  // namespace keycap
