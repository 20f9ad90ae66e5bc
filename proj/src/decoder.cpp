#include "keycap/decoder.hpp"

#include <algorithm>

#include "keycap/encoder.hpp"
#include "keycap/error.hpp"

namespace keycap {

namespace {

constexpr const char* kImageProj = "decoder.image_proj";
constexpr const char* kOutWeight = "decoder.out.weight";
constexpr const char* kOutBias = "decoder.out.bias";

struct LstmNames {
  std::string w_ih, w_hh, bias;
};

LstmNames lstm_names(bool reverse) {
  const std::string pre = reverse ? "decoder.lstm_rev." : "decoder.lstm.";
  return {pre + "w_ih", pre + "w_hh", pre + "bias"};
}

}  // namespace

void GeneratorConfig::validate() const {
  if (vocab_size == 0 || image_feature_size == 0 || keyword_size == 0 || word_embed_size == 0 || lstm_hidden == 0) {
    throw ConfigError("generator: all sizes must be >= 1");
  }
  if (max_gen_len < 2) throw ConfigError("generator: max_gen_len must be >= 2");
  if (pixel_input_size > 0 && pixel_hidden == 0) throw ConfigError("generator: pixel_hidden must be >= 1");
}

std::string generator_word_table(const GeneratorConfig& cfg) {
  return cfg.share_embeddings ? encoder_token_table() : "decoder.word_embed";
}

void init_generator_parameters(const GeneratorConfig& cfg, Parameters& params, SeededRng& rng) {
  cfg.validate();
  const std::size_t h = cfg.lstm_hidden;
  if (cfg.pixel_input_size > 0) {
    params.add("image.mlp0.weight", xavier_uniform(cfg.pixel_hidden, cfg.pixel_input_size, rng));
    params.add("image.mlp0.bias", Tensor::zeros({cfg.pixel_hidden}));
    params.add("image.mlp1.weight", xavier_uniform(cfg.image_feature_size, cfg.pixel_hidden, rng));
    params.add("image.mlp1.bias", Tensor::zeros({cfg.image_feature_size}));
  }
  const std::string table = generator_word_table(cfg);
  if (params.contains(table)) {
    const Tensor& t = params.at(table);
    if (t.dim(0) != cfg.vocab_size || t.dim(1) != cfg.word_embed_size) {
      throw ConfigError("generator: shared embedding table " + shape_str(t.shape()) + " does not match vocab " +
                        std::to_string(cfg.vocab_size) + " x word_embed_size " +
                        std::to_string(cfg.word_embed_size));
    }
  } else {
    params.add(table, xavier_uniform(cfg.vocab_size, cfg.word_embed_size, rng));
  }
  params.add(kImageProj, xavier_uniform(cfg.word_embed_size, cfg.image_feature_size, rng));
  for (bool reverse : {false, true}) {
    if (reverse && !cfg.bidirectional_training) continue;
    const LstmNames n = lstm_names(reverse);
    params.add(n.w_ih, xavier_uniform(4 * h, cfg.lstm_input_size(), rng));
    params.add(n.w_hh, xavier_uniform(4 * h, h, rng));
    params.add(n.bias, Tensor::zeros({4 * h}));
  }
  const std::size_t out_in = cfg.bidirectional_training ? 2 * h : h;
  params.add(kOutWeight, xavier_uniform(cfg.vocab_size, out_in, rng));
  params.add(kOutBias, Tensor::zeros({cfg.vocab_size}));
}

Var image_features(const GeneratorConfig& cfg, ParamBinding& bind, Var image) {
  const std::size_t expected = cfg.pixel_input_size > 0 ? cfg.pixel_input_size : cfg.image_feature_size;
  if (image.value().size() != expected) {
    throw ShapeError("image input of shape " + shape_str(image.shape()) + " but the model expects " +
                     std::to_string(expected) + (cfg.pixel_input_size > 0 ? " pixels" : " features"));
  }
  Var x = image.value().rank() == 2 ? image : reshape(image, {1, expected});
  if (cfg.pixel_input_size == 0) return x;
  x = tanh(linear(x, bind("image.mlp0.weight"), bind("image.mlp0.bias")));
  return tanh(linear(x, bind("image.mlp1.weight"), bind("image.mlp1.bias")));
}

Var project_image(Var w_d, Var phi) { return linear(phi, w_d); }

Var fuse(Var keyword_repr, Var phi) { return concat_lastdim({keyword_repr, phi}); }

LstmState zero_state(const GeneratorConfig& cfg) {
  return {Tensor::zeros({1, cfg.lstm_hidden}), Tensor::zeros({1, cfg.lstm_hidden})};
}

CellOutput lstm_cell(Var input_proj, Var h, Var c, Var w_hh) {
  const std::size_t hidden = h.value().dim(1);
  Var gates = add(input_proj, linear(h, w_hh));
  Var i = sigmoid(slice_lastdim(gates, 0, hidden));
  Var f = sigmoid(slice_lastdim(gates, hidden, hidden));
  Var g = tanh(slice_lastdim(gates, 2 * hidden, hidden));
  Var o = sigmoid(slice_lastdim(gates, 3 * hidden, hidden));
  Var c_next = add(mul(f, c), mul(i, g));
  return {mul(o, tanh(c_next)), c_next};
}

namespace {

Var output_logits(const GeneratorConfig& cfg, ParamBinding& bind, Var hidden_rows) {
  Var features = hidden_rows;
  if (cfg.bidirectional_training) {
    Graph& g = bind.graph();
    const std::size_t rows = hidden_rows.value().dim(0);
    features = concat_lastdim({hidden_rows, g.constant(Tensor::zeros({rows, cfg.lstm_hidden}))});
  }
  return linear(features, bind(kOutWeight), bind(kOutBias));
}

}  // namespace

StepVars decode_step(const GeneratorConfig& cfg, ParamBinding& bind, Var h, Var c, Var e, Var k_fused,
                     std::size_t prev_token) {
  const LstmNames n = lstm_names(false);
  const std::size_t ids[] = {prev_token};
  Var x = embedding_lookup(bind(generator_word_table(cfg)), ids);
  Var input = concat_lastdim({e, k_fused, x});
  CellOutput next = lstm_cell(linear(input, bind(n.w_ih), bind(n.bias)), h, c, bind(n.w_hh));
  Var logits = output_logits(cfg, bind, next.h);
  return {logits, softmax_lastdim(logits), next};
}

TeacherForced teacher_forced_forward(const GeneratorConfig& cfg, ParamBinding& bind, Var e, Var k_fused,
                                     std::span<const std::size_t> caption) {
  if (caption.size() < 2) {
    throw InputError("teacher_forced_forward: caption needs at least 2 tokens, got " + std::to_string(caption.size()));
  }
  Graph& g = bind.graph();
  const std::size_t steps = caption.size() - 1;
  const std::size_t hidden = cfg.lstm_hidden;

  Var words = embedding_lookup(bind(generator_word_table(cfg)), caption.first(steps));
  Var context = repeat_rows(concat_lastdim({e, k_fused}), steps);
  Var inputs = concat_lastdim({context, words});

  auto run = [&](bool reverse) {
    const LstmNames n = lstm_names(reverse);
    Var proj = linear(inputs, bind(n.w_ih), bind(n.bias));
    Var w_hh = bind(n.w_hh);
    Var h = g.constant(Tensor::zeros({1, hidden}));
    Var c = g.constant(Tensor::zeros({1, hidden}));
    std::vector<Var> outputs(steps);
    for (std::size_t k = 0; k < steps; ++k) {
      const std::size_t t = reverse ? steps - 1 - k : k;
      CellOutput next = lstm_cell(row(proj, t), h, c, w_hh);
      h = next.h;
      c = next.c;
      outputs[t] = h;
    }
    return concat_rows(outputs);
  };

  Var hidden_rows = run(false);
  if (cfg.bidirectional_training) hidden_rows = concat_lastdim({hidden_rows, run(true)});
  Var logits = linear(hidden_rows, bind(kOutWeight), bind(kOutBias));
  Var probs = softmax_lastdim(logits);
  std::vector<std::size_t> labels(caption.begin() + 1, caption.end());
  Var loss = categorical_cross_entropy(probs, labels);
  return {probs, loss, steps};
}

}  // namespace keycap
